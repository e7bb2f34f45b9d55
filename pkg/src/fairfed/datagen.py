"""Dataset construction: synthetic shift generators, a delimited-file
adapter, quota partitioning, holdout splitting, and container persistence.

Synthetic data is Gaussian class-conditional with class means placed on a
scaled simplex (one basis direction per class, per-class radius mildly
varied so classes differ in difficulty). Heterogeneity settings control how
concentrated each client's attribute histogram is and how unequal the
client sizes are.
"""

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DOMAIN_NODE,
    LANE_DATA,
    LANE_SPLIT,
    SERVER_NODE,
    ClientData,
    ConfigError,
    DataError,
    FederatedDataset,
    build_group_index,
    rng_stream,
)
from .models import ModelSpec

__all__ = [
    "SETTINGS",
    "SHIFT_KINDS",
    "PartitionSpec",
    "default_cells",
    "cells_for_available",
    "synth_label_shift",
    "synth_feature_shift",
    "TabularSchema",
    "load_tabular_csv",
    "partition",
    "split_holdout",
    "save_dataset",
    "load_dataset",
    "sidecar_path",
    "make_two_group_quadratic_toy",
]

SETTINGS = ("iid", "weak", "strong", "extreme")
SHIFT_KINDS = ("label", "feature", "unbalanced")

# Concentration of each client's mass on its own attribute block, and the
# largest-to-smallest client size ratio, per heterogeneity setting.
_CONCENTRATION = {"iid": 0.0, "weak": 0.45, "strong": 0.8, "extreme": 1.0}
_SIZE_RATIO = {"iid": 1.0, "weak": 2.0, "strong": 4.0, "extreme": 8.0}


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``.

    Floors the ideal shares and hands the remainder to the largest
    fractional parts (ties to the lowest index), so the result is
    deterministic and sums exactly to ``total``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.min() < 0.0 or w.sum() <= 0.0:
        raise ValueError("weights must be non-negative with positive sum")
    ideal = w / w.sum() * total
    base = np.floor(ideal).astype(np.int64)
    short = int(total - base.sum())
    if short:
        frac = ideal - base
        order = np.argsort(-frac, kind="stable")
        base[order[:short]] += 1
    return base


def _block_attrs(i: int, n_clients: int, arity: int) -> list:
    if n_clients <= arity:
        return [k for k in range(arity) if (k * n_clients) // arity == i]
    return [i % arity]


@dataclass(frozen=True)
class PartitionSpec:
    """How samples are spread over clients and attribute values.

    ``samples_per_cell`` is an integer (client x attribute) matrix; row i
    sums to client i's sample count.
    """

    setting: str
    shift_kind: str
    client_count: int
    attribute_arity: int
    samples_per_cell: np.ndarray

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift_kind {self.shift_kind!r}")
        if self.client_count < 1 or self.attribute_arity < 1:
            raise ConfigError("client_count and attribute_arity must be >= 1")
        cells = np.asarray(self.samples_per_cell, dtype=np.int64)
        if cells.shape != (self.client_count, self.attribute_arity):
            raise ConfigError(
                f"samples_per_cell must have shape ({self.client_count}, {self.attribute_arity})"
            )
        if cells.min() < 0:
            raise ConfigError("cell counts must be non-negative")
        if cells.sum() == 0:
            raise ConfigError("cell counts are all zero")
        cells.setflags(write=False)
        object.__setattr__(self, "samples_per_cell", cells)

    @classmethod
    def build(
        cls,
        setting: str,
        shift_kind: str,
        client_count: int,
        attribute_arity: int,
        samples_per_client: int = 200,
        samples_per_cell=None,
        concentration: float = None,
        size_ratio: float = None,
    ) -> "PartitionSpec":
        if samples_per_cell is None:
            samples_per_cell = default_cells(
                setting,
                shift_kind,
                client_count,
                attribute_arity,
                samples_per_client,
                concentration,
                size_ratio,
            )
        return cls(setting, shift_kind, client_count, attribute_arity, samples_per_cell)

    @property
    def client_sizes(self) -> np.ndarray:
        return self.samples_per_cell.sum(axis=1)


def default_cells(
    setting: str,
    shift_kind: str,
    client_count: int,
    attribute_arity: int,
    samples_per_client: int = 200,
    concentration: float = None,
    size_ratio: float = None,
) -> np.ndarray:
    """Default (client x attribute) count matrix for a heterogeneity setting.

    Client i mixes a uniform attribute histogram with a block concentrated
    on its own attributes; the blend factor and the client size taper grow
    with the setting severity. ``unbalanced`` keeps every attribute present
    on every client but tapers counts along both axes.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    if shift_kind not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift_kind {shift_kind!r}")
    n, a = client_count, attribute_arity
    if n < 1 or a < 1 or samples_per_client < 1:
        raise ConfigError("client_count, attribute_arity and samples_per_client must be >= 1")
    alpha = _CONCENTRATION[setting] if concentration is None else float(concentration)
    ratio = _SIZE_RATIO[setting] if size_ratio is None else float(size_ratio)
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError("concentration must lie in [0, 1]")
    if ratio < 1.0:
        raise ConfigError("size_ratio must be >= 1")

    row_w = ratio ** (-np.arange(n) / max(n - 1, 1))
    totals = _largest_remainder(n * samples_per_client, row_w)
    cells = np.zeros((n, a), dtype=np.int64)
    if shift_kind == "unbalanced":
        col_w = ratio ** (-np.arange(a) / max(a - 1, 1))
        for i in range(n):
            cells[i] = _largest_remainder(int(totals[i]), col_w)
        return cells
    for i in range(n):
        pattern = np.full(a, (1.0 - alpha) / a)
        block = _block_attrs(i, n, a)
        for k in block:
            pattern[k] += alpha / len(block)
        cells[i] = _largest_remainder(int(totals[i]), pattern)
    return cells


def cells_for_available(
    setting: str,
    shift_kind: str,
    client_count: int,
    available: np.ndarray,
    concentration: float = None,
    size_ratio: float = None,
) -> np.ndarray:
    """Count matrix that spends exactly the available per-attribute totals.

    Used to partition real pooled data: each attribute column is split
    across clients following the same blend of uniform share and block
    ownership as ``default_cells``.
    """
    avail = np.asarray(available, dtype=np.int64)
    a = avail.size
    n = client_count
    alpha = _CONCENTRATION[setting] if concentration is None else float(concentration)
    ratio = _SIZE_RATIO[setting] if size_ratio is None else float(size_ratio)
    row_w = ratio ** (-np.arange(n) / max(n - 1, 1))
    owners = [_block_attrs(i, n, a) for i in range(n)]
    cells = np.zeros((n, a), dtype=np.int64)
    for k in range(a):
        own = np.array([1.0 if k in owners[i] else 0.0 for i in range(n)])
        if own.sum() > 0:
            own_w = row_w * own
            own_w = own_w / own_w.sum()
        else:
            own_w = row_w / row_w.sum()
        share = (1.0 - alpha) * row_w / row_w.sum() + alpha * own_w
        cells[:, k] = _largest_remainder(int(avail[k]), share)
    return cells


# ============================================================================
# synthetic generators
# ============================================================================


def _class_means(class_count: int, feature_dim: int, mean_scale: float,
                 scale_variation: float) -> np.ndarray:
    radii = np.full(class_count, mean_scale)
    if class_count > 1 and scale_variation > 0.0:
        radii = mean_scale * (1.0 - scale_variation * np.arange(class_count) / (class_count - 1))
    means = np.zeros((class_count, feature_dim))
    for c in range(class_count):
        means[c, c % feature_dim] = radii[c]
    return means


def synth_label_shift(
    spec: PartitionSpec,
    seed: int,
    feature_dim: int = None,
    mean_scale: float = 2.0,
    scale_variation: float = 0.35,
    class_means: np.ndarray = None,
) -> FederatedDataset:
    """Label-shift data: the attribute is the class label itself.

    Features are unit-variance Gaussians around fixed per-class means; the
    per-cell counts come straight from the partition plan, so the label
    histogram of each client is exactly that client's row. Rows are laid out
    in ascending attribute blocks.
    """
    if spec.shift_kind != "label":
        raise ConfigError("synth_label_shift requires shift_kind = 'label'")
    a = spec.attribute_arity
    d = a if feature_dim is None else int(feature_dim)
    if d < 1:
        raise ConfigError("feature_dim must be >= 1")
    if class_means is not None:
        means = np.asarray(class_means, dtype=np.float64)
        if means.shape != (a, d):
            raise ConfigError(f"class_means must have shape ({a}, {d})")
    else:
        means = _class_means(a, d, mean_scale, scale_variation)
    clients = []
    for i in range(spec.client_count):
        stream = rng_stream(seed, 0, i, LANE_DATA)
        feats, labels = [], []
        for k in range(a):
            cnt = int(spec.samples_per_cell[i, k])
            if cnt == 0:
                continue
            feats.append(means[k] + stream.standard_normal((cnt, d)))
            labels.append(np.full(cnt, k, dtype=np.int64))
        if feats:
            f = np.concatenate(feats, axis=0)
            y = np.concatenate(labels)
        else:
            f = np.zeros((0, d))
            y = np.zeros(0, dtype=np.int64)
        clients.append(ClientData(i, f, y, y.copy()))
    return FederatedDataset(tuple(clients), a, d, a)


def synth_feature_shift(
    spec: PartitionSpec,
    seed: int,
    class_count: int = 3,
    feature_dim: int = None,
    mean_scale: float = 2.0,
    shift_scale: float = 1.0,
) -> FederatedDataset:
    """Feature-shift data: the attribute is a domain index.

    Every domain applies one fixed random in-plane rotation plus a mean
    offset to the shared class-conditional Gaussians; label marginals are
    uniform in every cell (up to count rounding). ``shift_scale`` = 0 makes
    every domain transform the identity, so domains become statistically
    identical.
    """
    if spec.shift_kind != "feature":
        raise ConfigError("synth_feature_shift requires shift_kind = 'feature'")
    a = spec.attribute_arity
    c = int(class_count)
    if c < 1:
        raise ConfigError("class_count must be >= 1")
    d = max(2, c) if feature_dim is None else int(feature_dim)
    if d < 2:
        raise ConfigError("feature_dim must be >= 2 for domain rotations")
    means = _class_means(c, d, mean_scale, 0.0)

    dom = rng_stream(seed, 0, DOMAIN_NODE, LANE_DATA)
    planes, angles, offsets = [], [], []
    for _ in range(a):
        planes.append(dom.choice(d, size=2, replace=False))
        angles.append(float(shift_scale) * (np.pi / 6.0) * dom.uniform(-1.0, 1.0))
        offsets.append(float(shift_scale) * dom.standard_normal(d))

    clients = []
    for i in range(spec.client_count):
        stream = rng_stream(seed, 0, i, LANE_DATA)
        feats, labels, attrs = [], [], []
        for k in range(a):
            cnt = int(spec.samples_per_cell[i, k])
            if cnt == 0:
                continue
            y = np.arange(cnt, dtype=np.int64) % c
            x = means[y] + stream.standard_normal((cnt, d))
            p, q = planes[k]
            cos_t, sin_t = np.cos(angles[k]), np.sin(angles[k])
            xp = cos_t * x[:, p] - sin_t * x[:, q]
            xq = sin_t * x[:, p] + cos_t * x[:, q]
            x[:, p], x[:, q] = xp, xq
            x += offsets[k]
            feats.append(x)
            labels.append(y)
            attrs.append(np.full(cnt, k, dtype=np.int64))
        if feats:
            f = np.concatenate(feats, axis=0)
            y = np.concatenate(labels)
            g = np.concatenate(attrs)
        else:
            f = np.zeros((0, d))
            y = np.zeros(0, dtype=np.int64)
            g = y.copy()
        clients.append(ClientData(i, f, y, g))
    return FederatedDataset(tuple(clients), a, d, c)


def make_two_group_quadratic_toy(
    seed: int,
    means=(-1.0, 1.0),
    samples_per_group: int = 60,
):
    """One client holding two 1-d Gaussian subgroups, squared-loss location
    model.

    Returns (dataset, model_spec). The per-group objective is exactly
    quadratic in the scalar parameter, so the minimax optimum is reachable
    by grid search. Keeping both groups on a single client makes group
    selection part of local SGD, where its noise averages out over steps.
    """
    xs, attrs = [], []
    for i, mu in enumerate(means):
        stream = rng_stream(seed, 0, i, LANE_DATA)
        xs.append(mu + stream.standard_normal((samples_per_group, 1)))
        attrs.append(np.full(samples_per_group, i, dtype=np.int64))
    x = np.vstack(xs)
    attr = np.concatenate(attrs)
    y = np.zeros(len(attr), dtype=np.int64)
    ds = FederatedDataset(
        (ClientData(0, x, y, attr),), len(means), 1, 1
    )
    return ds, ModelSpec("quadratic", 1, 1)


# ============================================================================
# delimited-file adapter
# ============================================================================

_ENCODINGS = ("numeric", "categorical")


@dataclass(frozen=True)
class TabularSchema:
    """Column roles for a delimited file.

    ``feature_columns`` is an ordered tuple of (name, encoding) pairs with
    encoding 'numeric' (z-scored) or 'categorical' (one-hot). The attribute
    id is the cross-product of the attribute column values. Attribute or
    label columns may double as features only when listed there explicitly.
    """

    feature_columns: tuple
    label_column: str
    attribute_columns: tuple

    def __post_init__(self):
        cols = tuple((str(n), str(e)) for n, e in self.feature_columns)
        if not cols:
            raise ConfigError("feature_columns must be non-empty")
        for name, enc in cols:
            if enc not in _ENCODINGS:
                raise ConfigError(f"unknown encoding {enc!r} for column {name!r}")
        object.__setattr__(self, "feature_columns", cols)
        object.__setattr__(self, "attribute_columns", tuple(str(c) for c in self.attribute_columns))
        if not self.label_column:
            raise ConfigError("label_column must be set")
        if not self.attribute_columns:
            raise ConfigError("attribute_columns must be non-empty")

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularSchema":
        if not isinstance(doc, dict):
            raise ConfigError("schema must be a JSON object")
        unknown = sorted(set(doc) - {"feature_columns", "label_column", "attribute_columns"})
        if unknown:
            raise ConfigError(f"unknown schema fields: {', '.join(unknown)}")
        try:
            feats = tuple((c["name"], c["encoding"]) for c in doc["feature_columns"])
            return cls(feats, doc["label_column"], tuple(doc["attribute_columns"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "feature_columns": [{"name": n, "encoding": e} for n, e in self.feature_columns],
            "label_column": self.label_column,
            "attribute_columns": list(self.attribute_columns),
        }


def load_tabular_csv(path, schema: TabularSchema) -> FederatedDataset:
    """Read a headered delimited file into a single pooled client.

    Numeric features are z-scored with whole-file statistics; categorical
    features are one-hot over the sorted distinct values, so the encoding
    does not depend on row order. Rows with unparseable or empty cells are
    rejected; more than 5% rejected rows is an error.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file, header required") from None
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    col_pos = {name: i for i, name in enumerate(header)}
    needed = [n for n, _ in schema.feature_columns]
    needed.append(schema.label_column)
    needed.extend(schema.attribute_columns)
    missing = sorted({n for n in needed if n not in col_pos})
    if missing:
        raise DataError(f"{path}: missing columns: {', '.join(missing)}")

    numeric_cols = [n for n, e in schema.feature_columns if e == "numeric"]
    kept = []
    rejected = 0
    for row in rows:
        if len(row) < len(header):
            rejected += 1
            continue
        ok = True
        parsed_num = {}
        for n in numeric_cols:
            cell = row[col_pos[n]].strip()
            try:
                parsed_num[n] = float(cell)
            except ValueError:
                ok = False
                break
            if not np.isfinite(parsed_num[n]):
                ok = False
                break
        if ok:
            for n in needed:
                if n in parsed_num:
                    continue
                if row[col_pos[n]].strip() == "":
                    ok = False
                    break
        if not ok:
            rejected += 1
            continue
        kept.append((row, parsed_num))
    total = len(rows)
    if total == 0:
        raise DataError(f"{path}: no data rows")
    if rejected > 0.05 * total:
        raise DataError(f"{path}: rejected {rejected} of {total} rows (limit 5%)")

    def column(name):
        return [row[col_pos[name]].strip() for row, _ in kept]

    blocks = []
    for name, enc in schema.feature_columns:
        if enc == "numeric":
            vals = np.array([pn[name] for _, pn in kept], dtype=np.float64)
            mu = vals.mean()
            sd = vals.std()
            blocks.append(((vals - mu) / sd if sd > 0.0 else np.zeros_like(vals))[:, None])
        else:
            raw = column(name)
            levels = sorted(set(raw))
            lut = {v: i for i, v in enumerate(levels)}
            onehot = np.zeros((len(raw), len(levels)))
            onehot[np.arange(len(raw)), [lut[v] for v in raw]] = 1.0
            blocks.append(onehot)
    features = np.concatenate(blocks, axis=1)

    raw_labels = column(schema.label_column)
    label_levels = sorted(set(raw_labels))
    label_lut = {v: i for i, v in enumerate(label_levels)}
    labels = np.array([label_lut[v] for v in raw_labels], dtype=np.int64)

    arities = []
    attr_parts = []
    for name in schema.attribute_columns:
        raw = column(name)
        levels = sorted(set(raw))
        lut = {v: i for i, v in enumerate(levels)}
        arities.append(len(levels))
        attr_parts.append(np.array([lut[v] for v in raw], dtype=np.int64))
    attrs = np.zeros(len(kept), dtype=np.int64)
    for part, arity in zip(attr_parts, arities):
        attrs = attrs * arity + part

    client = ClientData(0, features, labels, attrs)
    return FederatedDataset(
        (client,), int(np.prod(arities)), features.shape[1], len(label_levels)
    )


# ============================================================================
# partitioning and holdout
# ============================================================================


def partition(dataset: FederatedDataset, spec: PartitionSpec, seed: int) -> FederatedDataset:
    """Assign pooled samples to clients by per-(client, attribute) quotas.

    Samples of each attribute are shuffled once with a seeded stream and
    dealt out without replacement. A quota that exceeds the remaining
    samples of its attribute is an error naming the infeasible cell; quotas
    smaller than the pool simply leave the remainder unassigned.
    """
    if len(dataset.clients) != 1:
        raise DataError("partition expects a single pooled client")
    if spec.attribute_arity != dataset.attribute_arity:
        raise DataError(
            f"spec arity {spec.attribute_arity} != dataset arity {dataset.attribute_arity}"
        )
    pool = dataset.clients[0]
    stream = rng_stream(seed, 0, SERVER_NODE, LANE_SPLIT)
    assigned = [[] for _ in range(spec.client_count)]
    for k in range(spec.attribute_arity):
        rows = np.nonzero(pool.attributes == k)[0]
        perm = stream.permutation(rows.size)
        shuffled = rows[perm]
        cursor = 0
        for i in range(spec.client_count):
            quota = int(spec.samples_per_cell[i, k])
            if cursor + quota > shuffled.size:
                raise DataError(
                    f"infeasible cell (client {i}, attribute {k}): "
                    f"requested {quota}, only {shuffled.size - cursor} available"
                )
            assigned[i].append(shuffled[cursor : cursor + quota])
            cursor += quota
    clients = []
    for i in range(spec.client_count):
        rows = np.concatenate(assigned[i]) if assigned[i] else np.zeros(0, dtype=np.int64)
        clients.append(
            ClientData(i, pool.features[rows], pool.labels[rows], pool.attributes[rows])
        )
    return FederatedDataset(
        tuple(clients), dataset.attribute_arity, dataset.feature_dim, dataset.class_count
    )


def split_holdout(dataset: FederatedDataset, fraction: float, seed: int):
    """Seeded per-subgroup holdout split; returns (train, test).

    Each subgroup donates round(fraction * size) rows to the test side but
    always keeps at least one training row. Row order within each client is
    attribute-major with ascending original positions.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError("holdout fraction must lie in (0, 1)")
    train_clients, test_clients = [], []
    for c in dataset.clients:
        stream = rng_stream(seed, 0, c.client_id, LANE_SPLIT)
        tr_rows, te_rows = [], []
        for a in np.unique(c.attributes):
            rows = np.nonzero(c.attributes == a)[0]
            perm = stream.permutation(rows.size)
            h = int(round(fraction * rows.size))
            h = min(h, rows.size - 1)
            te_rows.append(np.sort(rows[perm[:h]]))
            tr_rows.append(np.sort(rows[perm[h:]]))
        tr = np.concatenate(tr_rows) if tr_rows else np.zeros(0, dtype=np.int64)
        te = np.concatenate(te_rows) if te_rows else np.zeros(0, dtype=np.int64)
        train_clients.append(ClientData(c.client_id, c.features[tr], c.labels[tr], c.attributes[tr]))
        test_clients.append(ClientData(c.client_id, c.features[te], c.labels[te], c.attributes[te]))
    meta = (dataset.attribute_arity, dataset.feature_dim, dataset.class_count)
    train = FederatedDataset(tuple(train_clients), *meta)
    if sum(c.n for c in test_clients) == 0:
        raise DataError("holdout produced an empty test side; groups are too small")
    test = FederatedDataset(tuple(test_clients), *meta)
    return train, test


# ============================================================================
# container persistence
# ============================================================================

_MAGIC = b"FFD1"
_VERSION = 1


def sidecar_path(path) -> Path:
    return Path(str(path) + ".groups.json")


def save_dataset(dataset: FederatedDataset, path) -> None:
    """Write the binary container plus a JSON sidecar with the group index.

    Layout (little-endian): magic 'FFD1', u32 version, u32 client count,
    u32 attribute arity, u32 feature dim, u32 class count; then per client
    u32 id, u64 row count, raw float64 features, raw int64 labels, raw
    int64 attributes.
    """
    path = Path(path)
    parts = [
        _MAGIC,
        struct.pack(
            "<IIIII",
            _VERSION,
            len(dataset.clients),
            dataset.attribute_arity,
            dataset.feature_dim,
            dataset.class_count,
        ),
    ]
    for c in dataset.clients:
        parts.append(struct.pack("<IQ", c.client_id, c.n))
        parts.append(np.ascontiguousarray(c.features, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(c.labels, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(c.attributes, dtype="<i8").tobytes())
    path.write_bytes(b"".join(parts))

    index = build_group_index(dataset)
    doc = {
        "format_version": _VERSION,
        "n": int(index.total_size),
        "M": index.M,
        "client_count": len(dataset.clients),
        "attribute_arity": dataset.attribute_arity,
        "per_client_counts": {str(k): v for k, v in sorted(index.per_client_counts.items())},
        "entries": [
            {"client": e.client_id, "attribute": e.attribute_id, "size": e.size}
            for e in index.entries
        ],
        "digest": index.digest(),
    }
    sidecar_path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_dataset(path) -> FederatedDataset:
    """Read a container written by ``save_dataset``; verifies the sidecar
    when present."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic, not a dataset container")
    try:
        version, n_clients, arity, dim, classes = struct.unpack_from("<IIIII", blob, 4)
        if version != _VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        off = 24
        clients = []
        for _ in range(n_clients):
            cid, n = struct.unpack_from("<IQ", blob, off)
            off += 12
            f_bytes = n * dim * 8
            feats = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
            off += f_bytes
            labels = np.frombuffer(blob, dtype="<i8", count=n, offset=off)
            off += n * 8
            attrs = np.frombuffer(blob, dtype="<i8", count=n, offset=off)
            off += n * 8
            clients.append(ClientData(int(cid), feats.copy(), labels.copy(), attrs.copy()))
        if off != len(blob):
            raise DataError(f"{path}: trailing bytes after the last client")
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt container: {exc}") from exc
    dataset = FederatedDataset(tuple(clients), arity, dim, classes)

    side = sidecar_path(path)
    if side.exists():
        doc = json.loads(side.read_text())
        index = build_group_index(dataset)
        want = [
            {"client": e.client_id, "attribute": e.attribute_id, "size": e.size}
            for e in index.entries
        ]
        if doc.get("entries") != want or doc.get("digest") != index.digest():
            raise DataError(f"{side}: sidecar does not match the container contents")
    return dataset
