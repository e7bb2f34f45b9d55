"""Core domain types, keyed randomness, and run configuration.

The types here are immutable value objects shared by every other module.
Arrays are copied on construction and marked read-only so instances can be
handed across threads without defensive copies.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

__all__ = [
    "FairFedError",
    "ConfigError",
    "DataError",
    "LANE_LOCAL",
    "LANE_EVAL",
    "LANE_SERVER",
    "LANE_INIT",
    "LANE_DATA",
    "LANE_SPLIT",
    "SERVER_NODE",
    "DOMAIN_NODE",
    "rng_stream",
    "ClientData",
    "FederatedDataset",
    "GroupEntry",
    "GroupIndex",
    "build_group_index",
    "SimplexWeights",
    "ModelParams",
    "params_digest",
    "RunConfig",
    "RoundRecord",
    "RunTrace",
    "SIMPLEX_ATOL",
]


class FairFedError(Exception):
    """Base class for package-specific failures."""


class ConfigError(FairFedError):
    """Bad or inconsistent configuration input."""


class DataError(FairFedError):
    """Bad dataset file, schema mismatch, or infeasible partition."""


# ============================================================================
# keyed random streams
# ============================================================================

# Stream lanes keep logically distinct draw sequences from overlapping even
# when they share (seed, round, client).
LANE_LOCAL = 0   # client-side local SGD draws
LANE_EVAL = 1    # group-loss minibatch draws
LANE_SERVER = 2  # server-side sampling (participants, snapshot step)
LANE_INIT = 3    # parameter initialisation
LANE_DATA = 4    # synthetic data generation
LANE_SPLIT = 5   # partition / holdout shuffles

SERVER_NODE = 0xFFFFFFFF  # pseudo client id for server-side streams
DOMAIN_NODE = 0xFFFFFFFE  # pseudo client id for shared domain transforms

_MASK64 = (1 << 64) - 1


def rng_stream(seed: int, round_index: int, client: int, lane: int = LANE_LOCAL) -> Generator:
    """Deterministic random stream keyed by (seed, round, client, lane).

    Each key maps to an independent counter-based Philox stream, so the draw
    order of one stream can never perturb another regardless of scheduling or
    worker count.
    """
    if round_index < 0 or client < 0 or lane < 0:
        raise ValueError("round_index, client and lane must be non-negative")
    entropy = (int(seed) & _MASK64, int(round_index), int(client), int(lane))
    return Generator(Philox(SeedSequence(entropy)))


# ============================================================================
# datasets and group index
# ============================================================================


def _frozen_array(values: Any, dtype: Any, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClientData:
    """One client's local data; rows align across the three arrays."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        if self.client_id < 0:
            raise ValueError("client_id must be non-negative")
        object.__setattr__(self, "features", _frozen_array(self.features, np.float64, 2))
        object.__setattr__(self, "labels", _frozen_array(self.labels, np.int64, 1))
        object.__setattr__(self, "attributes", _frozen_array(self.attributes, np.int64, 1))
        n = self.features.shape[0]
        if self.labels.shape[0] != n or self.attributes.shape[0] != n:
            raise ValueError("features, labels and attributes must have equal length")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class FederatedDataset:
    """A fixed collection of clients plus the global arity/dimension metadata."""

    clients: tuple
    attribute_arity: int
    feature_dim: int
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if self.attribute_arity < 1 or self.feature_dim < 1 or self.class_count < 1:
            raise ValueError("attribute_arity, feature_dim and class_count must be >= 1")
        seen = set()
        total = 0
        for c in self.clients:
            if not isinstance(c, ClientData):
                raise TypeError("clients must be ClientData instances")
            if c.client_id in seen:
                raise ValueError(f"duplicate client id {c.client_id}")
            seen.add(c.client_id)
            if c.features.shape[1] != self.feature_dim:
                raise ValueError(
                    f"client {c.client_id}: feature width {c.features.shape[1]}"
                    f" != feature_dim {self.feature_dim}"
                )
            if c.n and (c.labels.min() < 0 or c.labels.max() >= self.class_count):
                raise ValueError(f"client {c.client_id}: label outside [0, class_count)")
            if c.n and (c.attributes.min() < 0 or c.attributes.max() >= self.attribute_arity):
                raise ValueError(f"client {c.client_id}: attribute outside [0, arity)")
            total += c.n
        if total == 0:
            raise ValueError("dataset holds no samples")

    @property
    def n(self) -> int:
        return sum(c.n for c in self.clients)

    @property
    def client_ids(self) -> tuple:
        return tuple(c.client_id for c in self.clients)

    def client(self, client_id: int) -> ClientData:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(f"no client with id {client_id}")


@dataclass(frozen=True)
class GroupEntry:
    """One non-empty (client, attribute) subgroup.

    ``indices`` holds the row positions of the subgroup inside the owning
    client's arrays, in ascending order.
    """

    client_id: int
    attribute_id: int
    size: int
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen_array(self.indices, np.int64, 1))
        if self.size < 1:
            raise ValueError("empty subgroups are excluded from the index")
        if self.indices.shape[0] != self.size:
            raise ValueError("size does not match the index array")


@dataclass(frozen=True)
class GroupIndex:
    """Flat index over every non-empty (client, attribute) subgroup.

    Entry order is the canonical one: clients in dataset order, attribute ids
    ascending within each client. Weight vectors over subgroups align with
    this order everywhere in the package.
    """

    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("group index is empty")

    @property
    def M(self) -> int:
        return len(self.entries)

    @property
    def total_size(self) -> int:
        return sum(e.size for e in self.entries)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([e.size for e in self.entries], dtype=np.int64)

    @property
    def client_ids(self) -> tuple:
        out = []
        for e in self.entries:
            if not out or out[-1] != e.client_id:
                out.append(e.client_id)
        return tuple(out)

    @property
    def per_client_counts(self) -> dict:
        counts: dict = {}
        for e in self.entries:
            counts[e.client_id] = counts.get(e.client_id, 0) + 1
        return counts

    def slots_for_client(self, client_id: int) -> tuple:
        return tuple(j for j, e in enumerate(self.entries) if e.client_id == client_id)

    def client_marginals(self, weights: np.ndarray) -> dict:
        """Sum subgroup weights per client id."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (self.M,):
            raise ValueError("weight vector does not match the index")
        out: dict = {}
        for j, e in enumerate(self.entries):
            out[e.client_id] = out.get(e.client_id, 0.0) + float(w[j])
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.client_id},{e.attribute_id},{e.size};".encode())
        return h.hexdigest()


def build_group_index(dataset: FederatedDataset) -> GroupIndex:
    """Index every non-empty subgroup; empty cells are skipped entirely."""
    entries = []
    for c in dataset.clients:
        for a in np.unique(c.attributes):
            rows = np.nonzero(c.attributes == a)[0]
            entries.append(GroupEntry(c.client_id, int(a), rows.size, rows))
    return GroupIndex(tuple(entries))


# ============================================================================
# weight and parameter vectors
# ============================================================================

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class SimplexWeights:
    """A point on the probability simplex (entries >= 0, sum within 1e-9 of 1)."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, np.float64, 1))
        v = self.values
        if v.size == 0:
            raise ValueError("weights must be non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("weights must be finite")
        if v.min() < 0.0:
            raise ValueError(f"negative weight {v.min()}")
        s = float(v.sum())
        if abs(s - 1.0) > SIMPLEX_ATOL:
            raise ValueError(f"weights sum to {s}, not 1")

    @classmethod
    def normalize(cls, values: Any) -> "SimplexWeights":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("expected a non-empty vector")
        if not np.all(np.isfinite(v)) or v.min() < 0.0:
            raise ValueError("expected a finite non-negative vector")
        s = v.sum()
        if s <= 0.0:
            raise ValueError("cannot normalize an all-zero vector")
        return cls(v / s)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ModelParams:
    """Flat real parameter vector of a model."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, np.float64, 1))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameters must be finite")

    def __len__(self) -> int:
        return self.values.size


def params_digest(params: ModelParams) -> str:
    """Hex digest of the raw parameter bytes, for traces and checkpoints."""
    return hashlib.sha256(np.ascontiguousarray(params.values).tobytes()).hexdigest()


# ============================================================================
# run configuration and trace
# ============================================================================

ALGORITHMS = ("fedavg", "drfa_client", "drfa_group", "fmda", "fmda_m", "inda")
LAMBDA_INITS = ("size_proportional", "uniform")

_CONFIG_FIELDS = (
    "algorithm",
    "E",
    "R",
    "K",
    "eta",
    "gamma",
    "beta_theta",
    "beta_lambda",
    "batch_size",
    "loss_batch",
    "ind_radius",
    "lambda_init",
    "seed",
)
_REQUIRED_FIELDS = ("algorithm", "R", "K", "seed")


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of a single training run.

    ``beta_theta`` and ``beta_lambda`` are momentum intensities in the
    zero-means-off convention: 0 disables the momentum term entirely and the
    update reduces to the plain aggregated / mirror step.
    """

    algorithm: str
    R: int
    K: int
    seed: int
    E: int = 10
    eta: float = 1e-2
    gamma: float = 1e-2
    beta_theta: float = 0.4
    beta_lambda: float = 0.4
    batch_size: int = 50
    loss_batch: int = 50
    ind_radius: float = 1.0
    lambda_init: str = "size_proportional"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.lambda_init not in LAMBDA_INITS:
            raise ConfigError(f"unknown lambda_init {self.lambda_init!r}")
        if self.E < 1:
            raise ConfigError("E must be >= 1")
        if self.R < 0:
            raise ConfigError("R must be >= 0")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not (self.eta >= 0.0 and np.isfinite(self.eta)):
            raise ConfigError("eta must be >= 0")
        if not (self.gamma >= 0.0 and np.isfinite(self.gamma)):
            raise ConfigError("gamma must be >= 0")
        if not (0.0 <= self.beta_theta < 1.0):
            raise ConfigError("beta_theta must lie in [0, 1)")
        if not (0.0 <= self.beta_lambda <= 1.0):
            raise ConfigError("beta_lambda must lie in [0, 1]")
        if self.batch_size < 1 or self.loss_batch < 1:
            raise ConfigError("batch_size and loss_batch must be >= 1")
        if self.ind_radius < 0.0 or not np.isfinite(self.ind_radius):
            raise ConfigError("ind_radius must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(doc) - set(_CONFIG_FIELDS))
        if unknown:
            raise ConfigError(f"unknown run config fields: {', '.join(unknown)}")
        missing = sorted(set(_REQUIRED_FIELDS) - set(doc))
        if missing:
            raise ConfigError(f"missing run config fields: {', '.join(missing)}")
        kwargs = {}
        for name in _CONFIG_FIELDS:
            if name not in doc:
                continue
            value = doc[name]
            if name in ("algorithm", "lambda_init"):
                if not isinstance(value, str):
                    raise ConfigError(f"{name} must be a string")
            elif name in ("E", "R", "K", "batch_size", "loss_batch", "seed"):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{name} must be an integer")
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{name} must be a number")
                value = float(value)
            kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _CONFIG_FIELDS}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def validate_for(self, dataset: FederatedDataset) -> None:
        if self.K > len(dataset.clients):
            raise ConfigError(
                f"K={self.K} exceeds the number of clients ({len(dataset.clients)})"
            )


@dataclass
class RoundRecord:
    """Per-round trace entry; ``group_losses`` is the sampled v vector with
    zeros at unevaluated entries and ``loss_mask`` marking which were seen."""

    round_index: int
    theta_digest: str
    lambda_weights: np.ndarray
    group_losses: np.ndarray
    loss_mask: np.ndarray
    metrics_attribute: Any = None
    metrics_client: Any = None
    max_group_loss: float = float("nan")


@dataclass
class RunTrace:
    """Ordered record of a full run, one entry per round."""

    config: RunConfig
    records: list = field(default_factory=list)
    final_theta: Optional[ModelParams] = None
    final_lambda: Optional[SimplexWeights] = None
    theta_history: Optional[list] = None
