"""Federated min-max training loop.

One round follows the sampled saddle-point scheme: the server draws K
participants i.i.d. with replacement proportional to the current client
weight marginals, each participant runs E local SGD steps (every step picks
one of its subgroups by conditional weight, then a uniform minibatch), the
server averages the returned parameters, applies parameter momentum, and
updates the group weight vector from subgroup losses evaluated at a randomly
chosen mid-round snapshot on a uniformly drawn client subset.

Algorithm variants:
  fedavg       frozen size-proportional weights, no weight update
  drfa_client  per-client weights, projected Euclidean ascent
  drfa_group   per-subgroup weights, projected Euclidean ascent
  fmda         per-subgroup weights, entropic mirror ascent
  fmda_m       fmda plus parameter extrapolation and weight mixing
  inda         per-sample weights via a KL-ball tilt, compressed to subgroups

All randomness flows through streams keyed by (seed, round, client, lane),
so results are bit-identical for any worker count.
"""

import concurrent.futures
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    LANE_EVAL,
    LANE_INIT,
    LANE_LOCAL,
    LANE_SERVER,
    SERVER_NODE,
    ClientData,
    ConfigError,
    DataError,
    FederatedDataset,
    GroupIndex,
    ModelParams,
    RoundRecord,
    RunConfig,
    RunTrace,
    SimplexWeights,
    build_group_index,
    params_digest,
    rng_stream,
)
from .metrics import group_losses_full, report_for
from .models import Batch, ModelSpec, grad_loss, per_sample_losses
from .simplexmath import (
    euclidean_step_projected,
    mirror_step_entropy_masked,
    momentum_params,
    momentum_weights,
    tilt_weights_kl,
)

__all__ = [
    "ServerState",
    "init_state",
    "sample_clients",
    "local_sgd",
    "aggregate",
    "group_losses",
    "run_round",
    "train",
    "evaluate_agnostic",
    "sampled_aggregate_gradient",
    "exact_weighted_gradient",
    "save_checkpoint",
    "load_checkpoint",
    "state_from_checkpoint",
    "worker_count",
    "CHECKPOINT_VERSION",
    "MAX_SAMPLE_WEIGHTS",
]

logger = logging.getLogger("fairfed")

CHECKPOINT_VERSION = 1
MAX_SAMPLE_WEIGHTS = 100_000  # inda keeps one weight per sample


@dataclass
class ServerState:
    """Mutable server-side state between rounds.

    ``lam`` always holds the per-subgroup weights aligned with the group
    index; drfa_client additionally keeps its per-client vector, and inda its
    per-sample loss estimates.
    """

    theta: ModelParams
    theta_tilde_prev: ModelParams
    lam: SimplexWeights
    round: int = 0
    client_lambda: Optional[SimplexWeights] = None
    sample_loss_estimates: Optional[np.ndarray] = None


def worker_count() -> int:
    """Worker cap from FAIRFED_THREADS; defaults to 1."""
    raw = os.environ.get("FAIRFED_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"FAIRFED_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("FAIRFED_THREADS must be >= 1")
    return value


def _initial_group_lambda(cfg: RunConfig, index: GroupIndex) -> SimplexWeights:
    if cfg.lambda_init == "uniform":
        return SimplexWeights(np.full(index.M, 1.0 / index.M))
    sizes = index.sizes.astype(np.float64)
    return SimplexWeights(sizes / sizes.sum())


def _initial_client_lambda(cfg: RunConfig, index: GroupIndex) -> SimplexWeights:
    ids = index.client_ids
    if cfg.lambda_init == "uniform":
        return SimplexWeights(np.full(len(ids), 1.0 / len(ids)))
    totals = np.array(
        [sum(e.size for e in index.entries if e.client_id == cid) for cid in ids],
        dtype=np.float64,
    )
    return SimplexWeights(totals / totals.sum())


def _expand_client_lambda(client_lam: SimplexWeights, index: GroupIndex) -> SimplexWeights:
    """Spread each client's weight over its subgroups proportional to size."""
    ids = index.client_ids
    pos = {cid: i for i, cid in enumerate(ids)}
    totals = {cid: 0 for cid in ids}
    for e in index.entries:
        totals[e.client_id] += e.size
    out = np.empty(index.M)
    for j, e in enumerate(index.entries):
        out[j] = client_lam.values[pos[e.client_id]] * e.size / totals[e.client_id]
    return SimplexWeights(out / out.sum())


def _sample_offsets(dataset: FederatedDataset) -> dict:
    """Start position of each client's rows in the flattened sample order."""
    offsets = {}
    pos = 0
    for c in dataset.clients:
        offsets[c.client_id] = pos
        pos += c.n
    return offsets


def init_state(
    cfg: RunConfig,
    data: FederatedDataset,
    index: GroupIndex,
    spec: ModelSpec,
) -> ServerState:
    theta0 = spec.init_params(rng_stream(cfg.seed, 0, SERVER_NODE, LANE_INIT))
    lam0 = _initial_group_lambda(cfg, index)
    state = ServerState(theta=theta0, theta_tilde_prev=theta0, lam=lam0, round=0)
    if cfg.algorithm == "drfa_client":
        state.client_lambda = _initial_client_lambda(cfg, index)
        state.lam = _expand_client_lambda(state.client_lambda, index)
    if cfg.algorithm == "inda":
        if data.n > MAX_SAMPLE_WEIGHTS:
            raise ConfigError(
                f"inda keeps per-sample weights; {data.n} samples exceed the "
                f"{MAX_SAMPLE_WEIGHTS} limit"
            )
        state.sample_loss_estimates = _full_sample_losses(theta0, data, spec)
    return state


def _full_sample_losses(theta: ModelParams, data: FederatedDataset, spec: ModelSpec) -> np.ndarray:
    parts = [
        per_sample_losses(theta, c.features, c.labels, spec) if c.n else np.zeros(0)
        for c in data.clients
    ]
    return np.concatenate(parts)


# ============================================================================
# round building blocks
# ============================================================================


def sample_clients(lam: SimplexWeights, index: GroupIndex, K: int, stream) -> list:
    """Draw K client ids i.i.d. with replacement, proportional to the
    per-client marginals of the subgroup weights."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ids = index.client_ids
    marg = index.client_marginals(lam.values)
    probs = np.array([marg[cid] for cid in ids], dtype=np.float64)
    total = probs.sum()
    if total <= 0.0:
        raise ValueError("all client marginals are zero")
    draws = stream.choice(len(ids), size=K, replace=True, p=probs / total)
    return [ids[i] for i in draws]


def _step_gradient(
    vec: np.ndarray,
    client: ClientData,
    groups,
    weights: np.ndarray,
    batch_size: int,
    stream,
    spec: ModelSpec,
) -> np.ndarray:
    """Gradient of one local iteration: pick a subgroup by conditional
    weight, then a uniform minibatch from it."""
    slot = int(stream.choice(len(groups), p=weights)) if len(groups) > 1 else 0
    e = groups[slot]
    if e.size <= batch_size:
        rows = e.indices
    else:
        rows = e.indices[stream.choice(e.size, size=batch_size, replace=False)]
    batch = Batch(client.features[rows], client.labels[rows])
    return grad_loss(ModelParams(vec), batch, spec)


def local_sgd(
    theta: ModelParams,
    client: ClientData,
    groups,
    group_weights,
    E: int,
    eta: float,
    batch_size: int,
    stream,
    spec: ModelSpec,
    snapshot_step: Optional[int] = None,
):
    """E local SGD steps; returns (final params, snapshot after
    ``snapshot_step`` steps or None)."""
    if E < 0:
        raise ValueError("E must be >= 0")
    if eta < 0.0 or not np.isfinite(eta):
        raise ValueError("eta must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if client.n == 0:
        raise ValueError(f"client {client.client_id} has no data")
    if snapshot_step is not None and not (1 <= snapshot_step <= E):
        raise ValueError("snapshot_step must lie in [1, E]")
    w = np.asarray(group_weights, dtype=np.float64)
    if w.shape != (len(groups),) or w.min() < 0.0 or w.sum() <= 0.0:
        raise ValueError("group weights must be non-negative with positive sum")
    w = w / w.sum()
    vec = theta.values.copy()
    snap = None
    for t in range(1, E + 1):
        vec -= eta * _step_gradient(vec, client, groups, w, batch_size, stream, spec)
        if t == snapshot_step:
            snap = vec.copy()
    return ModelParams(vec), (ModelParams(snap) if snap is not None else None)


def aggregate(models) -> ModelParams:
    """Coordinate-wise mean with a canonical reduction order.

    Vectors are summed in ascending byte order of their contents, so any
    permutation of the input list produces the bit-identical mean.
    """
    models = list(models)
    if not models:
        raise ValueError("nothing to aggregate")
    length = len(models[0])
    if any(len(m) != length for m in models):
        raise ValueError("parameter vectors must have equal length")
    order = sorted(range(len(models)), key=lambda i: models[i].values.tobytes())
    acc = np.zeros(length)
    for i in order:
        acc = acc + models[i].values
    return ModelParams(acc / len(models))


def _eval_group_losses(
    theta: ModelParams,
    index: GroupIndex,
    dataset: FederatedDataset,
    loss_batch: int,
    stream,
    eval_clients,
    spec: ModelSpec,
):
    """Minibatch subgroup losses over the evaluated clients.

    Returns (v, mask, details); v holds zeros at unevaluated entries,
    details carries (slot, rows, per-sample losses) for the evaluated ones.
    """
    v = np.zeros(index.M)
    mask = np.zeros(index.M, dtype=bool)
    details = []
    eval_set = set(eval_clients)
    for j, e in enumerate(index.entries):
        if e.client_id not in eval_set:
            continue
        c = dataset.client(e.client_id)
        if e.size <= loss_batch:
            rows = e.indices
        else:
            rows = e.indices[stream.choice(e.size, size=loss_batch, replace=False)]
        losses = per_sample_losses(theta, c.features[rows], c.labels[rows], spec)
        v[j] = float(losses.mean())
        mask[j] = True
        details.append((j, rows, losses))
    return v, mask, details


def group_losses(
    theta: ModelParams,
    index: GroupIndex,
    dataset: FederatedDataset,
    loss_batch: int,
    stream,
    spec: ModelSpec,
    clients=None,
):
    """Public wrapper: (v, mask) over all or a subset of clients."""
    if loss_batch < 1:
        raise ValueError("loss_batch must be >= 1")
    eval_clients = dataset.client_ids if clients is None else clients
    v, mask, _ = _eval_group_losses(theta, index, dataset, loss_batch, stream, eval_clients, spec)
    return v, mask


# ============================================================================
# one round
# ============================================================================


def _conditional_weights(lam_values: np.ndarray, slots) -> np.ndarray:
    w = lam_values[list(slots)]
    return w / w.sum()


def _size_weights(index: GroupIndex, slots) -> np.ndarray:
    sizes = np.array([index.entries[j].size for j in slots], dtype=np.float64)
    return sizes / sizes.sum()


def run_round(
    state: ServerState,
    cfg: RunConfig,
    data: FederatedDataset,
    index: GroupIndex,
    spec: ModelSpec,
    threads: int = 1,
):
    """Advance one round; returns (next_state, info dict).

    info holds the sampled loss vector ``v`` with its mask, the participant
    list, and the pre-momentum aggregate for diagnostics.
    """
    alg = cfg.algorithm
    r = state.round
    server = rng_stream(cfg.seed, r, SERVER_NODE, LANE_SERVER)

    if alg == "drfa_client":
        ids = index.client_ids
        probs = state.client_lambda.values
        total = probs.sum()
        draws = server.choice(len(ids), size=cfg.K, replace=True, p=probs / total)
        participants = [ids[i] for i in draws]
    else:
        participants = sample_clients(state.lam, index, cfg.K, server)
    t_prime = int(server.integers(1, cfg.E + 1))

    slots_by_client = {cid: index.slots_for_client(cid) for cid in set(participants)}

    def local_weights(cid):
        slots = slots_by_client[cid]
        if alg in ("fedavg", "drfa_client"):
            return _size_weights(index, slots)
        return _conditional_weights(state.lam.values, slots)

    def run_client(cid):
        stream = rng_stream(cfg.seed, r, cid, LANE_LOCAL)
        slots = slots_by_client[cid]
        groups = [index.entries[j] for j in slots]
        return local_sgd(
            state.theta,
            data.client(cid),
            groups,
            local_weights(cid),
            cfg.E,
            cfg.eta,
            cfg.batch_size,
            stream,
            spec,
            snapshot_step=t_prime,
        )

    unique = sorted(set(participants))
    if threads > 1 and len(unique) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(unique, pool.map(run_client, unique)))
    else:
        results = {cid: run_client(cid) for cid in unique}

    ordered = sorted(participants)
    theta_tilde = aggregate([results[cid][0] for cid in ordered])
    snap_agg = aggregate([results[cid][1] for cid in ordered])

    beta_theta = cfg.beta_theta if alg in ("fmda_m", "inda") else 0.0
    theta_next = momentum_params(theta_tilde, state.theta_tilde_prev, beta_theta)

    v = np.zeros(index.M)
    mask = np.zeros(index.M, dtype=bool)
    lam_next = state.lam
    client_lambda_next = state.client_lambda
    loss_est_next = state.sample_loss_estimates

    if alg != "fedavg":
        all_ids = data.client_ids
        picks = server.choice(len(all_ids), size=cfg.K, replace=False)
        eval_ids = [all_ids[i] for i in picks]
        eval_stream = rng_stream(cfg.seed, r, SERVER_NODE, LANE_EVAL)
        v, mask, details = _eval_group_losses(
            snap_agg, index, data, cfg.loss_batch, eval_stream, eval_ids, spec
        )
        step = cfg.gamma * cfg.E
        if step == 0.0 and alg != "inda":
            pass  # zero stepsize leaves every weight exactly in place
        elif alg in ("fmda", "fmda_m"):
            tilde = mirror_step_entropy_masked(state.lam, v, step, mask).weights
            mixing = 1.0 if alg == "fmda" else 1.0 - cfg.beta_lambda
            lam_next = momentum_weights(state.lam, tilde, mixing)
        elif alg == "drfa_group":
            lam_next = euclidean_step_projected(state.lam, v, step)
        elif alg == "drfa_client":
            ids = index.client_ids
            v_c = np.zeros(len(ids))
            for i, cid in enumerate(ids):
                slots = index.slots_for_client(cid)
                if not mask[list(slots)].all():
                    continue
                sizes = np.array([index.entries[j].size for j in slots], dtype=np.float64)
                v_c[i] = float(v[list(slots)] @ (sizes / sizes.sum()))
            client_lambda_next = euclidean_step_projected(state.client_lambda, v_c, step)
            lam_next = _expand_client_lambda(client_lambda_next, index)
        elif alg == "inda":
            loss_est_next = state.sample_loss_estimates.copy()
            offsets = _sample_offsets(data)
            for slot, rows, losses in details:
                e = index.entries[slot]
                loss_est_next[offsets[e.client_id] + rows] = losses
            n = loss_est_next.size
            base = SimplexWeights(np.full(n, 1.0 / n))
            w = tilt_weights_kl(base, loss_est_next, cfg.ind_radius)
            tilt_group = np.zeros(index.M)
            for j, e in enumerate(index.entries):
                tilt_group[j] = float(w.values[offsets[e.client_id] + e.indices].sum())
            tilde = SimplexWeights(tilt_group / tilt_group.sum())
            lam_next = momentum_weights(state.lam, tilde, 1.0 - cfg.beta_lambda)

    next_state = ServerState(
        theta=theta_next,
        theta_tilde_prev=theta_tilde,
        lam=lam_next,
        round=r + 1,
        client_lambda=client_lambda_next,
        sample_loss_estimates=loss_est_next,
    )
    info = {
        "participants": participants,
        "t_prime": t_prime,
        "theta_start": state.theta,
        "theta_tilde": theta_tilde,
        "v": v,
        "mask": mask,
    }
    return next_state, info


# ============================================================================
# full runs
# ============================================================================


def train(
    cfg: RunConfig,
    data: FederatedDataset,
    spec: Optional[ModelSpec] = None,
    eval_data: Optional[FederatedDataset] = None,
    metrics_every: int = 1,
    collect_theta: bool = False,
    threads: Optional[int] = None,
) -> RunTrace:
    """Run R rounds and return the trace.

    Metrics (attribute- and client-level reports plus the max full-batch
    subgroup loss) are computed on ``eval_data`` when given, otherwise on the
    training data, every ``metrics_every`` rounds (0 disables them).
    """
    if spec is None:
        spec = ModelSpec("linear", data.feature_dim, data.class_count)
    if spec.kind != "quadratic":
        if spec.feature_dim != data.feature_dim or spec.class_count != data.class_count:
            raise ConfigError(
                f"model spec ({spec.feature_dim}, {spec.class_count}) does not match "
                f"dataset ({data.feature_dim}, {data.class_count})"
            )
    cfg.validate_for(data)
    if threads is None:
        threads = worker_count()
    index = build_group_index(data)
    state = init_state(cfg, data, index, spec)
    return _train_loop(
        cfg, data, index, spec, state, eval_data, metrics_every, collect_theta, threads
    )


def _train_loop(cfg, data, index, spec, state, eval_data, metrics_every, collect_theta, threads):
    trace = RunTrace(config=cfg)
    if collect_theta:
        trace.theta_history = []
    eval_ds = eval_data if eval_data is not None else data
    eval_index = build_group_index(eval_ds) if metrics_every else None
    warned = False
    can_score = spec.kind != "quadratic"
    for r in range(state.round, cfg.R):
        state, info = run_round(state, cfg, data, index, spec, threads=threads)
        record = RoundRecord(
            round_index=r,
            theta_digest=params_digest(state.theta),
            lambda_weights=state.lam.values.copy(),
            group_losses=info["v"],
            loss_mask=info["mask"],
        )
        due = metrics_every and ((r + 1) % metrics_every == 0 or r + 1 == cfg.R)
        if due and can_score:
            record.metrics_attribute = report_for(state.theta, eval_ds, spec, "attribute")
            record.metrics_client = report_for(state.theta, eval_ds, spec, "client")
            record.max_group_loss = float(
                group_losses_full(state.theta, eval_ds, eval_index, spec).max()
            )
        if not warned and state.lam.values.max() > 0.99:
            logger.warning(
                "round %d: a single subgroup holds %.4f of the weight mass",
                r,
                float(state.lam.values.max()),
            )
            warned = True
        if collect_theta:
            trace.theta_history.append(
                (
                    info["theta_start"].values.copy(),
                    info["theta_tilde"].values.copy(),
                    state.theta.values.copy(),
                )
            )
        trace.records.append(record)
    trace.final_theta = state.theta
    trace.final_lambda = state.lam
    return trace


def evaluate_agnostic(theta: ModelParams, settings, spec: ModelSpec) -> list:
    """Client-level reports for datasets whose clients never trained."""
    return [report_for(theta, ds, spec, "agnostic") for ds in settings]


# ============================================================================
# unbiasedness probes
# ============================================================================


def sampled_aggregate_gradient(
    theta: ModelParams,
    lam: SimplexWeights,
    data: FederatedDataset,
    index: GroupIndex,
    K: int,
    batch_size: int,
    stream,
    spec: ModelSpec,
) -> np.ndarray:
    """One draw of the round's aggregate gradient estimator.

    K clients ~ marginals with replacement; each picks one subgroup by
    conditional weight and one uniform minibatch. The mean over the K
    minibatch gradients is an unbiased estimate of the weight-averaged full
    gradient.
    """
    participants = sample_clients(lam, index, K, stream)
    acc = np.zeros(len(theta))
    for cid in participants:
        slots = index.slots_for_client(cid)
        groups = [index.entries[j] for j in slots]
        w = _conditional_weights(lam.values, slots)
        acc += _step_gradient(theta.values, data.client(cid), groups, w, batch_size, stream, spec)
    return acc / len(participants)


def exact_weighted_gradient(
    theta: ModelParams,
    lam: SimplexWeights,
    data: FederatedDataset,
    index: GroupIndex,
    spec: ModelSpec,
) -> np.ndarray:
    """Weight-averaged full-batch gradient over every subgroup."""
    acc = np.zeros(len(theta))
    for j, e in enumerate(index.entries):
        if lam.values[j] == 0.0:
            continue
        c = data.client(e.client_id)
        batch = Batch(c.features[e.indices], c.labels[e.indices])
        acc += lam.values[j] * grad_loss(theta, batch, spec)
    return acc


# ============================================================================
# checkpoints
# ============================================================================


def save_checkpoint(path, cfg: RunConfig, state: ServerState, index: GroupIndex) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "algorithm": cfg.algorithm,
        "round": state.round,
        "theta": [float(x) for x in state.theta.values],
        "lambda": [float(x) for x in state.lam.values],
        "group_index_digest": index.digest(),
        "config_digest": cfg.digest(),
        "rng_key": cfg.seed,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    required = {
        "format_version",
        "algorithm",
        "round",
        "theta",
        "lambda",
        "group_index_digest",
        "config_digest",
        "rng_key",
    }
    missing = sorted(required - set(doc))
    if missing:
        raise DataError(f"{path}: checkpoint missing fields: {', '.join(missing)}")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc['format_version']}")
    return doc


def state_from_checkpoint(doc: dict, cfg: RunConfig, index: GroupIndex) -> ServerState:
    """Rebuild server state; refuses to resume when digests do not match.

    The parameter momentum buffer restarts at the stored parameters, and
    inda's per-sample loss estimates are recomputed by the caller.
    """
    if doc["config_digest"] != cfg.digest():
        raise ConfigError("checkpoint was written under a different run config")
    if doc["group_index_digest"] != index.digest():
        raise DataError("checkpoint group index digest does not match the dataset")
    if doc["algorithm"] != cfg.algorithm:
        raise ConfigError("checkpoint algorithm does not match the run config")
    theta = ModelParams(np.asarray(doc["theta"], dtype=np.float64))
    lam = SimplexWeights(np.asarray(doc["lambda"], dtype=np.float64))
    if len(lam) != index.M:
        raise DataError("checkpoint weight vector does not match the group index")
    state = ServerState(theta=theta, theta_tilde_prev=theta, lam=lam, round=int(doc["round"]))
    if cfg.algorithm == "drfa_client":
        marg = index.client_marginals(lam.values)
        state.client_lambda = SimplexWeights.normalize(
            np.array([marg[cid] for cid in index.client_ids])
        )
    return state


def resume_train(
    cfg: RunConfig,
    data: FederatedDataset,
    checkpoint: dict,
    spec: Optional[ModelSpec] = None,
    eval_data: Optional[FederatedDataset] = None,
    metrics_every: int = 1,
    threads: Optional[int] = None,
) -> RunTrace:
    """Continue a run from a checkpoint through round R - 1."""
    if spec is None:
        spec = ModelSpec("linear", data.feature_dim, data.class_count)
    cfg.validate_for(data)
    if threads is None:
        threads = worker_count()
    index = build_group_index(data)
    state = state_from_checkpoint(checkpoint, cfg, index)
    if state.round >= cfg.R:
        raise ConfigError(f"checkpoint round {state.round} is not below R={cfg.R}")
    if cfg.algorithm == "inda":
        state.sample_loss_estimates = _full_sample_losses(state.theta, data, spec)
    return _train_loop(cfg, data, index, spec, state, eval_data, metrics_every, False, threads)
