"""Fairness metrics, multi-level empirical risks, and executable checks for
the uncertainty-set identities and the convergence-rate behaviour.

Disparity is the population standard deviation of group accuracies around
their unweighted mean; Robustness is the worst group accuracy. The level
risks evaluate the same loss field under client-level, attribute-level and
unified (per-subgroup) worst-case mixtures.
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .core import FederatedDataset, GroupIndex, ModelParams
from .models import Batch, ModelSpec, accuracy as model_accuracy, grad_loss, loss as model_loss
from .simplexmath import project_simplex

__all__ = [
    "REPORT_LEVELS",
    "MetricsReport",
    "disparity",
    "robustness",
    "level_risks",
    "verify_theorem41",
    "fit_convergence_rate",
    "momentum_direction_diagnostic",
    "report_for",
    "group_losses_full",
    "saddle_duality_gap",
]

REPORT_LEVELS = ("attribute", "client", "agnostic")


def disparity(accuracies) -> float:
    """Population standard deviation of group accuracies: the square root of
    the mean squared deviation from the unweighted mean."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.ndim != 1 or a.size == 0 or not np.all(np.isfinite(a)):
        raise ValueError("accuracies must be a non-empty finite vector")
    if np.all(a == a[0]):
        # the float mean of a constant vector can be off by an ulp
        return 0.0
    return float(np.sqrt(np.mean((a - a.mean()) ** 2)))


def robustness(accuracies) -> float:
    """Worst-case (minimum) group accuracy."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.ndim != 1 or a.size == 0 or not np.all(np.isfinite(a)):
        raise ValueError("accuracies must be a non-empty finite vector")
    return float(a.min())


@dataclass(frozen=True)
class MetricsReport:
    """Per-group accuracies and losses at one evaluation level, plus the
    derived scalars."""

    level: str
    group_ids: tuple
    group_accuracies: np.ndarray
    group_losses: np.ndarray
    avg_acc: float
    disparity: float
    robustness: float

    def __post_init__(self):
        if self.level not in REPORT_LEVELS:
            raise ValueError(f"unknown report level {self.level!r}")
        accs = np.asarray(self.group_accuracies, dtype=np.float64)
        losses = np.asarray(self.group_losses, dtype=np.float64)
        accs.setflags(write=False)
        losses.setflags(write=False)
        object.__setattr__(self, "group_accuracies", accs)
        object.__setattr__(self, "group_losses", losses)
        object.__setattr__(self, "group_ids", tuple(self.group_ids))
        if accs.shape != losses.shape or accs.shape != (len(self.group_ids),):
            raise ValueError("group arrays must align with group_ids")
        if accs.size and (accs.min() < 0.0 or accs.max() > 1.0):
            raise ValueError("accuracies must lie in [0, 1]")
        for got, want in (
            (self.avg_acc, float(accs.mean())),
            (self.disparity, disparity(accs)),
            (self.robustness, robustness(accs)),
        ):
            if abs(got - want) > 1e-12:
                raise ValueError("derived scalars are inconsistent with the accuracies")

    @classmethod
    def build(cls, level: str, group_ids, accuracies, losses) -> "MetricsReport":
        accs = np.asarray(accuracies, dtype=np.float64)
        return cls(
            level=level,
            group_ids=tuple(group_ids),
            group_accuracies=accs,
            group_losses=np.asarray(losses, dtype=np.float64),
            avg_acc=float(accs.mean()),
            disparity=disparity(accs),
            robustness=robustness(accs),
        )

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "group_ids": list(self.group_ids),
            "group_accuracies": [float(a) for a in self.group_accuracies],
            "group_losses": [float(l) for l in self.group_losses],
            "avg_acc": self.avg_acc,
            "disparity": self.disparity,
            "robustness": self.robustness,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(
            level=doc["level"],
            group_ids=tuple(doc["group_ids"]),
            group_accuracies=np.asarray(doc["group_accuracies"], dtype=np.float64),
            group_losses=np.asarray(doc["group_losses"], dtype=np.float64),
            avg_acc=float(doc["avg_acc"]),
            disparity=float(doc["disparity"]),
            robustness=float(doc["robustness"]),
        )


def level_risks(group_losses, index: GroupIndex):
    """Worst-case risks at the three levels for one per-subgroup loss field.

    Returns (client_risk, attribute_risk, unified_risk). The unified risk is
    the maximum subgroup loss. The client risk maximizes over clients of the
    size-weighted mean of their subgroup losses; the attribute risk does the
    same over attribute values pooled across clients. Mixtures are evaluated
    in exact rational arithmetic so the ordering
    client <= unified and attribute <= unified holds without tolerance.
    """
    f = np.asarray(group_losses, dtype=np.float64)
    if f.shape != (index.M,):
        raise ValueError("loss vector must align with the group index")
    if not np.all(np.isfinite(f)):
        raise ValueError("losses must be finite")
    unified = float(f.max())

    by_client: dict = {}
    by_attr: dict = {}
    for j, e in enumerate(index.entries):
        by_client.setdefault(e.client_id, []).append(j)
        by_attr.setdefault(e.attribute_id, []).append(j)

    def mix(slots) -> float:
        total = sum(index.entries[j].size for j in slots)
        acc = Fraction(0)
        for j in slots:
            acc += Fraction(index.entries[j].size) * Fraction(f[j])
        return float(acc / Fraction(total))

    client_risk = max(mix(slots) for slots in by_client.values())
    attr_risk = max(mix(slots) for slots in by_attr.values())
    return client_risk, attr_risk, unified


def _simplex_grid(m: int, step: float) -> np.ndarray:
    """All simplex points whose coordinates are multiples of ``step``."""
    ticks = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    if m == 2:
        t = ticks
        return np.stack([t, 1.0 - t], axis=1)
    if m == 3:
        t1, t2 = np.meshgrid(ticks, ticks, indexing="ij")
        keep = t1 + t2 <= 1.0 + 1e-12
        t1, t2 = t1[keep], t2[keep]
        return np.stack([t1, t2, 1.0 - t1 - t2], axis=1)
    raise ValueError("dense grids only for 2 or 3 groups")


def _refine_cap_max(r: np.ndarray, rho: float, start: np.ndarray) -> float:
    """Fine local grid around ``start``, restricted to the ball cap."""
    m = r.size
    span, step = 2e-3, 1e-5
    if m == 2:
        t = np.arange(max(0.0, start[0] - span), min(1.0, start[0] + span) + step / 2, step)
        pts = np.stack([t, 1.0 - t], axis=1)
    else:
        a = np.arange(max(0.0, start[0] - span), min(1.0, start[0] + span) + step / 2, step)
        b = np.arange(max(0.0, start[1] - span), min(1.0, start[1] + span) + step / 2, step)
        aa, bb = np.meshgrid(a, b, indexing="ij")
        keep = aa + bb <= 1.0 + 1e-12
        aa, bb = aa[keep], bb[keep]
        pts = np.stack([aa, bb, 1.0 - aa - bb], axis=1)
    feas = np.linalg.norm(m * pts - 1.0, axis=1) <= rho + 1e-9
    if not feas.any():
        return -np.inf
    return float((pts[feas] @ r).max())


def _ball_cap_max(risks: np.ndarray, rho: float) -> float:
    """Max of <lam, risks> over the simplex intersected with the ball
    ||M lam - 1||_2 <= rho, by Dykstra-projected ascent (any M)."""
    m = risks.size
    center = np.full(m, 1.0 / m)
    radius = rho / m

    def project_cap(x: np.ndarray) -> np.ndarray:
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        y = x.copy()
        for _ in range(200):
            u = project_simplex(y + p).values
            p = y + p - u
            d = u + q - center
            nrm = np.linalg.norm(d)
            v = center + d * (radius / nrm) if nrm > radius else u + q
            q = u + q - v
            y = v
        return project_simplex(y).values

    x = center.copy()
    best = -np.inf
    s = 0.5
    for it in range(400):
        x = project_cap(x + s * risks)
        val = float(x @ risks)
        best = max(best, val)
        if it % 50 == 49:
            s *= 0.5
    return best


def verify_theorem41(risks, rho: float):
    """Check the closed form for the group-mixture worst case.

    Under the feasibility condition rho^2 <= min_i (sum_j d_j) / d_i with
    d_i = (R_i - mean)^2, the maximum of <lam, R> over the simplex
    intersected with ||M lam - 1||_2 <= rho equals
    mean + (rho / M) * sqrt(M * Var). Returns (lhs, rhs, ok) where lhs is a
    brute-force constrained maximization and ok tests agreement within 2e-3.
    Raises if the feasibility condition is violated.
    """
    r = np.asarray(risks, dtype=np.float64)
    if r.ndim != 1 or r.size < 1 or not np.all(np.isfinite(r)):
        raise ValueError("risks must be a non-empty finite vector")
    if rho < 0.0 or not np.isfinite(rho):
        raise ValueError("rho must be >= 0")
    m = r.size
    mean = float(r.mean())
    d = (r - mean) ** 2
    sumd = float(d.sum())
    if sumd > 0.0:
        limit = float(np.min(sumd / d[d > 0.0]))
        if rho ** 2 > limit * (1.0 + 1e-9):
            raise ValueError(
                f"feasibility condition violated: rho^2 = {rho ** 2:.6g} exceeds {limit:.6g}"
            )
    rhs = mean + (rho / m) * np.sqrt(sumd)

    if m <= 3 and m >= 2:
        grid = _simplex_grid(m, 1e-3)
        feas = np.linalg.norm(m * grid - 1.0, axis=1) <= rho + 1e-9
        if not feas.any():
            start = np.full(m, 1.0 / m)
            lhs = mean  # the barycenter is always in the ball
        else:
            vals = grid[feas] @ r
            best = int(np.argmax(vals))
            start = grid[feas][best]
            lhs = float(vals[best])
        lhs = max(lhs, _refine_cap_max(r, rho, start))
    elif m == 1:
        lhs = float(r[0])
    else:
        lhs = _ball_cap_max(r, rho)
    return lhs, float(rhs), bool(abs(lhs - rhs) <= 2e-3)


def fit_convergence_rate(gap_trace) -> float:
    """Least-squares slope of log(gap) against log(T).

    ``gap_trace`` is a sequence of (T, gap) pairs with positive entries.
    """
    pts = list(gap_trace)
    if len(pts) < 2:
        raise ValueError("need at least two (T, gap) points")
    t = np.array([p[0] for p in pts], dtype=np.float64)
    g = np.array([p[1] for p in pts], dtype=np.float64)
    if np.any(t <= 0.0) or np.any(g <= 0.0):
        raise ValueError("T values and gaps must be positive")
    return float(np.polyfit(np.log(t), np.log(g), 1)[0])


def momentum_direction_diagnostic(theta_trace, theta_final) -> np.ndarray:
    """Cosine alignment of round displacements with the direction to the
    final parameters.

    ``theta_trace`` holds per-round triples (theta_start, theta_aggregate,
    theta_next). For each round the first column is the cosine between
    (theta_start - theta_final) and the raw aggregated displacement
    (theta_start - theta_aggregate); the second column uses the
    momentum-modified displacement (theta_start - theta_next).
    """
    final = np.asarray(getattr(theta_final, "values", theta_final), dtype=np.float64)

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("zero-norm direction in the diagnostic")
        return float(a @ b / (na * nb))

    out = []
    for start, agg, nxt in theta_trace:
        start = np.asarray(getattr(start, "values", start), dtype=np.float64)
        agg = np.asarray(getattr(agg, "values", agg), dtype=np.float64)
        nxt = np.asarray(getattr(nxt, "values", nxt), dtype=np.float64)
        d_opt = start - final
        out.append((cos(d_opt, start - agg), cos(d_opt, start - nxt)))
    return np.array(out, dtype=np.float64)


# ============================================================================
# evaluation against datasets
# ============================================================================


def report_for(
    theta: ModelParams, dataset: FederatedDataset, spec: ModelSpec, level: str
) -> MetricsReport:
    """Full-batch MetricsReport at the requested level.

    attribute: groups are attribute values pooled across clients;
    client / agnostic: groups are the individual clients. Groups without
    samples are skipped.
    """
    if level not in REPORT_LEVELS:
        raise ValueError(f"unknown report level {level!r}")
    groups = []
    if level == "attribute":
        per_attr: dict = {}
        for c in dataset.clients:
            for a in np.unique(c.attributes):
                rows = c.attributes == a
                per_attr.setdefault(int(a), []).append(
                    (c.features[rows], c.labels[rows])
                )
        for a in sorted(per_attr):
            feats = np.concatenate([f for f, _ in per_attr[a]], axis=0)
            labs = np.concatenate([l for _, l in per_attr[a]], axis=0)
            groups.append((a, feats, labs))
    else:
        for c in dataset.clients:
            if c.n:
                groups.append((c.client_id, c.features, c.labels))
    if not groups:
        raise ValueError("dataset holds no evaluable groups")
    ids, accs, losses = [], [], []
    for gid, feats, labs in groups:
        batch = Batch(feats, labs)
        ids.append(gid)
        accs.append(model_accuracy(theta, batch, spec))
        losses.append(model_loss(theta, batch, spec))
    return MetricsReport.build(level, ids, accs, losses)


def group_losses_full(
    theta: ModelParams, dataset: FederatedDataset, index: GroupIndex, spec: ModelSpec
) -> np.ndarray:
    """Full-batch mean loss of every indexed subgroup, aligned with the index."""
    out = np.empty(index.M, dtype=np.float64)
    for j, e in enumerate(index.entries):
        c = dataset.client(e.client_id)
        batch = Batch(c.features[e.indices], c.labels[e.indices])
        out[j] = model_loss(theta, batch, spec)
    return out


def saddle_duality_gap(
    theta_bar: ModelParams,
    lambda_bar,
    dataset: FederatedDataset,
    index: GroupIndex,
    spec: ModelSpec,
    tol: float = 1e-8,
    max_iter: int = 200000,
) -> float:
    """Duality-gap proxy max_w F(theta_bar, w) - min_theta F(theta, lambda_bar).

    F(theta, w) is the w-weighted sum of full-batch subgroup losses. The max
    over the simplex is attained at a vertex, so it is the largest subgroup
    loss at theta_bar; the min is computed by gradient descent with Armijo
    backtracking down to gradient norm ``tol``.
    """
    lam = np.asarray(getattr(lambda_bar, "values", lambda_bar), dtype=np.float64)
    if lam.shape != (index.M,):
        raise ValueError("lambda_bar must align with the group index")
    upper = float(group_losses_full(theta_bar, dataset, index, spec).max())

    batches = []
    for e in index.entries:
        c = dataset.client(e.client_id)
        batches.append(Batch(c.features[e.indices], c.labels[e.indices]))

    def value_grad(vec: np.ndarray):
        p = ModelParams(vec)
        val = 0.0
        grad = np.zeros_like(vec)
        for w, b in zip(lam, batches):
            if w == 0.0:
                continue
            val += w * model_loss(p, b, spec)
            grad += w * grad_loss(p, b, spec)
        return val, grad

    x = theta_bar.values.copy()
    val, grad = value_grad(x)
    step = 1.0
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            break
        while step > 1e-18:
            cand = x - step * grad
            cval, cgrad = value_grad(cand)
            if cval <= val - 0.5 * step * gnorm ** 2:
                x, val, grad = cand, cval, cgrad
                step *= 1.5
                break
            step *= 0.5
        else:
            break
    return upper - val
