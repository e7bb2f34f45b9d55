"""Built-in verification suite.

Each check recomputes a contract through an independent route (grids,
finite differences, exact arithmetic) and compares against the fast
implementation. ``run_suite`` returns one result per check; the CLI maps
any failure to exit code 4.

``fault="mirror_sign"`` flips the gradient sign inside the mirror-step
consistency check, which makes that check fail on purpose. It exists to
demonstrate that the suite actually detects broken updates.
"""

from dataclasses import dataclass
from fractions import Fraction
from itertools import product

import numpy as np

from .core import SimplexWeights, rng_stream, LANE_SERVER, SERVER_NODE
from .engine import aggregate
from .core import ModelParams
from .metrics import level_risks, verify_theorem41
from .models import Batch, ModelSpec, grad_loss, loss
from .simplexmath import (
    kl_divergence,
    mirror_step_entropy,
    mirror_step_entropy_masked,
    momentum_params,
    momentum_weights,
    project_simplex,
    solve_mirror_subproblem,
    tilt_weights_kl,
)

__all__ = ["CheckResult", "run_suite", "FAULTS"]

FAULTS = ("mirror_sign",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _projection_kkt_residual(v: np.ndarray, w: np.ndarray) -> float:
    active = w > 0.0
    diffs = v[active] - w[active]
    resid = float(diffs.max() - diffs.min()) if active.sum() > 1 else 0.0
    tau = float(diffs.max())
    if (~active).any():
        resid = max(resid, float((v[~active] - tau).max()), 0.0)
    resid = max(resid, abs(float(w.sum()) - 1.0))
    return resid


def _check_projection(stream) -> CheckResult:
    worst = 0.0
    for _ in range(200):
        m = int(stream.integers(2, 51))
        scale = float(10.0 ** stream.uniform(-2, 2))
        v = stream.normal(size=m) * scale
        w = project_simplex(v).values
        if w.min() < 0.0:
            return CheckResult("projection_kkt", False, f"negative coordinate {w.min():.3e}")
        worst = max(worst, _projection_kkt_residual(v, w))
    ok = worst < 1e-10
    return CheckResult("projection_kkt", ok, f"max KKT residual {worst:.3e}")


def _check_projection_grid(stream) -> CheckResult:
    """Projection objective must match a dense simplex grid search."""
    worst = 0.0
    step = 1e-2
    for _ in range(10):
        m = int(stream.integers(2, 4))
        v = stream.normal(size=m) * 2.0
        w = project_simplex(v).values
        best = np.inf
        ticks = int(round(1.0 / step))
        if m == 2:
            for a in range(ticks + 1):
                p = np.array([a * step, 1.0 - a * step])
                best = min(best, float(((p - v) ** 2).sum()))
        else:
            for a in range(ticks + 1):
                for b in range(ticks + 1 - a):
                    p = np.array([a * step, b * step, 1.0 - (a + b) * step])
                    best = min(best, float(((p - v) ** 2).sum()))
        worst = max(worst, float(((w - v) ** 2).sum()) - best)
    ok = worst <= 1e-4 + 1e-12
    return CheckResult("projection_vs_grid", ok, f"max objective excess {worst:.3e}")


def _check_mirror(stream, fault) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        m = int(stream.integers(2, 9))
        lam = SimplexWeights.normalize(stream.uniform(0.05, 1.0, size=m))
        g = stream.normal(size=m)
        step = float(stream.uniform(0.05, 1.0))
        g_fast = -g if fault == "mirror_sign" else g
        fast = mirror_step_entropy(lam, g_fast, step).weights.values
        ref = solve_mirror_subproblem(lam, g, step).values
        worst = max(worst, float(np.abs(fast - ref).max()))
    ok = worst <= 1e-7
    return CheckResult("mirror_vs_subproblem", ok, f"max Linf gap {worst:.3e}")


def _check_masked_mirror(stream) -> CheckResult:
    worst = 0.0
    for _ in range(50):
        m = int(stream.integers(2, 9))
        lam = SimplexWeights.normalize(stream.uniform(0.01, 1.0, size=m))
        g = stream.normal(size=m)
        step = float(stream.uniform(0.05, 1.0))
        full = mirror_step_entropy(lam, g, step).weights.values
        masked = mirror_step_entropy_masked(
            lam, g, step, np.ones(m, dtype=bool)
        ).weights.values
        worst = max(worst, float(np.abs(full - masked).max()))
        part = np.zeros(m, dtype=bool)
        part[: max(1, m // 2)] = True
        w = mirror_step_entropy_masked(lam, g, step, part).weights.values
        kept = float(w[~part].sum()) - float(lam.values[~part].sum())
        worst = max(worst, abs(kept))
    ok = worst == 0.0 or worst < 1e-12
    return CheckResult("masked_mirror", ok, f"max deviation {worst:.3e}")


def _check_momentum(stream) -> CheckResult:
    for _ in range(20):
        m = int(stream.integers(2, 9))
        prev = SimplexWeights.normalize(stream.uniform(0.01, 1.0, size=m))
        tilde = SimplexWeights.normalize(stream.uniform(0.01, 1.0, size=m))
        if not np.array_equal(momentum_weights(prev, tilde, 0.0).values, prev.values):
            return CheckResult("momentum_endpoints", False, "beta=0 did not return prev")
        if not np.array_equal(momentum_weights(prev, tilde, 1.0).values, tilde.values):
            return CheckResult("momentum_endpoints", False, "beta=1 did not return tilde")
        a = ModelParams(stream.normal(size=m))
        b = ModelParams(stream.normal(size=m))
        if not np.array_equal(momentum_params(a, b, 0.0).values, a.values):
            return CheckResult("momentum_endpoints", False, "param beta=0 changed theta")
    return CheckResult("momentum_endpoints", True, "exact at both endpoints")


def _check_level_ordering(stream) -> CheckResult:
    from .core import ClientData, FederatedDataset, build_group_index

    for _ in range(20):
        n_clients = int(stream.integers(2, 5))
        arity = int(stream.integers(2, 4))
        clients = []
        for cid in range(n_clients):
            n = int(stream.integers(3, 30))
            clients.append(
                ClientData(
                    client_id=cid,
                    features=stream.normal(size=(n, 2)),
                    labels=stream.integers(0, 2, size=n),
                    attributes=stream.integers(0, arity, size=n),
                )
            )
        ds = FederatedDataset(tuple(clients), arity, 2, 2)
        index = build_group_index(ds)
        losses = stream.uniform(0.0, 5.0, size=index.M)
        client_risk, attr_risk, unified = level_risks(losses, index)
        if client_risk > unified or attr_risk > unified:
            return CheckResult(
                "level_risk_ordering",
                False,
                f"ordering violated: {client_risk} / {attr_risk} vs {unified}",
            )
    return CheckResult("level_risk_ordering", True, "client and attribute risks never exceed unified")


def _check_risk_interval(stream) -> CheckResult:
    lhs, rhs, ok = verify_theorem41(np.array([0.0, 1.0]), float(np.sqrt(2.0)))
    if rhs != 1.0:
        return CheckResult("risk_interval", False, f"reference bound was {rhs!r}, expected 1.0")
    if not ok:
        return CheckResult("risk_interval", False, f"reference instance gap {abs(lhs - rhs):.3e}")
    worst = 0.0
    for _ in range(8):
        m = int(stream.integers(2, 4))
        risks = stream.uniform(0.0, 3.0, size=m)
        if np.ptp(risks) < 1e-3:
            risks[0] += 0.5
        d = (risks - risks.mean()) ** 2
        limit = float(np.sqrt((d.sum() / d).min()))
        rho = float(stream.uniform(0.1, 1.0)) * limit
        lhs, rhs, inst_ok = verify_theorem41(risks, rho)
        worst = max(worst, abs(lhs - rhs))
        if not inst_ok:
            return CheckResult("risk_interval", False, f"instance gap {abs(lhs - rhs):.3e}")
    return CheckResult("risk_interval", True, f"max |lhs-rhs| {worst:.3e}")


def _check_gradients(stream) -> CheckResult:
    h = 1e-5
    worst = 0.0
    specs = [
        ModelSpec("linear", 3, 3),
        ModelSpec("mlp", 3, 3, hidden_width=4),
    ]
    for spec in specs:
        for _ in range(10):
            theta = ModelParams(stream.normal(size=spec.param_count()) * 0.5)
            x = stream.normal(size=(6, 3))
            y = stream.integers(0, 3, size=6)
            batch = Batch(x, y)
            g = grad_loss(theta, batch, spec)
            fd = np.zeros_like(g)
            for i in range(len(g)):
                up = theta.values.copy()
                dn = theta.values.copy()
                up[i] += h
                dn[i] -= h
                fd[i] = (loss(ModelParams(up), batch, spec) - loss(ModelParams(dn), batch, spec)) / (
                    2 * h
                )
            rel = float(np.abs(g - fd).max() / max(1.0, np.abs(fd).max()))
            worst = max(worst, rel)
    ok = worst <= 1e-5
    return CheckResult("analytic_gradients", ok, f"max relative FD error {worst:.3e}")


def _tilt_grid(m: int, ticks: int) -> np.ndarray:
    """All compositions of ``ticks`` into m parts, scaled to the simplex."""
    rows = []
    for combo in product(range(ticks + 1), repeat=m - 1):
        if sum(combo) <= ticks:
            rows.append(combo + (ticks - sum(combo),))
    return np.array(rows, dtype=np.float64) / ticks


def _check_tilt(stream) -> CheckResult:
    m = 4
    base = SimplexWeights(np.full(m, 1.0 / m))
    grid = _tilt_grid(m, 50)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(grid > 0.0, grid * np.log(grid * m), 0.0)
    grid_kl = terms.sum(axis=1)
    worst = 0.0
    for _ in range(5):
        losses = stream.uniform(0.0, 2.0, size=m)
        radius = float(stream.uniform(0.05, 0.5))
        w = tilt_weights_kl(base, losses, radius)
        div = kl_divergence(w, base)
        if div > radius + 1e-6:
            return CheckResult("kl_tilt", False, f"KL budget exceeded: {div:.6f} > {radius:.6f}")
        feasible = grid_kl <= radius
        best = float((grid[feasible] @ losses).max())
        got = float(w.values @ losses)
        worst = max(worst, best - got)
    zero = tilt_weights_kl(base, stream.uniform(size=m), 0.0)
    if not np.array_equal(zero.values, base.values):
        return CheckResult("kl_tilt", False, "radius 0 did not return the base weights")
    ok = worst <= 5e-3
    return CheckResult("kl_tilt", ok, f"max grid advantage {worst:.3e}")


def _check_aggregate(stream) -> CheckResult:
    for _ in range(20):
        k = int(stream.integers(2, 7))
        d = int(stream.integers(1, 9))
        models = [ModelParams(stream.normal(size=d)) for _ in range(k)]
        ref = aggregate(models).values
        perm = [models[i] for i in stream.permutation(k)]
        if not np.array_equal(aggregate(perm).values, ref):
            return CheckResult("aggregate_permutation", False, "mean changed under reordering")
    return CheckResult("aggregate_permutation", True, "bit-identical under input reordering")


def _check_streams(stream) -> CheckResult:
    seed = int(stream.integers(0, 2**31))
    a = rng_stream(seed, 3, 7, LANE_SERVER).normal(size=8)
    b = rng_stream(seed, 3, 7, LANE_SERVER).normal(size=8)
    if not np.array_equal(a, b):
        return CheckResult("keyed_streams", False, "same key produced different draws")
    c = rng_stream(seed, 3, 7, LANE_SERVER + 1).normal(size=8)
    d = rng_stream(seed, 4, 7, LANE_SERVER).normal(size=8)
    e = rng_stream(seed, 3, SERVER_NODE, LANE_SERVER).normal(size=8)
    for other in (c, d, e):
        if np.array_equal(a, other):
            return CheckResult("keyed_streams", False, "distinct keys collided")
    return CheckResult("keyed_streams", True, "keys reproduce and do not collide")


def _check_exact_risks(stream) -> CheckResult:
    """Risk mixtures must be exact, not float-accumulated."""
    sizes = [int(stream.integers(1, 50)) for _ in range(6)]
    losses = [float(stream.uniform(0.0, 2.0)) for _ in range(6)]
    total = sum(sizes)
    exact = sum(Fraction(s) * Fraction(l) for s, l in zip(sizes, losses)) / Fraction(total)
    mx = max(losses)
    ok = exact <= Fraction(mx)
    return CheckResult(
        "exact_mixture",
        bool(ok),
        "rational mixture stays below the max term" if ok else "mixture exceeded max term",
    )


_CHECKS = (
    ("projection_kkt", _check_projection),
    ("projection_vs_grid", _check_projection_grid),
    ("mirror_vs_subproblem", _check_mirror),
    ("masked_mirror", _check_masked_mirror),
    ("momentum_endpoints", _check_momentum),
    ("level_risk_ordering", _check_level_ordering),
    ("risk_interval", _check_risk_interval),
    ("analytic_gradients", _check_gradients),
    ("kl_tilt", _check_tilt),
    ("aggregate_permutation", _check_aggregate),
    ("keyed_streams", _check_streams),
    ("exact_mixture", _check_exact_risks),
)


def run_suite(seed: int, trials: int = 1, fault=None) -> list:
    """Run every check ``trials`` times; returns one CheckResult per check.

    A repeated check keeps its worst outcome. ``fault`` must be None or one
    of FAULTS.
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {', '.join(FAULTS)}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    results = []
    for name, fn in _CHECKS:
        outcome = None
        for t in range(trials):
            stream = rng_stream(seed, t, 0, LANE_SERVER)
            if fn is _check_mirror:
                res = fn(stream, fault)
            else:
                res = fn(stream)
            if outcome is None or (outcome.ok and not res.ok):
                outcome = res
        results.append(outcome)
    return results
