"""Simplex-constrained update rules and their numeric cross-checks.

Covers Euclidean projection, the entropic mirror step (exponentiated
weights), momentum mixing for parameters and weights, KL utilities, a
KL-ball tilt for per-sample weighting, and an independent numeric solver for
the mirror subproblem used to validate the closed-form step.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .core import ModelParams, SimplexWeights

__all__ = [
    "MirrorStepResult",
    "project_simplex",
    "mirror_step_entropy",
    "mirror_step_entropy_masked",
    "euclidean_step_projected",
    "solve_mirror_subproblem",
    "kl_divergence",
    "momentum_params",
    "momentum_weights",
    "tilt_weights_kl",
]


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


def project_simplex(v) -> SimplexWeights:
    """Euclidean projection onto the probability simplex.

    Sort-and-threshold algorithm: with u the descending sort of v, find the
    largest j with u_j - (cumsum(u)_j - 1)/j > 0 and clip at that threshold.
    """
    v = _as_vector(v, "v")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    j = np.arange(1, v.size + 1)
    rho = int(np.nonzero(u - css / j > 0.0)[0][-1])
    tau = css[rho] / (rho + 1.0)
    return SimplexWeights(np.maximum(v - tau, 0.0))


@dataclass(frozen=True)
class MirrorStepResult:
    weights: SimplexWeights
    max_shift: float


def mirror_step_entropy(lam: SimplexWeights, g, step: float) -> MirrorStepResult:
    """Entropic mirror ascent step: w_j proportional to lam_j * exp(step * g_j).

    The exponent is stabilized by subtracting its maximum over the support.
    Zero coordinates stay exactly zero. ``max_shift`` is the L-infinity change
    of the weight vector.
    """
    base = lam.values
    g = _as_vector(g, "g")
    if g.size != base.size:
        raise ValueError("g must match the weight vector length")
    if not (step > 0.0 and np.isfinite(step)):
        raise ValueError("step must be positive")
    support = base > 0.0
    z = step * g[support]
    w = np.zeros_like(base)
    w[support] = base[support] * np.exp(z - z.max())
    w /= w.sum()
    return MirrorStepResult(SimplexWeights(w), float(np.max(np.abs(w - base))))


def mirror_step_entropy_masked(
    lam: SimplexWeights, g, step: float, mask
) -> MirrorStepResult:
    """Mirror step restricted to the masked entries.

    Unmasked entries keep their previous weight untouched; the tilt
    redistributes only the mass the masked entries already held, so the total
    stays 1. With a full mask this is exactly ``mirror_step_entropy``.
    """
    mask = np.asarray(mask, dtype=bool)
    base = lam.values
    if mask.shape != base.shape:
        raise ValueError("mask must match the weight vector length")
    if mask.all():
        return mirror_step_entropy(lam, g, step)
    g = _as_vector(g, "g")
    if not (step > 0.0 and np.isfinite(step)):
        raise ValueError("step must be positive")
    w = base.copy()
    sub = mask & (base > 0.0)
    mass = base[sub].sum()
    if mass <= 0.0:
        return MirrorStepResult(SimplexWeights(w), 0.0)
    z = step * g[sub]
    tilted = base[sub] * np.exp(z - z.max())
    w[mask] = 0.0
    w[sub] = tilted * (mass / tilted.sum())
    return MirrorStepResult(SimplexWeights(w), float(np.max(np.abs(w - base))))


def euclidean_step_projected(lam: SimplexWeights, g, step: float) -> SimplexWeights:
    """Projected ascent step: project lam + step * g back onto the simplex.

    Entries of g left at zero still move, because the projection subtracts a
    common threshold from every coordinate.
    """
    base = lam.values
    g = _as_vector(g, "g")
    if g.size != base.size:
        raise ValueError("g must match the weight vector length")
    if not (step > 0.0 and np.isfinite(step)):
        raise ValueError("step must be positive")
    return project_simplex(base + step * g)


def _subproblem_objective(x: np.ndarray, g: np.ndarray, base: np.ndarray, step: float):
    # maximize <g, x> - (1/step) * sum x log(x / base); return (-obj, -grad)
    safe = np.maximum(x, 1e-300)
    logr = np.log(safe / base)
    obj = float(g @ x - (x @ logr) / step)
    grad = g - (logr + 1.0) / step
    return -obj, -grad


def solve_mirror_subproblem(
    lam: SimplexWeights, g, step: float, tol: float = 1e-9
) -> SimplexWeights:
    """Numerically maximize <g, w> - D_h(w || lam) / step over the simplex.

    D_h is the Bregman distance of negative entropy, which on the simplex
    equals KL(w || lam). Solved with a generic constrained optimizer plus a
    projected-ascent polish; serves as an independent oracle for the
    closed-form mirror step. Raises if the KKT residual stays above tol.
    """
    base_full = lam.values
    g_full = _as_vector(g, "g")
    if g_full.size != base_full.size:
        raise ValueError("g must match the weight vector length")
    if not (step > 0.0 and np.isfinite(step)):
        raise ValueError("step must be positive")
    support = base_full > 0.0
    base = base_full[support]
    gs = g_full[support]
    m = base.size
    if m == 1:
        out = np.zeros_like(base_full)
        out[support] = 1.0
        return SimplexWeights(out)

    with warnings.catch_warnings():
        # the quasi-Newton update warns when consecutive gradients coincide
        warnings.simplefilter("ignore", UserWarning)
        res = scipy.optimize.minimize(
            _subproblem_objective,
            x0=base.copy(),
            args=(gs, base, step),
            jac=True,
            method="trust-constr",
            bounds=scipy.optimize.Bounds(np.full(m, 1e-15), np.ones(m)),
            constraints=[scipy.optimize.LinearConstraint(np.ones((1, m)), 1.0, 1.0)],
            options={"gtol": 1e-14, "xtol": 1e-14, "maxiter": 2000},
        )
    x = np.maximum(res.x, 1e-300)
    x = x / x.sum()

    # Armijo projected-ascent polish; cheap and independent of the closed form.
    def kkt_residual(x):
        grad = gs - (np.log(x / base) + 1.0) / step
        active = x > 1e-12
        spread = float(grad[active].max() - grad[active].min()) if active.any() else 0.0
        inactive = ~active
        viol = 0.0
        if inactive.any() and active.any():
            viol = max(0.0, float(grad[inactive].max() - grad[active].max()))
        return spread + viol

    for _ in range(5000):
        if kkt_residual(x) <= tol:
            break
        neg_obj, neg_grad = _subproblem_objective(x, gs, base, step)
        direction = -neg_grad
        improved = False
        s = step
        while s > 1e-18:
            cand = project_simplex(x + s * direction).values
            cand = np.maximum(cand, 1e-300)
            cand = cand / cand.sum()
            if _subproblem_objective(cand, gs, base, step)[0] < neg_obj:
                x = cand
                improved = True
                break
            s *= 0.5
        if not improved:
            break

    # near the optimum the objective flattens below float resolution while
    # the stationarity residual is still measurable; drive that instead
    for _ in range(200):
        resid = kkt_residual(x)
        if resid <= tol:
            break
        direction = -_subproblem_objective(x, gs, base, step)[1]
        improved = False
        s = step
        while s > 1e-18:
            cand = project_simplex(x + s * direction).values
            cand = np.maximum(cand, 1e-300)
            cand = cand / cand.sum()
            if kkt_residual(cand) < resid:
                x = cand
                improved = True
                break
            s *= 0.5
        if not improved:
            break
    if kkt_residual(x) > max(tol, 1e-7):
        raise RuntimeError(
            f"mirror subproblem did not converge (KKT residual {kkt_residual(x):.3e})"
        )
    out = np.zeros_like(base_full)
    out[support] = x
    return SimplexWeights(out / out.sum())


def kl_divergence(p: SimplexWeights, q: SimplexWeights) -> float:
    """KL(p || q) with the 0 log 0 = 0 convention.

    Raises if p puts mass where q has none.
    """
    pv, qv = p.values, q.values
    if pv.size != qv.size:
        raise ValueError("p and q must have equal length")
    pos = pv > 0.0
    if np.any(qv[pos] <= 0.0):
        raise ValueError("support violation: p > 0 where q = 0")
    val = float(np.sum(pv[pos] * np.log(pv[pos] / qv[pos])))
    # guards fp noise at p ~ q
    return 0.0 if -1e-15 < val < 0.0 else val


def momentum_params(theta_new: ModelParams, theta_prev: ModelParams, beta: float) -> ModelParams:
    """Parameter extrapolation: theta_new + beta * (theta_new - theta_prev)."""
    a, b = theta_new.values, theta_prev.values
    if a.size != b.size:
        raise ValueError("parameter vectors must have equal length")
    if not (beta >= 0.0 and np.isfinite(beta)):
        raise ValueError("beta must be >= 0")
    return ModelParams(a + beta * (a - b))


def momentum_weights(
    lambda_prev: SimplexWeights, lambda_tilde: SimplexWeights, beta: float
) -> SimplexWeights:
    """Convex mixing of weight vectors: (1 - beta) * prev + beta * tilde.

    beta = 0 keeps the previous weights; beta = 1 is full replacement. Stays
    on the simplex for any beta in [0, 1].
    """
    if not (0.0 <= beta <= 1.0):
        raise ValueError("beta must lie in [0, 1]")
    p, t = lambda_prev.values, lambda_tilde.values
    if p.size != t.size:
        raise ValueError("weight vectors must have equal length")
    return SimplexWeights((1.0 - beta) * p + beta * t)


def _tilt_at(base: np.ndarray, losses: np.ndarray, tau: float) -> np.ndarray:
    z = losses / tau
    w = base * np.exp(z - z.max())
    return w / w.sum()


def tilt_weights_kl(base: SimplexWeights, losses, radius: float) -> SimplexWeights:
    """Worst-case reweighting over the KL ball of the given radius.

    Maximizes <w, losses> subject to KL(w || base) <= radius. The maximizer
    is an exponential tilt w proportional to base * exp(losses / tau); the
    temperature tau is found by bisection so the KL constraint is active,
    unless even the zero-temperature limit (all mass on the highest-loss
    support entries) stays inside the ball, in which case that limit is
    returned directly.
    """
    if radius < 0.0 or not np.isfinite(radius):
        raise ValueError("radius must be >= 0")
    bv = base.values
    losses = _as_vector(losses, "losses")
    if losses.size != bv.size:
        raise ValueError("losses must match the weight vector length")
    if radius == 0.0:
        return SimplexWeights(bv.copy())
    support = bv > 0.0
    ls = losses[support]
    bs = bv[support]

    # zero-temperature limit: mass on the argmax of the losses over the support
    top = ls >= ls.max()
    w0 = np.zeros_like(bs)
    w0[top] = bs[top] / bs[top].sum()
    kl0 = float(np.sum(w0[top] * np.log(w0[top] / bs[top])))
    out = np.zeros_like(bv)
    if kl0 <= radius:
        out[support] = w0
        return SimplexWeights(out)

    def kl_at(tau: float) -> float:
        w = _tilt_at(bs, ls, tau)
        pos = w > 0.0
        return float(np.sum(w[pos] * np.log(w[pos] / bs[pos])))

    lo, hi = 1e-8, 1e8
    if kl_at(hi) > radius:
        # radius below what the flattest tilt reaches; return that tilt
        out[support] = _tilt_at(bs, ls, hi)
        return SimplexWeights(out)
    if kl_at(lo) < radius:
        out[support] = _tilt_at(bs, ls, lo)
        return SimplexWeights(out)
    best = None
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        val = kl_at(mid)
        best = mid
        if abs(val - radius) <= 1e-13:
            break
        if val > radius:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-14:
            best = np.sqrt(lo * hi)
            break
    w = _tilt_at(bs, ls, best)
    pos = w > 0.0
    final_kl = float(np.sum(w[pos] * np.log(w[pos] / bs[pos])))
    if abs(final_kl - radius) > 1e-6:
        raise RuntimeError(
            f"KL tilt bisection did not converge (|KL - radius| = {abs(final_kl - radius):.3e})"
        )
    out[support] = w
    return SimplexWeights(out)
