"""Flow-matching velocity fields for discrete mode mixtures and their decomposition.

With Gaussian paths ``y_t = alpha_t * y + beta_t * y0`` and a data
distribution supported on a few masks, the marginal velocity is a
responsibility-weighted mixture of per-mode conditional velocities.  At
``t = 0`` all responsibilities equal the mode weights, so the velocity is
``sum_k w_k (y_k - y0)`` and the weights can be read back from velocity
evaluations by simplex-constrained least squares.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import ModeSet, as_binary_mask

VelocityField = Callable[[np.ndarray, float, object], np.ndarray]

COND_WARN = 1e8


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: Callable[[float], float]
    beta: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    beta_dot: Callable[[float], float]
    name: str = "custom"

    def check(self, tol: float = 1e-12) -> None:
        """Raise if the boundary values or t=0 derivatives are off."""
        conds = {
            "alpha(0)=0": self.alpha(0.0),
            "beta(0)=1": self.beta(0.0) - 1.0,
            "alpha(1)=1": self.alpha(1.0) - 1.0,
            "beta(1)=0": self.beta(1.0),
            "alpha_dot(0)=1": self.alpha_dot(0.0) - 1.0,
            "beta_dot(0)=-1": self.beta_dot(0.0) + 1.0,
        }
        bad = [k for k, v in conds.items() if abs(v) > tol]
        if bad:
            raise ValueError(f"schedule {self.name!r} violates {', '.join(bad)}")


def linear_schedule() -> NoiseSchedule:
    return NoiseSchedule(lambda t: t, lambda t: 1.0 - t, lambda t: 1.0, lambda t: -1.0, name="linear")


def cubic_schedule() -> NoiseSchedule:
    """``alpha = t + t^2 (1 - t)``: admissible but non-linear, used to test schedule independence."""
    return NoiseSchedule(
        lambda t: t + t * t * (1.0 - t),
        lambda t: 1.0 - t - t * t * (1.0 - t),
        lambda t: 1.0 + 2.0 * t - 3.0 * t * t,
        lambda t: -1.0 - 2.0 * t + 3.0 * t * t,
        name="cubic",
    )


def _flat_masks(masks) -> np.ndarray:
    m = as_binary_mask(masks)
    return m.reshape(len(m), -1).astype(np.float64)


def conditional_velocity(y_t, t: float, y, sched: Optional[NoiseSchedule] = None) -> np.ndarray:
    """Velocity of the Gaussian path that ends at mask ``y``, evaluated at ``y_t``."""
    sched = sched or linear_schedule()
    beta = sched.beta(t)
    if not beta > 0:
        raise ValueError(f"conditional velocity is singular at t={t} (beta={beta})")
    ratio = sched.beta_dot(t) / beta
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_t = np.asarray(y_t, dtype=np.float64).reshape(-1)
    return (sched.alpha_dot(t) - ratio * sched.alpha(t)) * y + ratio * y_t


def responsibilities(y_t, t: float, masks: np.ndarray, weights: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Posterior over modes given ``y_t``, computed in log space."""
    alpha, beta = sched.alpha(t), sched.beta(t)
    if not beta > 0:
        raise ValueError(f"responsibilities are singular at t={t} (beta={beta})")
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    sq = ((y_t[None, :] - alpha * masks) ** 2).sum(1)
    logits = logw - sq / (2.0 * beta * beta)
    return np.exp(logits - logsumexp(logits))


def mixture_velocity(y_t, t: float, modes: ModeSet, sched: Optional[NoiseSchedule] = None) -> np.ndarray:
    """Marginal velocity of the mode mixture at ``(y_t, t)``."""
    sched = sched or linear_schedule()
    w = np.asarray(modes.weights, dtype=np.float64)
    if not np.any(w > 0):
        raise ValueError("all mode weights are zero")
    masks = _flat_masks(modes.masks)
    y_t = np.asarray(y_t, dtype=np.float64).reshape(-1)
    r = responsibilities(y_t, t, masks, w, sched)
    beta = sched.beta(t)
    ratio = sched.beta_dot(t) / beta
    mean_mask = r @ masks
    return (sched.alpha_dot(t) - ratio * sched.alpha(t)) * mean_mask + ratio * y_t


def velocity_at_zero(y0, modes: ModeSet) -> np.ndarray:
    masks = _flat_masks(modes.masks)
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
    return modes.weights @ (masks - y0[None, :])


class MixtureField:
    """Exact velocity field of a known mode set; usable wherever a learned field is."""

    def __init__(self, modes: ModeSet, sched: Optional[NoiseSchedule] = None):
        self.modes = modes
        self.sched = sched or linear_schedule()

    def __call__(self, y_t, t, x=None):
        return mixture_velocity(y_t, t, self.modes, self.sched)


class NoisyField:
    """Wraps a field and adds i.i.d. Gaussian error, to study estimator sensitivity."""

    def __init__(self, field: VelocityField, sigma: float, rng: np.random.Generator):
        self.field = field
        self.sigma = sigma
        self.rng = rng

    def __call__(self, y_t, t, x=None):
        v = self.field(y_t, t, x)
        return v + self.sigma * self.rng.standard_normal(v.shape)


# ---------------------------------------------------------------------------
# simplex-constrained least squares


class SolverError(RuntimeError):
    def __init__(self, message, weights, residual):
        super().__init__(message)
        self.weights = weights
        self.residual = residual


@dataclass(frozen=True)
class WeightEstimate:
    weights: np.ndarray
    residual: float  # objective value at the returned weights
    n_samples: int
    kkt_residual: float
    iterations: int
    condition: float  # of the objective's curvature on the support's tangent space

    @property
    def ill_conditioned(self) -> bool:
        return not self.condition < COND_WARN


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _tangent_condition(gram: np.ndarray, support: np.ndarray) -> float:
    k = len(support)
    if k <= 1:
        return 1.0
    g = gram[np.ix_(support, support)]
    # orthonormal basis of {z : sum(z) = 0} within the support
    basis = np.linalg.qr(np.vstack([np.ones(k), np.eye(k)[:-1]]).T)[0][:, 1:]
    evals = np.linalg.eigvalsh(basis.T @ g @ basis)
    top = evals.max()
    if top <= 0:
        return np.inf
    low = evals.min()
    return np.inf if low <= top * 1e-15 else float(top / low)


def simplex_lstsq(gram, rhs, *, tol: float = 1e-10, max_iter: int = 100_000, w0=None):
    """Minimise ``w'Gw - 2 b'w`` over the probability simplex.

    Projected gradient descent with a Barzilai-Borwein trial step and Armijo
    backtracking along the projection arc.  Stops once the projected-gradient
    residual ``max|w - P(w - grad/L)| * L`` falls below ``tol``, where ``L``
    normalises the gradient scale.  Returns ``(w, kkt_residual, iterations)``.
    """
    G = np.asarray(gram, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64)
    k = len(b)
    scale = max(float(np.abs(np.diag(G)).max()), 1e-300)
    Q = G / scale
    c = b / scale

    def grad(w):
        return 2.0 * (Q @ w - c)

    def kkt(w, g):
        return float(np.abs(w - project_simplex(w - g)).max())

    w = project_simplex(np.full(k, 1.0 / k) if w0 is None else w0)
    g = grad(w)
    step = 1.0 / max(2.0 * np.linalg.norm(Q, 2), 1e-12)
    res = kkt(w, g)
    it = 0
    while res > tol and it < max_iter:
        it += 1
        t = step
        while True:
            w_new = project_simplex(w - t * g)
            d = w_new - w
            # exact change of the quadratic; differencing f loses precision near the optimum
            decrease = float(g @ d + d @ Q @ d)
            if decrease <= 1e-4 * float(g @ d) or t < 1e-20:
                break
            t *= 0.5
        if not np.any(d):
            break
        g_new = grad(w_new)
        yv = g_new - g
        sy = d @ yv
        step = (d @ d) / sy if sy > 1e-300 else step * 2.0
        step = min(max(step, 1e-12), 1e12)
        w, g = w_new, g_new
        res = kkt(w, g)
    if res > tol:
        w, g, res = _polish(Q, c, w, g, res, kkt, grad)
    return w, res, it


def _polish(Q, c, w, g, res, kkt, grad):
    """Solve the equality-constrained KKT system on the current support.

    Projected steps stall at rounding level; once the support is right this
    solve lands on the minimiser.  The result is kept only if it is feasible
    and lowers the residual.
    """
    support = np.flatnonzero(w > 0)
    m = len(support)
    A = np.zeros((m + 1, m + 1))
    A[:m, :m] = 2.0 * Q[np.ix_(support, support)]
    A[:m, m] = 1.0
    A[m, :m] = 1.0
    rhs = np.concatenate([2.0 * c[support], [1.0]])
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0][:m]
    if np.any(sol < 0):
        return w, g, res
    cand = np.zeros_like(w)
    cand[support] = sol / sol.sum()
    g_cand = grad(cand)
    r_cand = kkt(cand, g_cand)
    return (cand, g_cand, r_cand) if r_cand < res else (w, g, res)


def decomposition_system(field: VelocityField, candidates, x, n: int, rng: np.random.Generator):
    """Gram matrix, right-hand side and constant of the decomposition objective.

    The objective is ``sum_i || v(y0_i) - sum_k w_k (c_k - y0_i) ||^2`` over
    ``n`` standard-normal draws ``y0_i``; it equals ``w'Gw - 2b'w + s``.
    Evaluations are reduced in draw order.
    """
    cands = _flat_masks(candidates)
    k, d = cands.shape
    G = np.zeros((k, k))
    b = np.zeros(k)
    s = 0.0
    for _ in range(n):
        y0 = rng.standard_normal(d)
        v = np.asarray(field(y0, 0.0, x), dtype=np.float64).reshape(-1)
        A = cands - y0[None, :]  # rows are (c_k - y0)
        G += A @ A.T
        b += A @ v
        s += float(v @ v)
    return G, b, s


def estimate_weights(
    field: VelocityField,
    candidates,
    x=None,
    n: int = 64,
    rng: Optional[np.random.Generator] = None,
    *,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> WeightEstimate:
    """Mode probabilities of ``candidates`` read off the field's velocity at t=0."""
    if n < 1:
        raise ValueError("need at least one noise sample")
    cands = as_binary_mask(candidates)
    if cands.ndim != 3 or len(cands) == 0:
        raise ValueError("need at least one candidate mask")
    rng = rng if rng is not None else np.random.default_rng(0)
    G, b, s = decomposition_system(field, cands, x, n, rng)
    if len(cands) == 1:
        w, res, it = np.ones(1), 0.0, 0
    else:
        w, res, it = simplex_lstsq(G, b, tol=tol, max_iter=max_iter)
    objective = max(float(w @ G @ w - 2.0 * b @ w + s), 0.0)
    if res > tol:
        raise SolverError(f"solver stopped at KKT residual {res:.3g} after {it} iterations", w, objective)
    support = np.flatnonzero(w > 1e-12)
    return WeightEstimate(w, objective, n, res, it, _tangent_condition(G, support))


def sample_ode(
    field: VelocityField,
    sched: Optional[NoiseSchedule],
    x,
    steps: int,
    rng: np.random.Generator,
    shape: Sequence[int],
    y0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Euler-integrate the flow from noise to a binary mask.

    Evaluates the field at ``t = 0, 1/steps, ..., 1 - 1/steps``.  The field
    already embeds its schedule; ``sched``, when given, is only checked for
    admissibility.  Slow by construction; it exists to contrast iterative
    sampling with single-pass proposals.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if sched is not None:
        sched.check()
    d = int(np.prod(shape))
    y = rng.standard_normal(d) if y0 is None else np.asarray(y0, dtype=np.float64).reshape(-1).copy()
    dt = 1.0 / steps
    for i in range(steps):
        y = y + dt * np.asarray(field(y, i * dt, x)).reshape(-1)
    return (y >= 0.5).reshape(tuple(shape))
