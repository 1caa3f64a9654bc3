"""Independent checks: finite differences, a dense reference evaluator and
censored-normal moments.

Nothing here calls the evaluator's kernels.  ``dense_reference`` rebuilds
``Q`` from the assignment matrix and the raw edge coefficients and loops over
samples, so parity tests compare two separate code paths.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import CapabilityError, DimensionError

DENSE_REFERENCE_CAP = 256
FD_STEP = 1e-6


@dataclass
class FdReport:
    max_rel_error: float
    worst_index: int
    boundary_proximity: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")

    def to_dict(self):
        return {
            "max_rel_error": float(self.max_rel_error),
            "worst_index": int(self.worst_index),
            "boundary_proximity": float(self.boundary_proximity),
            "step": float(self.step),
        }


def fd_gradient(fun, p, step=FD_STEP):
    """Central differences of a scalar function, one coordinate at a time."""
    p = np.asarray(p, dtype=float)
    g = np.empty_like(p)
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = step
        g[j] = (fun(p + e) - fun(p - e)) / (2.0 * step)
    return g


def fd_jacobian(fun, p, step=FD_STEP):
    """Central-difference Jacobian of a vector (or matrix, flattened) function.

    Column ``j`` holds the derivative with respect to ``p[j]``.
    """
    p = np.asarray(p, dtype=float)
    cols = []
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = step
        hi = np.asarray(fun(p + e), dtype=float).reshape(-1)
        lo = np.asarray(fun(p - e), dtype=float).reshape(-1)
        cols.append((hi - lo) / (2.0 * step))
    return np.column_stack(cols)


def rel_error(approx, exact):
    """``max|approx - exact| / max(1, max|exact|)`` and the worst index."""
    approx = np.asarray(approx, dtype=float).reshape(-1)
    exact = np.asarray(exact, dtype=float).reshape(-1)
    diff = np.abs(approx - exact)
    if diff.size == 0:
        return 0.0, -1
    k = int(np.argmax(diff))
    return float(diff[k] / max(1.0, float(np.max(np.abs(exact))))), k


# ---------------------------------------------------------------------------
# Dense reference


def _dense_flows(inst, scen, p):
    B = np.asarray(inst.elasticity.B)
    xu = np.asarray(inst.x_upper)
    Y = np.empty_like(scen.xi)
    X = np.empty_like(scen.xi)
    Om = np.zeros(scen.xi.shape, dtype=bool)
    for i in range(scen.xi.shape[1]):
        y = B @ p + scen.xi[:, i]
        Y[:, i] = y
        X[:, i] = np.minimum(np.maximum(y, 0.0), xu)
        Om[:, i] = (y > 0.0) & (y < xu)
    return Y, X, Om


def boundary_proximity(inst, scen, p):
    """Smallest distance of any pre-projection flow to ``0`` or ``x_u``."""
    Y, _, _ = _dense_flows(inst, scen, np.asarray(p, dtype=float))
    xu = inst.x_upper[:, None]
    return float(min(np.min(np.abs(Y)), np.min(np.abs(Y - xu))))


def dense_matrices(inst):
    """``(A, Q, s)`` from the assignment matrix and raw edge coefficients."""
    A = inst.routes.assignment.toarray()
    coe = np.asarray(inst.cost.coe, dtype=float)
    Q = 2.0 * (A * coe[None, :]) @ A.T
    s = -A @ np.asarray(inst.cost.offset, dtype=float)
    return A, Q, s


def dense_reference(inst, scen, p, cap=DENSE_REFERENCE_CAP, hessian=True):
    """Ground-truth values and derivatives from dense algebra and per-sample loops."""
    from .evaluator import EvalReport

    if inst.n_routes > cap:
        raise CapabilityError(f"|R|={inst.n_routes} exceeds the dense reference cap {cap}")
    p = np.asarray(p, dtype=float)
    if p.shape != (inst.n_routes,):
        raise DimensionError(f"p has shape {p.shape}, expected ({inst.n_routes},)")
    t0 = time.perf_counter()
    _, Q, s = dense_matrices(inst)
    B = np.asarray(inst.elasticity.B)
    Kd = inst.commodity.matrix.toarray()
    lam = inst.lam
    Y, X, Om = _dense_flows(inst, scen, p)
    n = X.shape[1]
    r = inst.n_routes

    f = 0.0
    g = np.zeros(r)
    mean_x = np.zeros(r)
    jac = np.zeros((Kd.shape[0], r))
    H = np.zeros((r, r))
    for i in range(n):
        x = X[:, i]
        J = np.diag(Om[:, i].astype(float))
        f += 0.5 * x @ Q @ x - s @ x
        g += (J @ B).T @ (Q @ x - s)
        mean_x += x
        jac += Kd @ J @ B
        if hessian:
            H += (J @ B).T @ Q @ (J @ B)
    f = 0.5 * lam * p @ p + f / n
    g = lam * p + g / n
    c = inst.commodity.demand_lower - Kd @ (mean_x / n)
    jac = -jac / n
    Hf = lam * np.eye(r) + H / n if hessian else None
    return EvalReport(float(f), c, g, jac, Hf, "dense-reference", {"total": time.perf_counter() - t0})


def sample_smooth_point(inst, scen, rng, step=FD_STEP, low=None, high=None, max_tries=200):
    """Random price vector whose flows keep clear of every projection kink.

    Draws uniformly from ``[low, high]`` (default: the price box) and rejects
    points with boundary proximity below ``10 * step * sigma_max(B)``.
    """
    low = inst.p_lower if low is None else np.broadcast_to(low, (inst.n_routes,))
    high = inst.p_upper if high is None else np.broadcast_to(high, (inst.n_routes,))
    margin = 10.0 * step * float(np.linalg.norm(inst.elasticity.B, 2))
    for _ in range(max_tries):
        p = rng.uniform(low, high)
        if boundary_proximity(inst, scen, p) >= margin:
            return p
    raise RuntimeError("could not find a point away from the projection kinks")


def check_gradient(inst, scen, p, step=FD_STEP, path="sparse"):
    """Finite-difference check of the objective gradient at ``p``."""
    from . import evaluator as ev

    def f(q):
        return ev.eval_objective(inst, scen, ev.eval_flows(inst, scen, q))

    flows = ev.eval_flows(inst, scen, p)
    g = ev.grad_f_sparse(inst, scen, flows) if path == "sparse" else ev.grad_f_dense(inst, scen, flows)
    err, k = rel_error(fd_gradient(f, p, step), g)
    return FdReport(err, k, boundary_proximity(inst, scen, p), step)


def check_hessian(inst, scen, p, step=FD_STEP, path="sparse"):
    """Finite differences of the analytic gradient against the Hessian."""
    from . import evaluator as ev

    def g(q):
        return ev.grad_f_sparse(inst, scen, ev.eval_flows(inst, scen, q))

    H = ev.hess_f(inst, scen, ev.eval_flows(inst, scen, p), mode=path)
    err, k = rel_error(fd_jacobian(g, p, step), H)
    return FdReport(err, k, boundary_proximity(inst, scen, p), step)


def constraint_curvature(inst, scen, p, step=FD_STEP):
    """Largest central-difference entry of the derivative of ``grad_c``."""
    from . import evaluator as ev

    def jc(q):
        return ev.grad_c(inst, scen, ev.eval_flows(inst, scen, q))

    D = fd_jacobian(jc, p, step)
    return float(np.max(np.abs(D), initial=0.0))


# ---------------------------------------------------------------------------
# Convexity bound, by brute force


def random_pattern_min_eig(Q, B, rng, n_patterns=1000, n_samples=1):
    """Smallest eigenvalue of ``B^T ((1/N) sum_i J_i Q J_i) B`` over random 0/1 diagonals."""
    Q = np.asarray(Q, dtype=float)
    B = np.asarray(B, dtype=float)
    r = Q.shape[0]
    worst = math.inf
    for _ in range(n_patterns):
        J = rng.integers(0, 2, size=(n_samples, r)).astype(float)
        inner = sum(j[:, None] * Q * j[None, :] for j in J) / n_samples
        M = B.T @ inner @ B
        worst = min(worst, float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]))
    return worst


# ---------------------------------------------------------------------------
# Censored normal moments


def _censor_terms(mu, sigma, lo, hi):
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    Pa, Pb = norm.cdf(a), norm.cdf(b)
    pa = norm.pdf(a) if math.isfinite(a) else 0.0
    pb = norm.pdf(b) if math.isfinite(b) else 0.0
    return Pa, Pb, pa, pb


def censored_moment_reference(mu, sigma, bounds=(0.0, math.inf)):
    """``E[clip(Z, lo, hi)]`` for ``Z ~ N(mu, sigma^2)``."""
    lo, hi = bounds
    if sigma == 0:
        return float(min(max(mu, lo), hi))
    Pa, Pb, pa, pb = _censor_terms(mu, sigma, lo, hi)
    out = mu * (Pb - Pa) + sigma * (pa - pb)
    if Pa > 0:
        out += lo * Pa
    if Pb < 1:
        out += hi * (1.0 - Pb)
    return float(out)


def censored_second_moment(mu, sigma, bounds=(0.0, math.inf)):
    """``E[clip(Z, lo, hi)^2]`` for ``Z ~ N(mu, sigma^2)``."""
    lo, hi = bounds
    if sigma == 0:
        return float(min(max(mu, lo), hi) ** 2)
    Pa, Pb, pa, pb = _censor_terms(mu, sigma, lo, hi)
    # Interior part: E[Z^2; lo < Z < hi].
    inner = (mu * mu + sigma * sigma) * (Pb - Pa)
    if math.isfinite(lo):
        inner += sigma * (lo + mu) * pa
    if math.isfinite(hi):
        inner -= sigma * (hi + mu) * pb
    out = inner
    if Pa > 0:
        out += lo * lo * Pa
    if Pb < 1:
        out += hi * hi * (1.0 - Pb)
    return float(out)


def scalar_expected_objective(inst, p):
    """Exact ``f(p)`` for a one-route instance with Gaussian noise."""
    if inst.n_routes != 1:
        raise DimensionError("scalar expectation needs a one-route instance")
    p = float(np.asarray(p).reshape(-1)[0])
    _, Q, s = dense_matrices(inst)
    b = float(inst.elasticity.B[0, 0])
    L = np.asarray(inst.elasticity.sigma_factor, dtype=float)
    sigma = float(np.sqrt(np.sum(L * L)))
    m = b * p + float(inst.elasticity.mu[0])
    bounds = (0.0, float(inst.x_upper[0]))
    e1 = censored_moment_reference(m, sigma, bounds)
    e2 = censored_second_moment(m, sigma, bounds)
    return 0.5 * inst.lam * p * p + 0.5 * float(Q[0, 0]) * e2 - float(s[0]) * e1
