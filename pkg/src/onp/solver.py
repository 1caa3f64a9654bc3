"""Trust-region SQP for the sample-average pricing problem.

Each iteration builds a quadratic model of the Lagrangian from the exact
Hessian of ``f_N`` (the constraint curvature is zero almost surely),
linearises the active constraints and solves the trust-region subproblem with
projected Steihaug-Toint CG.  Steps are accepted on an l1 merit function.

``f_N`` is piecewise quadratic: it has kinks on the hyperplanes where a flow
entry ``y[j, i] = B[j] p + xi[j, i]`` meets 0 or ``x_u[j]``.  A minimiser can
sit on a convex kink, where no one-sided gradient vanishes.  The solver
therefore treats kinks like constraints: a step that would cross a convex kink
can stop on it, the kink equation ``B[j] p = b - xi[j, i]`` joins the working
set, and stationarity is measured with the kink multiplier confined to the
Clarke interval of that kink.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg

from . import evaluator as ev
from .problem import apply_Q

log = logging.getLogger(__name__)

CONVERGED = "converged"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"
MAX_ITER = "max_iter"


@dataclass(frozen=True)
class SolverConfig:
    tol_kkt: float = 1e-8
    max_iter: int = 200
    delta0: float = 1.0
    delta_max: float = 1e3
    eta_accept: float = 0.1
    shrink: float = 0.25
    expand: float = 2.0
    merit_penalty0: float = 10.0
    penalty_margin: float = 1.0
    hessian_mode: str = "exact"
    tau0: float = 1e-8
    cg_rtol: float = 1e-12
    path: str = "sparse"

    def __post_init__(self):
        if not 0 < self.eta_accept < 1:
            raise ValueError("eta_accept must lie in (0, 1)")
        if not self.shrink < 1 < self.expand or self.shrink <= 0:
            raise ValueError("need 0 < shrink < 1 < expand")
        for name in ("tol_kkt", "delta0", "delta_max", "tau0", "cg_rtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.delta0 > self.delta_max:
            raise ValueError("delta0 must not exceed delta_max")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.hessian_mode not in ("exact", "regularized"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")
        if self.path not in ("dense", "sparse"):
            raise ValueError(f"unknown path {self.path!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TraceRecord:
    iter: int
    f: float
    infeasibility: float
    kkt: float
    rho: float
    delta: float
    accepted: bool
    step: str
    wall: float
    penalty: float = math.nan


@dataclass
class SolverState:
    p: np.ndarray
    gamma: dict
    delta: float
    iter: int = 0
    status: str = MAX_ITER
    f: float = math.nan
    c: np.ndarray = None
    residuals: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    config: SolverConfig = None

    @property
    def converged(self):
        return self.status == CONVERGED

    def to_dict(self):
        return {
            "status": self.status,
            "iterations": self.iter,
            "p": self.p.tolist(),
            "f": self.f,
            "c": None if self.c is None else np.asarray(self.c).tolist(),
            "gamma": {k: np.asarray(v).tolist() for k, v in self.gamma.items()},
            "residuals": dict(self.residuals),
            "trace": [asdict(t) for t in self.trace],
            "config": None if self.config is None else self.config.to_dict(),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


# ---------------------------------------------------------------------------
# Small pieces


def tr_update(rho, delta, step_norm, cfg):
    on_boundary = step_norm >= (1.0 - 1e-8) * delta
    if rho < 0.25:
        return delta * cfg.shrink
    if rho > 0.75 and on_boundary:
        return min(delta * cfg.expand, cfg.delta_max)
    return delta


def violation(inst, c, p):
    """l1 norm of constraint violation, bounds included."""
    v = float(np.sum(np.maximum(c, 0.0)))
    v += float(np.sum(np.maximum(inst.p_lower - p, 0.0)) + np.sum(np.maximum(p - inst.p_upper, 0.0)))
    return v


def merit(inst, scen, p, penalty):
    flows = ev.eval_flows(inst, scen, p)
    f = ev.eval_objective(inst, scen, flows)
    c = ev.eval_constraint(inst, scen, flows)
    return f + penalty * violation(inst, c, p)


def _range_basis(A, rtol=1e-10):
    """Orthonormal basis of the row space of ``A``."""
    if A.shape[0] == 0:
        return np.zeros((A.shape[1], 0))
    U, s, _ = np.linalg.svd(A.T, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((A.shape[1], 0))
    return U[:, s > rtol * s[0]]


def _to_boundary(t, d, radius):
    """``tau >= 0`` with ``||t + tau d|| = radius``."""
    a = d @ d
    b = 2.0 * (t @ d)
    c = t @ t - radius * radius
    disc = max(b * b - 4 * a * c, 0.0)
    return (-b + math.sqrt(disc)) / (2 * a)


def _steihaug(g, hess_apply, project, radius, rtol, max_iter):
    """Projected CG on ``g.t + t.H t / 2`` with ``||t|| <= radius``.

    Returns ``(t, on_boundary, negative_curvature)``.
    """
    n = g.size
    t = np.zeros(n)
    r = project(g)
    r0 = math.sqrt(r @ r)
    if r0 == 0.0 or radius <= 0.0:
        return t, False, False
    d = -r
    rr = r @ r
    for _ in range(max_iter):
        Hd = hess_apply(d)
        curv = d @ Hd
        if curv <= 1e-14 * (d @ d) * max(1.0, abs(curv) / max(d @ d, 1e-300)):
            return t + _to_boundary(t, d, radius) * d, True, True
        alpha = rr / curv
        t_next = t + alpha * d
        if math.sqrt(t_next @ t_next) >= radius:
            return t + _to_boundary(t, d, radius) * d, True, False
        t = t_next
        r = project(r + alpha * Hd)
        rr_new = r @ r
        if math.sqrt(rr_new) <= rtol * r0 or rr_new == 0.0:
            break
        d = project(-r + (rr_new / rr) * d)
        rr = rr_new
    return t, False, False


@dataclass
class QPStep:
    d: np.ndarray
    predicted: float
    multipliers: np.ndarray
    on_boundary: bool
    negative_curvature: bool
    consistent: bool
    tau: float = 0.0

    def __iter__(self):
        return iter((self.d, self.predicted, self.multipliers))


def qp_subproblem(g, hess_apply, Aeq=None, delta=1.0, *, rtol=1e-12, max_cg=None, regularize=False, tau0=1e-8):
    """Approximately minimise ``g.d + d.H d / 2`` s.t. ``A d = b``, ``||d|| <= delta``.

    The linear constraints are handled by a normal step (minimum-norm
    solution of ``A d = b``, shortened to ``0.8 delta`` if needed) followed by
    Steihaug CG in the null space of ``A``.  With ``regularize`` the CG is
    restarted on ``H + tau I``, ``tau`` doubling from ``tau0``, until no
    negative curvature is met.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    if delta <= 0:
        raise ValueError("delta must be positive")
    if Aeq is None:
        A, b = np.zeros((0, n)), np.zeros(0)
    else:
        A, b = np.atleast_2d(np.asarray(Aeq[0], dtype=float)), np.asarray(Aeq[1], dtype=float)
        if A.size == 0:
            A, b = np.zeros((0, n)), np.zeros(0)
    U = _range_basis(A)
    if A.shape[0]:
        dn = np.linalg.lstsq(A, b, rcond=None)[0]
        consistent = bool(np.linalg.norm(A @ dn - b) <= 1e-9 * (1.0 + np.linalg.norm(b)))
    else:
        dn = np.zeros(n)
        consistent = True
    norm_dn = float(np.linalg.norm(dn))
    if norm_dn > 0.8 * delta:
        dn *= 0.8 * delta / norm_dn
        norm_dn = 0.8 * delta

    def project(v):
        return v - U @ (U.T @ v) if U.shape[1] else v

    max_cg = max_cg or 2 * n + 10
    radius = math.sqrt(max(delta * delta - norm_dn * norm_dn, 0.0))
    tau = 0.0
    while True:
        def H(v, tau=tau):
            return project(hess_apply(v) + tau * v)

        gt = g + hess_apply(dn) + tau * dn
        t, on_b, neg = _steihaug(gt, H, project, radius, rtol, max_cg)
        if not (regularize and neg):
            break
        tau = tau0 if tau == 0.0 else 2.0 * tau
        if tau > 1e12:
            break
    d = dn + t
    Hd = hess_apply(d)
    predicted = -(g @ d + 0.5 * (d @ Hd))
    if A.shape[0]:
        y = -np.linalg.lstsq(A.T, g + Hd, rcond=None)[0]
    else:
        y = np.zeros(0)
    on_b = on_b or np.linalg.norm(d) >= (1.0 - 1e-8) * delta
    return QPStep(d, float(predicted), y, bool(on_b), bool(neg), consistent, tau)


# ---------------------------------------------------------------------------
# Working set


@dataclass
class _Point:
    p: np.ndarray
    flows: ev.FlowEvaluation
    f: float
    c: np.ndarray
    g: np.ndarray
    Jc: np.ndarray
    hess: object
    jump: np.ndarray  # (Q x_i - s)_j / N for every entry


def _override(flows, forced):
    """Mark boundary entries in ``forced`` as active."""
    if not forced:
        return flows
    omega = flows.omega.copy()
    for j, i in forced:
        if flows.boundary[j, i]:
            omega[j, i] = True
    return replace(flows, omega=omega, active_counts=omega.sum(axis=1))


def _evaluate(inst, scen, p, cfg, forced=(), derivatives=True):
    flows = ev.eval_flows(inst, scen, p)
    f = ev.eval_objective(inst, scen, flows)
    c = ev.eval_constraint(inst, scen, flows)
    if not derivatives:
        return _Point(p, flows, f, c, None, None, None, None)
    flows = _override(flows, forced)
    if cfg.path == "dense":
        g = ev.grad_f_dense(inst, scen, flows)
        Jc = ev.grad_c(inst, scen, flows, mode="dense")
        Hm = ev.hess_f(inst, scen, flows, mode="dense")
        hess = Hm.__matmul__
    else:
        g = ev.grad_f_sparse(inst, scen, flows)
        Jc = ev.grad_c(inst, scen, flows)
        hess = ev.hess_operator(inst, flows).matvec
    jump = (apply_Q(inst.cost, flows.x) - inst.cost.linear[:, None]) / flows.n_samples
    return _Point(p, flows, f, c, g, Jc, hess, jump)


class _WorkingSet:
    def __init__(self, inst):
        self.fixed = np.zeros(inst.n_routes, dtype=np.int8)  # -1 lower, +1 upper
        self.comm = np.zeros(inst.n_commodities, dtype=bool)
        self.kinks = []  # (j, i, side) with side 0 at y = 0, 1 at y = x_u
        self.forced = set()  # released kink entries modelled on their active side
        self.blocked = set()  # released kink entries kept out of identification



def _kink_rows(inst, pt, ws):
    if not ws.kinks:
        return np.zeros((0, inst.n_routes)), np.zeros(0)
    js = np.array([k[0] for k in ws.kinks])
    rows = inst.B[js]
    Y = pt.flows.y
    rhs = np.array([(inst.x_upper[j] if side else 0.0) - Y[j, i] for j, i, side in ws.kinks])
    return rows, rhs


def _kink_intervals(inst, pt, ws, gamma_c):
    """Clarke interval of each held kink's multiplier for the current commodity multipliers."""
    if not ws.kinks:
        return np.zeros(0), np.zeros(0)
    K = inst.K.toarray()
    a = np.array([pt.jump[j, i] - (gamma_c @ K[:, j]) / pt.flows.n_samples for j, i, _ in ws.kinks])
    return np.minimum(a, 0.0), np.maximum(a, 0.0)


def _multipliers(inst, pt, ws):
    """Least-squares multipliers on the working set plus the KKT residuals.

    Returns ``(gamma, residuals, worst)`` where ``worst`` names the working
    constraint whose multiplier lies farthest outside its admissible set.
    """
    free = ws.fixed == 0
    ci = np.flatnonzero(ws.comm)
    Wk, _ = _kink_rows(inst, pt, ws)
    W = np.vstack([pt.Jc[ci], Wk])
    g = pt.g
    if W.shape[0] and free.any():
        y = -np.linalg.lstsq(W[:, free].T, g[free], rcond=None)[0]
    else:
        y = np.zeros(W.shape[0])
    gamma_c = np.zeros(inst.n_commodities)
    gamma_c[ci] = y[: ci.size]
    mu = y[ci.size:]
    lo, hi = _kink_intervals(inst, pt, ws, np.maximum(gamma_c, 0.0))

    # Raw residual on fixed coordinates gives the bound multipliers.
    r = g + W.T @ y if W.shape[0] else g.copy()
    gamma_l = np.where(ws.fixed == -1, r, 0.0)
    gamma_u = np.where(ws.fixed == 1, -r, 0.0)

    worst, worst_val = None, 0.0
    for k, c in enumerate(ci):
        if -gamma_c[c] > worst_val:
            worst, worst_val = ("comm", c), -gamma_c[c]
    for j in np.flatnonzero(ws.fixed):
        v = -(gamma_l[j] if ws.fixed[j] < 0 else gamma_u[j])
        if v > worst_val:
            worst, worst_val = ("bound", j), v
    bad = [k for k in range(mu.size) if max(lo[k] - mu[k], mu[k] - hi[k]) > 1e-12 * (1.0 + abs(hi[k] - lo[k]))]
    for k in bad:
        v = max(lo[k] - mu[k], mu[k] - hi[k])
        if v > worst_val:
            worst, worst_val = ("kink", tuple(bad)), v

    # Residuals with every multiplier projected onto its admissible set.
    gc = np.maximum(gamma_c, 0.0)
    mk = np.clip(mu, lo, hi)
    yp = np.concatenate([gc[ci], mk])
    r = g + W.T @ yp if W.shape[0] else g.copy()
    gl = np.where(ws.fixed == -1, np.maximum(r, 0.0), 0.0)
    gu = np.where(ws.fixed == 1, np.maximum(-r, 0.0), 0.0)
    stat_vec = r - gl + gu
    stationarity = float(np.linalg.norm(stat_vec)) / (1.0 + float(np.linalg.norm(g)))
    feas = max(float(np.max(pt.c, initial=0.0)), 0.0)
    feas = max(feas, float(np.max(inst.p_lower - pt.p, initial=0.0)), float(np.max(pt.p - inst.p_upper, initial=0.0)))
    slack_l = pt.p - inst.p_lower
    slack_u = inst.p_upper - pt.p
    # Multipliers of infinite bounds are zero; skip them rather than form 0 * inf.
    comp = abs(float(gc @ pt.c)) + float(np.abs(gl * np.where(gl != 0, slack_l, 0.0)).sum()
                                         + np.abs(gu * np.where(gu != 0, slack_u, 0.0)).sum())
    gamma = {"commodity": gc, "lower": gl, "upper": gu, "kink": mk}
    residuals = {"stationarity": stationarity, "feasibility": feas, "complementarity": comp}
    return gamma, residuals, worst


def _blocking(inst, pt, ws, d):
    """Largest fraction of ``d`` keeping bounds and inactive linearised rows.

    Returns ``(alpha, item)``; ``item`` names the blocking constraint or is None.
    """
    alpha, hard = 1.0, None
    p = pt.p
    free = ws.fixed == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.where(free & (d < 0), (inst.p_lower - p) / d, np.inf)
        hi = np.where(free & (d > 0), (inst.p_upper - p) / d, np.inf)
    j = int(np.argmin(np.minimum(lo, hi)))
    a = min(lo[j], hi[j])
    if a < alpha:
        alpha, hard = max(a, 0.0), ("bound", j, -1 if lo[j] <= hi[j] else 1)
    if inst.n_commodities:
        slope = pt.Jc @ d
        for c in np.flatnonzero(~ws.comm):
            if slope[c] > 0 and pt.c[c] < 0:
                a = -pt.c[c] / slope[c]
                if a < alpha:
                    alpha, hard = max(a, 0.0), ("comm", int(c))
    return alpha, hard


class _Line:
    """Merit function along ``p + alpha d``; piecewise quadratic in ``alpha``."""

    def __init__(self, inst, pt, d, penalty):
        self.inst, self.pt, self.d, self.penalty = inst, pt, d, penalty
        self.bd = inst.B @ d
        self.xu = inst.x_upper[:, None]
        self.n = pt.flows.n_samples
        self.ctol = 1e-12 * (1.0 + np.abs(inst.commodity.demand_lower))

    def _state(self, alpha):
        Y = self.pt.flows.y + alpha * self.bd[:, None]
        return Y, np.clip(Y, 0.0, self.xu)

    def constraint(self, alpha):
        _, X = self._state(alpha)
        return self.inst.commodity.demand_lower - self.inst.K @ X.mean(axis=1)

    def slope(self, alpha):
        """Right derivative of the merit at ``alpha``."""
        inst = self.inst
        Y, X = self._state(alpha)
        xu = self.xu
        at0 = np.abs(Y) <= ev.BOUNDARY_RTOL
        atu = np.abs(Y - xu) <= ev.BOUNDARY_RTOL * np.maximum(1.0, xu)
        up = (self.bd > 0)[:, None]
        act = ((Y > 0) & (Y < xu) & ~at0 & ~atu) | (at0 & up) | (atu & ~up & (self.bd < 0)[:, None])
        R = apply_Q(inst.cost, X) - inst.cost.linear[:, None]
        p = self.pt.p + alpha * self.d
        fp = inst.lam * (p @ self.d) + self.bd @ np.where(act, R, 0.0).sum(axis=1) / self.n
        cp = -(inst.K @ (self.bd * act.sum(axis=1))) / self.n
        c = inst.commodity.demand_lower - inst.K @ X.mean(axis=1)
        on = (c > self.ctol) | ((np.abs(c) <= self.ctol) & (cp > 0))
        return float(fp + self.penalty * np.sum(np.where(on, cp, 0.0)))

    def breakpoints(self, lo, hi):
        """Flow kinks and constraint zero crossings inside ``[lo, hi]``."""
        Y0 = self.pt.flows.y
        bd = self.bd[:, None]
        found = []
        with np.errstate(divide="ignore", invalid="ignore"):
            for side, b in ((0, 0.0), (1, self.xu)):
                t = (b - Y0) / bd
                hit = np.isfinite(t) & (t >= lo) & (t <= hi)
                for j, i in zip(*np.nonzero(hit)):
                    found.append((float(t[j, i]), ("kink", int(j), int(i), side)))
        c_lo, c_hi = self.constraint(lo), self.constraint(hi)
        for k in np.flatnonzero((c_lo < 0) != (c_hi < 0)):
            w = c_lo[k] / (c_lo[k] - c_hi[k])
            found.append((lo + w * (hi - lo), ("comm", int(k))))
        return found


def _line_search(line, alpha_max, max_bisect=200):
    """Minimise the merit along the step on ``[0, alpha_max]``.

    Returns ``(alpha, item)``; ``item`` is the kink or constraint the
    minimiser sits on, or None.  Returns ``(0, None)`` if the direction is not
    a descent direction of the merit.
    """
    s_lo = line.slope(0.0)
    if not s_lo < 0:
        return 0.0, None
    s_hi = line.slope(alpha_max)
    if s_hi <= 0:
        return alpha_max, None
    lo, hi = 0.0, alpha_max
    for _ in range(max_bisect):
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
        mid = 0.5 * (lo + hi)
        s_mid = line.slope(mid)
        if s_mid < 0:
            lo, s_lo = mid, s_mid
        else:
            hi, s_hi = mid, s_mid
    found = line.breakpoints(lo, hi)
    if found:
        centre = 0.5 * (lo + hi)
        t, item = min(found, key=lambda f: abs(f[0] - centre))
        return min(max(t, 0.0), alpha_max), item
    # Smooth inside the bracket: the slope is linear there.
    return lo - s_lo * (hi - lo) / (s_hi - s_lo), None


# ---------------------------------------------------------------------------
# Driver


def _finite(pt):
    vals = [pt.f, pt.c]
    if pt.g is not None:
        vals += [pt.g, pt.Jc]
    return all(np.all(np.isfinite(v)) for v in vals)


def solve(inst, scen, cfg=None, p0=None):
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()
    p = inst.p_mid.copy() if p0 is None else np.asarray(p0, dtype=float).copy()
    if p.shape != (inst.n_routes,):
        raise ValueError(f"p0 has shape {p.shape}, expected ({inst.n_routes},)")
    if np.any(p < inst.p_lower) or np.any(p > inst.p_upper):
        raise ValueError("p0 must lie within [p_lower, p_upper]")

    state = SolverState(p=p, gamma={}, delta=cfg.delta0, config=cfg)
    ws = _WorkingSet(inst)
    ws.fixed[p <= inst.p_lower] = -1
    ws.fixed[(p >= inst.p_upper) & (ws.fixed == 0)] = 1

    # Demand above the largest achievable mean flow cannot be met.
    reach = inst.K @ inst.x_upper
    if np.any(inst.commodity.demand_lower > reach + 1e-12 * (1 + np.abs(reach))):
        state.status = INFEASIBLE
        log.info("demand exceeds K x_u; problem is infeasible")
        return state

    pt = _evaluate(inst, scen, p, cfg, ws.forced)
    if not _finite(pt):
        state.status = NUMERICAL_FAILURE
        return state
    ws.comm = pt.c >= -1e-12 * (1.0 + np.abs(inst.commodity.demand_lower))
    # Kink identification radius cap, on the scale of the flows themselves.
    eps_cap = 1e-4 * min(float(np.max(inst.x_upper)), 1.0 + float(np.max(np.abs(pt.flows.y))))
    penalty = cfg.merit_penalty0
    delta = cfg.delta0
    stalled = 0
    # Cheap bound on ||B||_2 for the identification radius.
    b_norm = math.sqrt(np.abs(inst.B).sum(axis=0).max() * np.abs(inst.B).sum(axis=1).max())
    eps = 0.0

    def record(rho, accepted, kind, res):
        state.trace.append(TraceRecord(state.iter, pt.f, violation(inst, pt.c, pt.p), res["stationarity"],
                                       float(rho), delta, bool(accepted), kind,
                                       time.perf_counter() - t_start, penalty))

    while True:
        _identify(inst, pt, ws, eps)
        gamma, res, worst = _multipliers(inst, pt, ws)
        state.p, state.f, state.c, state.gamma, state.residuals = pt.p, pt.f, pt.c, gamma, res
        state.delta = delta
        if (res["stationarity"] <= cfg.tol_kkt and res["feasibility"] <= cfg.tol_kkt
                and res["complementarity"] <= cfg.tol_kkt):
            state.status = CONVERGED
            break
        if state.iter >= cfg.max_iter:
            state.status = MAX_ITER
            break
        state.iter += 1
        penalty = max(penalty, float(np.max(gamma["commodity"], initial=0.0)) + cfg.penalty_margin)

        free = ws.fixed == 0
        ci = np.flatnonzero(ws.comm)
        Wk, rk = _kink_rows(inst, pt, ws)
        A = np.vstack([pt.Jc[ci], Wk])[:, free]
        b = np.concatenate([-pt.c[ci], rk])
        gf = pt.g[free]
        idx = np.flatnonzero(free)
        n = inst.n_routes

        def hess_free(v, idx=idx, hess=pt.hess):
            full = np.zeros(n)
            full[idx] = v
            return hess(full)[idx]

        if idx.size == 0:
            d = np.zeros(n)
            qp = QPStep(np.zeros(0), 0.0, np.zeros(0), False, False, b.size == 0 or np.allclose(b, 0))
        else:
            qp = qp_subproblem(gf, hess_free, (A, b), delta, rtol=cfg.cg_rtol,
                               regularize=cfg.hessian_mode == "regularized", tau0=cfg.tau0)
            d = np.zeros(n)
            d[idx] = qp.d
        step_norm = float(np.linalg.norm(d))
        m0 = pt.f + penalty * violation(inst, pt.c, pt.p)
        lin = pt.c + pt.Jc @ d
        pred_d = -(pt.g @ d + 0.5 * d @ pt.hess(d)) + penalty * (
            float(np.sum(np.maximum(pt.c, 0.0))) - float(np.sum(np.maximum(lin, 0.0))))

        tiny = step_norm <= 1e-13 * (1.0 + float(np.linalg.norm(pt.p))) or pred_d <= 1e-14 * (1.0 + abs(m0))
        if worst is not None and (tiny or pred_d <= 1e-12 * (1.0 + abs(m0))):
            # Stationary on the current face: drop the worst multiplier.
            _release(inst, pt, ws, worst)
            pt = _evaluate(inst, scen, pt.p, cfg, ws.forced)
            record(math.nan, True, "release-" + worst[0], res)
            continue
        if tiny:
            if res["feasibility"] > cfg.tol_kkt and not _release_for_feasibility(inst, pt, ws):
                state.status = INFEASIBLE
                record(math.nan, False, "stall", res)
                break
            stalled += 1
            if ws.kinks:
                ws.blocked.update((j, i) for j, i, _ in ws.kinks)
                ws.kinks.clear()
            elif stalled > 3:
                state.status = NUMERICAL_FAILURE
                record(math.nan, False, "stall", res)
                break
            delta = max(delta, cfg.delta0)
            record(math.nan, False, "stall", res)
            continue
        stalled = 0

        alpha_max, hard = _blocking(inst, pt, ws, d)
        alpha, item = _line_search(_Line(inst, pt, d, penalty), alpha_max)
        if item is None and alpha == alpha_max:
            item = hard
        kind = "full" if item is None else "stop-" + item[0]
        if alpha <= 0.0:
            # Not a descent direction for the merit: the frozen model is wrong here.
            record(-math.inf, False, "reject", res)
            delta = cfg.shrink * min(delta, step_norm)
            continue

        q = pt.p + alpha * d
        q = np.clip(q, inst.p_lower, inst.p_upper)
        q[ws.fixed == -1] = inst.p_lower[ws.fixed == -1]
        q[ws.fixed == 1] = inst.p_upper[ws.fixed == 1]
        if item is not None and item[0] == "bound":
            q[item[1]] = inst.p_lower[item[1]] if item[2] < 0 else inst.p_upper[item[1]]
        step = q - pt.p
        new = _evaluate(inst, scen, q, cfg, ws.forced)
        if not _finite(new):
            state.status = NUMERICAL_FAILURE
            record(math.nan, False, kind, res)
            break
        Hs = pt.hess(step)
        lin = pt.c + pt.Jc @ step
        pred = -(pt.g @ step + 0.5 * step @ Hs) + penalty * (
            float(np.sum(np.maximum(pt.c, 0.0))) - float(np.sum(np.maximum(lin, 0.0))))
        actual = m0 - (new.f + penalty * violation(inst, new.c, q))
        rho = actual / pred if pred > 0 else (1.0 if actual >= 0 else -math.inf)
        accepted = rho >= cfg.eta_accept and actual >= -1e-14 * (1.0 + abs(m0))
        record(rho, accepted, kind, res)
        delta = tr_update(rho, delta, step_norm if alpha == 1.0 else 0.0, cfg)
        if not accepted:
            continue
        if item is not None:
            _add(inst, ws, item)
            if item[0] == "kink":
                new = _evaluate(inst, scen, q, cfg, ws.forced)
        pt = new
        eps = min(eps_cap, 2.0 * b_norm * float(np.linalg.norm(step)))
        _prune(inst, pt, ws, eps)

    state.p = np.clip(pt.p, inst.p_lower, inst.p_upper)
    log.info("solve finished: status=%s iterations=%d f=%.12g", state.status, state.iter, state.f)
    return state


def _add(inst, ws, item):
    if item[0] == "bound":
        ws.fixed[item[1]] = item[2]
    elif item[0] == "comm":
        ws.comm[item[1]] = True
    else:
        ws.kinks.append(tuple(item[1:]))


def _release(inst, pt, ws, worst):
    kind, k = worst
    if kind == "comm":
        ws.comm[k] = False
    elif kind == "bound":
        ws.fixed[k] = 0
    else:
        gone = [ws.kinks[m] for m in k]
        ws.kinks = [kk for m, kk in enumerate(ws.kinks) if m not in set(k)]
        for j, i, side in gone:
            ws.forced.discard((j, i))
            ws.blocked.add((j, i))
            if _prefers_active(inst, pt, ws, j, i, side):
                ws.forced.add((j, i))


def _prefers_active(inst, pt, ws, j, i, side):
    """Whether leaving kink ``(j, i)`` should go to the side where the entry is active."""
    # Directional test: the active side lies along -s * B[j] with s = -1 at y = 0, +1 at y = x_u.
    s = -1.0 if side == 0 else 1.0
    u = -s * inst.B[j]
    free = ws.fixed == 0
    u = np.where(free, u, 0.0)
    jump = pt.jump[j, i]
    g_active = pt.g + jump * inst.B[j]
    return g_active @ u < 0 <= pt.g @ (-u)


def _release_for_feasibility(inst, pt, ws):
    """Free kinks and bounds that block reducing the constraint violation."""
    grad = pt.Jc.T @ np.maximum(pt.c, 0.0)
    changed = bool(ws.kinks)
    ws.blocked.update((j, i) for j, i, _ in ws.kinks)
    ws.kinks.clear()
    for j in np.flatnonzero(ws.fixed):
        if ws.fixed[j] < 0 and grad[j] < 0 or ws.fixed[j] > 0 and grad[j] > 0:
            ws.fixed[j] = 0
            changed = True
    if not changed and not ws.comm[pt.c > 0].all():
        ws.comm[pt.c > 0] = True
        changed = True
    return changed


def _prune(inst, pt, ws, eps):
    """Forget forced entries that have left the boundary, unblock distant ones."""
    ws.forced = {(j, i) for j, i in ws.forced if pt.flows.boundary[j, i]}
    if ws.blocked:
        dist = _kink_distance(inst, pt.flows.y)
        ws.blocked = {(j, i) for j, i in ws.blocked if dist[j, i] <= eps}


def _kink_distance(inst, Y):
    return np.minimum(np.abs(Y), np.abs(Y - inst.x_upper[:, None]))


def _identify(inst, pt, ws, eps):
    """Add kinks lying within ``eps`` of the iterate to the working set.

    Kinks of one route are parallel, so at most one per route is held; rows
    dependent on the current working set are skipped.
    """
    if eps <= 0:
        return 0
    Y = pt.flows.y
    dist = _kink_distance(inst, Y)
    near = dist <= eps
    if not near.any():
        return 0
    held_routes = {j for j, _, _ in ws.kinks}
    side = (np.abs(Y - inst.x_upper[:, None]) < np.abs(Y)).astype(int)
    cand = {}
    for j, i in zip(*np.nonzero(near)):
        j, i = int(j), int(i)
        if j in held_routes or (j, i) in ws.blocked:
            continue
        if j not in cand or dist[j, i] < dist[j, cand[j]]:
            cand[j] = i
    if not cand:
        return 0
    free = ws.fixed == 0
    js = np.array(sorted(cand, key=lambda j: dist[j, cand[j]]))
    C = inst.B[js][:, free]
    ci = np.flatnonzero(ws.comm)
    W0 = np.vstack([pt.Jc[ci][:, free], inst.B[[j for j, _, _ in ws.kinks]][:, free]])
    U = _range_basis(W0)
    if U.shape[1]:
        C = C - (C @ U) @ U.T
    if C.shape[1] == 0:
        return 0
    _, R, piv = scipy.linalg.qr(C.T, mode="economic", pivoting=True)
    scale = np.linalg.norm(inst.B[js][:, free], axis=1)
    diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
    added = 0
    for k, pk in enumerate(piv[: diag.size]):
        if diag[k] > 1e-8 * scale[pk]:
            j = int(js[pk])
            ws.kinks.append((j, cand[j], int(side[j, cand[j]])))
            added += 1
    return added
