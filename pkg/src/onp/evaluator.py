"""Sample-average objective, constraint and their derivatives.

For a price vector ``p`` and scenarios ``Xi`` the pre-projection flows are
``Y = B p 1^T + Xi`` and the flows ``X = clip(Y, 0, x_u)``.  ``Omega`` marks
entries strictly inside ``(0, x_u)``; it is the almost-sure Jacobian of the
projection.  Entries within ``BOUNDARY_RTOL`` of a bound are treated as
inactive.

Two implementations are provided for every derivative: a ``dense`` path that
materialises ``Q`` and loops over samples, and a ``sparse`` path that works
through the scaled assignment matrix and the active sets.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .errors import CapabilityError, DimensionError
from .problem import quad_form

log = logging.getLogger(__name__)

BOUNDARY_RTOL = 1e-12
DENSE_CAP = 256


@dataclass(frozen=True)
class FlowEvaluation:
    p: np.ndarray
    y: np.ndarray
    x: np.ndarray
    omega: np.ndarray
    boundary: np.ndarray
    active_counts: np.ndarray

    @property
    def n_samples(self):
        return self.y.shape[1]

    @cached_property
    def active_sets(self):
        """Per sample, the sorted route indices with ``0 < y < x_u``."""
        return [np.flatnonzero(self.omega[:, i]) for i in range(self.n_samples)]

    @cached_property
    def omega_csc(self):
        return sp.csc_matrix(self.omega, dtype=float)

    @property
    def n_boundary(self):
        return int(self.boundary.sum())


def eval_flows(inst, scen, p):
    p = np.asarray(p, dtype=float)
    if p.shape != (inst.n_routes,):
        raise DimensionError(f"p has shape {p.shape}, expected ({inst.n_routes},)")
    if scen.xi.shape[0] != inst.n_routes:
        raise DimensionError("scenario dimension disagrees with the instance")
    xu = inst.x_upper[:, None]
    Y = (inst.B @ p)[:, None] + scen.xi
    X = np.clip(Y, 0.0, xu)
    boundary = (np.abs(Y) <= BOUNDARY_RTOL) | (np.abs(Y - xu) <= BOUNDARY_RTOL * np.maximum(1.0, xu))
    omega = (Y > 0.0) & (Y < xu) & ~boundary
    n_b = int(boundary.sum())
    if n_b:
        log.debug("%d flow entries sit on a projection boundary; treated as inactive", n_b)
    return FlowEvaluation(p, Y, X, omega, boundary, omega.sum(axis=1))


def eval_objective(inst, scen, flows, p=None):
    p = flows.p if p is None else np.asarray(p, dtype=float)
    X = flows.x
    per_sample = 0.5 * quad_form(inst.cost, X) - inst.cost.linear @ X
    return 0.5 * inst.lam * float(p @ p) + float(np.mean(per_sample))


def eval_constraint(inst, scen, flows):
    return inst.commodity.demand_lower - inst.K @ flows.x.mean(axis=1)


# ---------------------------------------------------------------------------
# Dense path


def dense_q(inst):
    """Materialised ``Q``; cached on the instance.  Only for the dense path."""
    cache = inst.__dict__.get("_dense_q")
    if cache is None:
        At = inst.cost.scaled_assignment.toarray()
        cache = 2.0 * At @ At.T
        object.__setattr__(inst, "_dense_q", cache)
    return cache


def grad_f_dense(inst, scen, flows, p=None):
    p = flows.p if p is None else np.asarray(p, dtype=float)
    Q = dense_q(inst)
    s = inst.cost.linear
    acc = np.zeros(inst.n_routes)
    for i in range(flows.n_samples):
        x = flows.x[:, i]
        acc += inst.B.T @ (flows.omega[:, i] * (Q @ x - s))
    return inst.lam * p + acc / flows.n_samples


def grad_c_dense(inst, scen, flows):
    Kd = inst.K.toarray()
    jac_sum = np.zeros((inst.n_routes, inst.n_routes))
    for i in range(flows.n_samples):
        jac_sum += flows.omega[:, i][:, None] * inst.B
    return -Kd @ jac_sum / flows.n_samples


def _hess_inner_dense(inst, flows):
    Q = dense_q(inst)
    H = np.zeros_like(Q)
    for i in range(flows.n_samples):
        w = flows.omega[:, i].astype(float)
        H += w[:, None] * Q * w[None, :]
    return H


# ---------------------------------------------------------------------------
# Sparse path


def grad_f_sparse(inst, scen, flows, p=None):
    """Gradient through the scaled assignment matrix.

    For every sample at once: ``u = At^T x`` over the support of ``x``,
    ``w = At u``, residual ``2 w - s`` kept on the active rows only, then one
    dense product with ``B^T``.  Saturated entries (``x = x_u``) enter ``u``
    because they are part of ``x``; they are dropped from the residual.
    """
    p = flows.p if p is None else np.asarray(p, dtype=float)
    At = inst.cost.scaled_assignment
    U = At.T @ flows.x
    W = At @ U
    M = np.where(flows.omega, 2.0 * W - inst.cost.linear[:, None], 0.0)
    return inst.lam * p + inst.B.T @ M.sum(axis=1) / flows.n_samples


def grad_c(inst, scen, flows, mode="sparse"):
    """Constraint Jacobian ``-(1/N) K diag(d) B``."""
    if mode == "dense":
        return grad_c_dense(inst, scen, flows)
    K = inst.K.tocoo()
    scaled = sp.csr_matrix((K.data * flows.active_counts[K.col], (K.row, K.col)), shape=K.shape)
    return -np.asarray(scaled @ inst.B) / flows.n_samples


def sparse_q(inst):
    """``Q = 2 At At^T`` kept sparse: nonzero only for routes sharing an edge.

    Used only to carry the sparsity pattern into the Hessian; cached.
    """
    cache = inst.__dict__.get("_sparse_q")
    if cache is None:
        At = inst.cost.scaled_assignment
        cache = (2.0 * (At @ At.T)).tocoo()
        object.__setattr__(inst, "_sparse_q", cache)
    return cache


def hess_inner_sparse(inst, flows):
    """``sum_i Q[S_i, S_i]`` scattered into an ``|R| x |R|`` sparse matrix.

    Entry ``(j, k)`` collects ``Q[j, k]`` once for every sample in which both
    routes are active, i.e. the sum equals ``Q o (Omega Omega^T)``.  Only the
    nonzeros of ``Q`` are visited.
    """
    Q = sparse_q(inst)
    Om = flows.omega.astype(float)
    if Q.nnz > 0.25 * Om.shape[0] ** 2:
        counts = (Om @ Om.T)[Q.row, Q.col]
    else:
        counts = np.einsum("ij,ij->i", Om[Q.row], Om[Q.col])
    return sp.csr_matrix((Q.data * counts, (Q.row, Q.col)), shape=Q.shape)


def hess_f(inst, scen, flows, mode="sparse"):
    if mode == "dense":
        H_inner = _hess_inner_dense(inst, flows)
        BtHB = inst.B.T @ H_inner @ inst.B
    elif mode == "sparse":
        H_inner = hess_inner_sparse(inst, flows)
        BtHB = inst.B.T @ np.asarray(H_inner @ inst.B)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    H = inst.lam * np.eye(inst.n_routes) + BtHB / flows.n_samples
    return 0.5 * (H + H.T)


def hess_operator(inst, flows):
    """Hessian of ``f_N`` as a matrix-free operator.

    Each product costs ``O(nnz(A) N + |R|^2)``: the inner sum is applied as
    ``2 * Omega o (At At^T (Omega o v))`` without forming it.
    """
    At = inst.cost.scaled_assignment
    B = inst.B
    Om = flows.omega
    n = flows.n_samples
    lam = inst.lam

    def matvec(v):
        v = np.asarray(v, dtype=float).reshape(-1)
        z = B @ v
        V = np.where(Om, z[:, None], 0.0)
        W = 2.0 * (At @ (At.T @ V))
        return lam * v + B.T @ np.where(Om, W, 0.0).sum(axis=1) / n

    r = inst.n_routes
    return LinearOperator((r, r), matvec=matvec, rmatvec=matvec, dtype=float)


class ZeroHessian:
    """Symbolic zero: the constraint curvature vanishes almost surely."""

    def __repr__(self):
        return "ZeroHessian()"

    def __matmul__(self, v):
        return np.zeros_like(np.asarray(v, dtype=float))

    def toarray(self, n):
        return np.zeros((n, n))


ZERO_HESSIAN = ZeroHessian()


def hess_c(inst=None):
    return ZERO_HESSIAN


# ---------------------------------------------------------------------------
# Diagnostics


def curvature_bound(Q, B):
    """``lambda_min(Q) * sigma_min(B)^2`` for a symmetric ``Q``."""
    lam_min = float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[0])
    sig_min = float(np.linalg.svd(B, compute_uv=False)[-1])
    return lam_min * sig_min**2


def convexity_threshold(inst, scen=None, cap=DENSE_CAP):
    if inst.n_routes > cap:
        raise CapabilityError(
            f"|R|={inst.n_routes} exceeds the dense cap {cap}; use the dense oracle on a smaller instance"
        )
    return curvature_bound(dense_q(inst), inst.B)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    objective: float
    constraint: np.ndarray
    gradient: np.ndarray
    constraint_jacobian: np.ndarray
    hessian: np.ndarray = None
    path: str = "sparse"
    timing: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "path": self.path,
            "objective": self.objective,
            "constraint": np.asarray(self.constraint).tolist(),
            "gradient_norm": float(np.linalg.norm(self.gradient)),
            "timing": dict(self.timing),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def evaluate(inst, scen, p, path="sparse", hessian=False):
    if path not in ("dense", "sparse"):
        raise ValueError(f"unknown path {path!r}")
    timing = {}
    t = time.perf_counter()
    flows = eval_flows(inst, scen, p)
    timing["flows"] = time.perf_counter() - t

    t = time.perf_counter()
    f = eval_objective(inst, scen, flows)
    c = eval_constraint(inst, scen, flows)
    timing["values"] = time.perf_counter() - t

    t = time.perf_counter()
    g = grad_f_dense(inst, scen, flows) if path == "dense" else grad_f_sparse(inst, scen, flows)
    timing["gradient"] = time.perf_counter() - t

    t = time.perf_counter()
    J = grad_c(inst, scen, flows, mode=path)
    timing["constraint_jacobian"] = time.perf_counter() - t

    H = None
    if hessian:
        t = time.perf_counter()
        H = hess_f(inst, scen, flows, mode=path)
        timing["hessian"] = time.perf_counter() - t
    return EvalReport(f, c, g, J, H, path, timing)
