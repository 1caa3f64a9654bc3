"""Cost, elasticity and noise coefficients of the pricing problem.

The quadratic cost matrix is ``Q = 2 * A diag(coe) A^T``.  It is never formed
here: ``CostModel.scaled_assignment`` holds ``A diag(sqrt(coe))`` and
:func:`apply_Q` multiplies through it.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtri

from . import network as nw
from .errors import DimensionError, DomainError, ModelError

SCHEMA_VERSION = 1

# Defaults for synthetic instances.
DEFAULT_LAMBDA = 1.0
DEFAULT_P_UPPER = 10.0
DEFAULT_X_UPPER = 1.0
DEFAULT_EPS_FRACTION = 0.5
DEFAULT_NOISE_SCALE = 0.25


@dataclass(frozen=True)
class CostModel:
    coe: np.ndarray
    offset: np.ndarray
    scaled_assignment: sp.csr_matrix
    linear: np.ndarray

    @property
    def n_routes(self):
        return self.scaled_assignment.shape[0]


def build_cost(routes, coe, offset):
    A = routes.assignment if isinstance(routes, nw.RouteSet) else sp.csr_matrix(routes)
    m = A.shape[1]
    coe = np.asarray(coe, dtype=float).reshape(-1)
    offset = np.asarray(offset, dtype=float).reshape(-1)
    if coe.shape != (m,) or offset.shape != (m,):
        raise DimensionError(f"cost vectors must have length |E|={m}, got {coe.size} and {offset.size}")
    if np.any(coe < 0) or np.any(offset < 0):
        raise DomainError("edge cost coefficients must be nonnegative")
    At = sp.csr_matrix(A @ sp.diags(np.sqrt(coe)))
    At.sort_indices()
    s = -np.asarray(A @ offset).reshape(-1)
    return CostModel(coe, offset, At, s)


def apply_Q(cost, X):
    """Return ``Q @ X`` as ``2 * At (At^T X)``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] != cost.n_routes:
        raise DimensionError(f"expected {cost.n_routes} rows, got {X.shape[0]}")
    At = cost.scaled_assignment
    return 2.0 * (At @ (At.T @ X))


def quad_form(cost, X):
    """Per-column ``<Q x, x>`` computed as ``2 ||At^T x||^2``."""
    U = cost.scaled_assignment.T @ np.asarray(X, dtype=float)
    return 2.0 * np.sum(U * U, axis=0)


# ---------------------------------------------------------------------------
# Elasticity and noise


@dataclass(frozen=True)
class ElasticityModel:
    """Price response ``B`` and the Gaussian noise ``N(mu, L L^T)``.

    ``sigma_factor`` is either a full factor ``L`` or a vector, read as a
    diagonal factor.
    """

    B: np.ndarray
    mu: np.ndarray
    sigma_factor: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        r = B.shape[0]
        if B.shape != (r, r):
            raise DimensionError(f"B must be square, got {B.shape}")
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        L = np.asarray(self.sigma_factor, dtype=float)
        if mu.shape != (r,):
            raise DimensionError(f"mu has length {mu.size}, expected {r}")
        if L.ndim == 1 and L.shape != (r,) or L.ndim == 2 and L.shape[0] != r or L.ndim > 2:
            raise DimensionError(f"sigma factor has shape {L.shape}, expected ({r},) or ({r}, k)")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma_factor", L)

    @property
    def n_routes(self):
        return self.B.shape[0]

    def covariance(self):
        L = self.sigma_factor
        if L.ndim == 1:
            return np.diag(L * L)
        return L @ L.T


def factor_covariance(sigma, tol=1e-10):
    """Symmetric factor of a PSD matrix; eigenvalues below ``tol`` are clamped to 0."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionError("covariance must be square")
    w, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if np.any(w < -tol * scale * 1e4):
        raise DomainError(f"covariance is not positive semi-definite (min eigenvalue {w.min():.3e})")
    w = np.where(w > tol * scale, w, 0.0)
    return V * np.sqrt(w)


def gen_elasticity(r, eps_fraction=DEFAULT_EPS_FRACTION, seed=0):
    """Return ``B = -I + eps * M`` with ``M = zero_diagonal(S S^T)``, ``S ~ U[0,1]``.

    ``eps = eps_fraction / lambda_max(M)`` so the symmetric part of B has all
    eigenvalues at most ``eps_fraction - 1``.
    """
    if r < 1:
        raise ValueError("r must be positive")
    if not 0 < eps_fraction < 1:
        raise ValueError("eps_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    S = rng.uniform(0.0, 1.0, size=(r, r))
    M = S @ S.T
    np.fill_diagonal(M, 0.0)
    M = 0.5 * (M + M.T)
    lam_max = float(np.linalg.eigvalsh(M)[-1]) if r > 1 else 0.0
    B = -np.eye(r)
    if lam_max > 0:
        B += (eps_fraction / lam_max) * M
    return B


@dataclass(frozen=True)
class ScenarioSet:
    xi: np.ndarray
    seed: int
    count: int

    def __post_init__(self):
        if self.xi.shape[1] != self.count:
            raise DimensionError("column count of xi must equal count")


def _blocks_per_column(r):
    return (r + 3) // 4


def _standard_normal_columns(seed, r, start, stop):
    """Columns ``start..stop-1`` of the counter-keyed normal stream.

    Column ``i`` consumes Philox counter blocks ``[i*b, (i+1)*b)`` with
    ``b = ceil(r/4)`` under key ``seed``, mapped to normals by inverse CDF.
    """
    b = _blocks_per_column(r)
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1))
    if start:
        bitgen.advance(start * b)
    raw = bitgen.random_raw((stop - start) * 4 * b).reshape(stop - start, 4 * b)[:, :r]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u).T


def standard_normal_block(seed, r, n):
    return _standard_normal_columns(seed, r, 0, n)


def _noise_dim(model):
    L = model.sigma_factor
    return L.shape[1] if L.ndim == 2 else L.shape[0]


def _shift_scale(model, Z):
    L = model.sigma_factor
    return model.mu[:, None] + (L[:, None] * Z if L.ndim == 1 else L @ Z)


def scenario_column(model, seed, i):
    """Scenario ``i`` alone, without generating the ones before it."""
    Z = _standard_normal_columns(seed, _noise_dim(model), i, i + 1)
    return _shift_scale(model, Z)[:, 0]


def sample_scenarios(model, n, seed):
    if n < 1:
        raise ValueError("need at least one scenario")
    Z = standard_normal_block(seed, _noise_dim(model), n)
    return ScenarioSet(np.ascontiguousarray(_shift_scale(model, Z)), int(seed), int(n))


# ---------------------------------------------------------------------------
# Instances


@dataclass(frozen=True)
class ProblemInstance:
    network: nw.Network
    routes: nw.RouteSet
    commodity: nw.CommoditySpec
    cost: CostModel
    elasticity: ElasticityModel
    lam: float
    p_lower: np.ndarray
    p_upper: np.ndarray
    x_upper: np.ndarray
    manifest: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        r = self.routes.n_routes
        for name in ("p_lower", "p_upper", "x_upper"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (r,)).copy()
            object.__setattr__(self, name, v)
        if self.cost.n_routes != r or self.elasticity.n_routes != r:
            raise DimensionError("cost / elasticity dimensions disagree with the route set")
        if self.cost.scaled_assignment.shape[1] != self.network.edge_count:
            raise DimensionError("cost model edge count disagrees with the network")
        if self.commodity.matrix.shape[1] != r:
            raise DimensionError("commodity matrix column count disagrees with the route set")
        if self.lam < 0:
            raise DomainError("lambda must be nonnegative")
        if np.any(self.p_lower > self.p_upper):
            raise DomainError("p_lower must not exceed p_upper")
        if np.any(self.x_upper <= 0):
            raise DomainError("x_upper must be positive")

    @property
    def n_routes(self):
        return self.routes.n_routes

    @property
    def n_edges(self):
        return self.network.edge_count

    @property
    def n_commodities(self):
        return self.commodity.n_commodities

    @property
    def B(self):
        return self.elasticity.B

    @property
    def K(self):
        return self.commodity.matrix

    @property
    def p_mid(self):
        """Box midpoint; coordinates with an infinite side fall back to ``clip(0)``."""
        with np.errstate(invalid="ignore"):
            mid = 0.5 * (self.p_lower + self.p_upper)
        return np.where(np.isfinite(mid), mid, np.clip(0.0, self.p_lower, self.p_upper))

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


def centred_mu(B, p_lower, p_upper, x_upper):
    """Noise mean putting the mean pre-projection flow at ``x_u/2`` when p is the box midpoint."""
    return -B @ (0.5 * (p_lower + p_upper)) + 0.5 * x_upper


def assemble_instance(net, routes, commodity, coe, offset, *, lam=DEFAULT_LAMBDA, p_lower=0.0,
                      p_upper=DEFAULT_P_UPPER, x_upper=DEFAULT_X_UPPER, eps_fraction=DEFAULT_EPS_FRACTION,
                      noise_scale=DEFAULT_NOISE_SCALE, seed=0, mean="centred", manifest=None):
    """Build an instance with generated ``B`` and Gaussian noise.

    ``mean="centred"`` puts the mean pre-projection flow at ``x_u/2`` at the
    box midpoint.  ``mean="balanced"`` uses :func:`balanced_mu` instead and
    recentres the price box, keeping its width, on the smooth minimiser.
    """
    r = routes.n_routes
    pl = np.broadcast_to(np.asarray(p_lower, float), (r,)).copy()
    pu = np.broadcast_to(np.asarray(p_upper, float), (r,)).copy()
    xu = np.broadcast_to(np.asarray(x_upper, float), (r,)).copy()
    B = gen_elasticity(r, eps_fraction, seed)
    cost = build_cost(routes, coe, offset)
    if mean == "centred":
        mu = centred_mu(B, pl, pu, xu)
    elif mean == "balanced":
        mu, p_t = balanced_mu(B, cost, lam, 0.5 * xu)
        half = 0.5 * (pu - pl)
        pl, pu = p_t - half, p_t + half
    else:
        raise ValueError(f"unknown mean rule {mean!r}")
    el = ElasticityModel(B, mu, noise_scale * xu)
    return ProblemInstance(net, routes, commodity, cost, el, float(lam), pl, pu, xu, manifest or {})


def toy_costs(n_edges):
    return np.ones(n_edges), np.full(n_edges, 0.5)


TOY_NOISE_SCALE = 0.05
TOY_DEMAND_MARGIN = 0.1
TOY_PRICE_HALF_WIDTH = 10.0


def balanced_mu(B, cost, lam, x_target):
    """Noise mean whose smooth-model minimiser has mean flow ``x_target``.

    With every flow entry strictly inside ``(0, x_u)`` the objective is the
    quadratic ``lam/2 |p|^2 + E[x.Qx/2 - s.x]`` with ``x = B p + zeta``; its
    stationary point is ``p_t = -B^T (Q x_t - s) / lam``.  Returns
    ``(mu, p_t)`` with ``mu = x_t - B p_t``.
    """
    x_target = np.asarray(x_target, dtype=float)
    p_t = -B.T @ (apply_Q(cost, x_target) - cost.linear) / lam
    return x_target - B @ p_t, p_t


def gen_toy_instance(seed=0, demand_margin=TOY_DEMAND_MARGIN, noise_scale=TOY_NOISE_SCALE):
    """Four-node, sixteen-route verification instance with two commodities.

    Commodities (1, 3) and (2, 3) are served only by routes 2 and 5 (1-based),
    as in the route table of the fixture.  The noise mean puts the
    unconstrained minimiser at mean flow ``x_u/2`` and the demand asks for
    ``demand_margin`` more than that, so both commodity rows bind.  The price
    box is centred on that minimiser with half-width ``TOY_PRICE_HALF_WIDTH``,
    so the midpoint start sits where, with the small default noise, no flow
    entry is clipped.
    """
    net = nw.toy4_network()
    routes = nw.toy4_routes(net)
    coe, offset = toy_costs(net.edge_count)
    cost = build_cost(routes, coe, offset)
    r = routes.n_routes
    xu = np.full(r, DEFAULT_X_UPPER)
    B = gen_elasticity(r, DEFAULT_EPS_FRACTION, seed)
    mu, p_t = balanced_mu(B, cost, DEFAULT_LAMBDA, 0.5 * xu)
    p_lower, p_upper = p_t - TOY_PRICE_HALF_WIDTH, p_t + TOY_PRICE_HALF_WIDTH
    demand = 0.5 * DEFAULT_X_UPPER + demand_margin
    commodity = nw.build_commodity(routes, [(0, 2), (1, 2)], [[1], [4]], [demand, demand])
    manifest = {
        "generator": "toy4",
        "seed": int(seed),
        "demand_margin": float(demand_margin),
        "noise_scale": float(noise_scale),
        "coe": coe.tolist(),
        "offset": offset.tolist(),
        "lambda": DEFAULT_LAMBDA,
        "price_half_width": TOY_PRICE_HALF_WIDTH,
        "x_upper": DEFAULT_X_UPPER,
        "eps_fraction": DEFAULT_EPS_FRACTION,
    }
    el = ElasticityModel(B, mu, noise_scale * xu)
    return ProblemInstance(net, routes, commodity, cost, el, DEFAULT_LAMBDA, p_lower, p_upper, xu,
                           manifest)


def gen_scalar_instance(lam=1.0, q=0.0, s=1.0, b=-1.0, x_upper=0.5, mu=0.0, sigma=0.0,
                        p_lower=-1.0, p_upper=1.0, demand=None):
    """One route on a two-node loop: ``f(p) = lam/2 p^2 + E[q/2 x^2 - s x]``, ``x = clip(b p + zeta)``.

    With the defaults and ``zeta = 0`` this is the classic nonconvex
    one-dimensional example ``lam/2 p^2 - min(0.5, max(0, -p))``.  ``s > 0``
    has no edge-offset realisation (it would need a negative offset), so the
    cost model is assembled directly with ``offset = -s`` on the single edge.
    ``demand`` adds one commodity row ``x >= demand``.
    """
    if q < 0:
        raise DomainError("q must be nonnegative")
    net = nw.make_network(2, [(0, 1), (1, 0)])
    routes = nw.make_route_set(net, [[0]])
    coe = np.array([0.5 * q, 0.0])
    offset = np.array([-float(s), 0.0])
    At = sp.csr_matrix(np.array([[math.sqrt(0.5 * q), 0.0]]))
    At.sort_indices()
    cost = CostModel(coe, offset, At, np.array([float(s)]))
    if demand is None:
        commodity = nw.build_commodity(routes, [])
    else:
        commodity = nw.build_commodity(routes, [(0, 1)], demand_lower=[demand])
    el = ElasticityModel(np.array([[float(b)]]), np.array([float(mu)]), np.array([float(sigma)]))
    manifest = {
        "generator": "scalar", "lambda": float(lam), "q": float(q), "s": float(s), "b": float(b),
        "x_upper": float(x_upper), "mu": float(mu), "sigma": float(sigma),
        "p_lower": float(p_lower), "p_upper": float(p_upper), "demand": demand,
    }
    return ProblemInstance(net, routes, commodity, cost, el, float(lam), p_lower, p_upper, x_upper, manifest)


def random_network(n_edges, rng):
    """Random strongly connected digraph: a Hamiltonian cycle plus random chords."""
    v = 3
    while v * (v - 1) < 1.25 * n_edges:
        v += 1
    if n_edges < v:
        v = max(2, n_edges)
    order = rng.permutation(v)
    edges = [(int(order[i]), int(order[(i + 1) % v])) for i in range(v)]
    if v == 2:
        edges = [(0, 1), (1, 0)]
    present = set(edges)
    others = [(a, b) for a in range(v) for b in range(v) if a != b and (a, b) not in present]
    pick = rng.permutation(len(others))[: max(0, n_edges - len(edges))]
    edges += [others[i] for i in sorted(pick)]
    return nw.make_network(v, edges)


MIN_RANDOM_EDGES = 6


def gen_random_instance(n_routes, n_edges=None, n_commodities=2, seed=0, demand_fraction=0.5,
                        max_length=None, mean="centred", noise_scale=DEFAULT_NOISE_SCALE):
    """Synthetic instance with ``n_routes`` routes on a random network of ``n_routes/5`` edges.

    For small ``n_routes`` that ratio leaves too few simple paths, so when
    ``n_edges`` is not given the edge count starts at ``MIN_RANDOM_EDGES``
    and grows until the routes fit.
    """
    if n_edges is None:
        e = max(MIN_RANDOM_EDGES, n_routes // 5)
        while True:
            try:
                return gen_random_instance(n_routes, e, n_commodities, seed, demand_fraction, max_length,
                                           mean, noise_scale)
            except ModelError:
                if e >= 4 * max(MIN_RANDOM_EDGES, n_routes // 5):
                    raise
                e += 1
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        net = random_network(n_edges, rng)
        pairs = [(a, b) for a in range(net.node_count) for b in range(net.node_count) if a != b]
        order = rng.permutation(len(pairs))
        per_pair = max(1, math.ceil(2 * n_routes / len(pairs)))
        L = max_length or net.node_count - 1
        routes = []
        used_pairs = []
        for k in order:
            found = nw.k_shortest_simple_paths(net, *pairs[k], per_pair, L)
            take = found[: n_routes - len(routes)]
            if take:
                routes += take
                used_pairs.append(pairs[k])
            if len(routes) == n_routes:
                break
        if len(routes) == n_routes and len(used_pairs) >= n_commodities:
            break
    else:
        raise ModelError(f"could not build {n_routes} routes on {n_edges} edges")
    rs = nw.make_route_set(net, routes)
    com_pairs = used_pairs[:n_commodities]
    K = nw.build_commodity(rs, com_pairs).matrix
    # Mean flow at the box midpoint is about x_u/2 per route by construction of mu.
    demand = demand_fraction * np.asarray(K.sum(axis=1)).reshape(-1) * 0.5 * DEFAULT_X_UPPER
    commodity = nw.build_commodity(rs, com_pairs, demand_lower=demand)
    coe, offset = random_costs(net.edge_count, rng)
    manifest = {
        "generator": "random",
        "routes": int(n_routes),
        "edges": int(n_edges),
        "commodities": int(n_commodities),
        "seed": int(seed),
        "demand_fraction": float(demand_fraction),
        "mean": mean,
        "noise_scale": float(noise_scale),
    }
    return assemble_instance(net, rs, commodity, coe, offset, seed=seed, mean=mean,
                             noise_scale=noise_scale, manifest=manifest)


def random_costs(n_edges, rng):
    return rng.uniform(0.5, 1.5, n_edges), rng.uniform(0.0, 1.0, n_edges)


def tntp_costs(net):
    """Edge costs seeded from TNTP attributes.

    ``offset`` is the free-flow time; ``coe`` is the free-flow time divided by
    capacity, rescaled so its mean equals 1.
    """
    ff = np.clip(np.nan_to_num(net.attributes.get("free_flow_time", np.ones(net.edge_count))), 0, None)
    cap = np.nan_to_num(net.attributes.get("capacity", np.ones(net.edge_count)), nan=1.0)
    cap = np.where(cap > 0, cap, 1.0)
    coe = ff / cap
    if coe.mean() > 0:
        coe = coe / coe.mean()
    return np.clip(coe, 0, None), ff


def load_budget(name="siouxfalls"):
    text = resources.files("onp.data").joinpath(f"{name}_budget.json").read_text()
    return json.loads(text)


def sioux_falls_network():
    with resources.files("onp.data").joinpath("SiouxFalls_net.tntp").open("r") as fh:
        return nw.load_tntp(fh)


def gen_tntp_instance(net, pairs, max_per_pair, max_length, commodity_pairs, seed=0,
                      demand_fraction=0.5, cost_scale=None, source=None, mean="centred",
                      noise_scale=DEFAULT_NOISE_SCALE):
    """Instance on a loaded network; commodities use every route of their pair."""
    routes = nw.enumerate_routes(net, pairs, max_per_pair, max_length)
    K = nw.build_commodity(routes, commodity_pairs).matrix
    demand = demand_fraction * np.asarray(K.sum(axis=1)).reshape(-1) * 0.5 * DEFAULT_X_UPPER
    commodity = nw.build_commodity(routes, commodity_pairs, demand_lower=demand)
    coe, offset = tntp_costs(net)
    if cost_scale is None:
        # Keeps route costs O(1) relative to the unit price scale.
        cost_scale = 1.0 / max(1.0, float(np.mean(offset)))
    manifest = {
        "generator": "tntp",
        "network": source,
        "pairs": [list(p) for p in pairs],
        "max_per_pair": int(max_per_pair),
        "max_length": int(max_length),
        "commodity_pairs": [list(p) for p in commodity_pairs],
        "seed": int(seed),
        "demand_fraction": float(demand_fraction),
        "cost_scale": float(cost_scale),
        "mean": mean,
        "noise_scale": float(noise_scale),
    }
    return assemble_instance(net, routes, commodity, coe, offset * cost_scale, seed=seed, mean=mean,
                             noise_scale=noise_scale, manifest=manifest)


SIOUX_NOISE_SCALE = 0.05
SIOUX_DEMAND_FRACTION = 1.1


def gen_sioux_falls_instance(seed=0, demand_fraction=SIOUX_DEMAND_FRACTION, mean="balanced",
                             noise_scale=SIOUX_NOISE_SCALE):
    """Sioux Falls instance under the stored route budget.

    Defaults to the balanced noise mean with small noise, the same smooth
    regime as the toy fixture, and a demand 10% above the mean flow the
    unconstrained minimiser delivers, so both commodity rows bind.
    """
    budget = load_budget("siouxfalls")
    net = sioux_falls_network()
    n = net.node_count
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b][: budget["pair_count"]]
    com = [tuple(p) for p in budget["commodity_pairs"]]
    return gen_tntp_instance(net, pairs, budget["max_per_pair"], budget["max_length"], com, seed=seed,
                             demand_fraction=demand_fraction, source="builtin:SiouxFalls_net.tntp",
                             mean=mean, noise_scale=noise_scale)


# ---------------------------------------------------------------------------
# Manifests


def instance_from_manifest(manifest):
    """Rebuild an instance from the generator parameters stored in its manifest."""
    gen = manifest.get("generator")
    if gen == "toy4":
        return gen_toy_instance(seed=manifest["seed"], demand_margin=manifest["demand_margin"],
                                noise_scale=manifest["noise_scale"])
    if gen == "scalar":
        keys = ("q", "s", "b", "x_upper", "mu", "sigma", "p_lower", "p_upper", "demand")
        return gen_scalar_instance(manifest["lambda"], **{k: manifest[k] for k in keys})
    if gen == "random":
        return gen_random_instance(manifest["routes"], manifest["edges"], manifest["commodities"],
                                   seed=manifest["seed"], demand_fraction=manifest["demand_fraction"],
                                   mean=manifest.get("mean", "centred"),
                                   noise_scale=manifest.get("noise_scale", DEFAULT_NOISE_SCALE))
    if gen == "tntp":
        src = manifest.get("network")
        if src == "builtin:SiouxFalls_net.tntp":
            net = sioux_falls_network()
        else:
            with open(src) as fh:
                net = nw.load_tntp(fh)
        return gen_tntp_instance(net, [tuple(p) for p in manifest["pairs"]], manifest["max_per_pair"],
                                 manifest["max_length"], [tuple(p) for p in manifest["commodity_pairs"]],
                                 seed=manifest["seed"], demand_fraction=manifest["demand_fraction"],
                                 cost_scale=manifest["cost_scale"], source=src,
                                 mean=manifest.get("mean", "centred"),
                                 noise_scale=manifest.get("noise_scale", DEFAULT_NOISE_SCALE))
    raise ModelError(f"unknown generator {gen!r} in manifest")


def manifest_document(inst):
    return {"schema": "onp.instance", "version": SCHEMA_VERSION, **inst.manifest}


def manifest_hash(inst):
    blob = json.dumps(manifest_document(inst), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
