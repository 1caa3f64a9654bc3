import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from onp import evaluator as ev
from onp import oracle as orc
from onp import problem as pb
from onp.errors import CapabilityError, DimensionError


def scalar(lam=1.0, **kw):
    inst = pb.gen_scalar_instance(lam=lam, **kw)
    return inst, pb.sample_scenarios(inst.elasticity, 1, 0)


def closed_form(p, lam):
    # lam/2 p^2 - min(0.5, max(0, -p))
    return 0.5 * lam * p * p - min(0.5, max(0.0, -p))


@pytest.mark.parametrize("p,x,om", [(1.0, 0.0, False), (0.25, 0.0, False), (-0.25, 0.25, True)])
def test_scalar_flows(p, x, om):
    inst, sc = scalar()
    fl = ev.eval_flows(inst, sc, [p])
    assert fl.y[0, 0] == -p and fl.x[0, 0] == x and bool(fl.omega[0, 0]) is om


@pytest.mark.parametrize("lam,p,f", [(0.0, -0.25, -0.25), (1.0, 1.0, 0.5), (5.0, -1.0, 2.0)])
def test_scalar_objective(lam, p, f):
    inst, sc = scalar(lam)
    assert ev.eval_objective(inst, sc, ev.eval_flows(inst, sc, [p])) == pytest.approx(f, abs=1e-15)


@given(st.floats(-1.0, 1.0), st.floats(0.0, 5.0))
def test_scalar_objective_formula(p, lam):
    inst, sc = scalar(lam)
    assert ev.eval_objective(inst, sc, ev.eval_flows(inst, sc, [p])) == pytest.approx(closed_form(p, lam), abs=1e-14)


def test_scalar_gradient():
    inst, sc = scalar(1.0)
    fl = ev.eval_flows(inst, sc, [-0.25])
    assert ev.grad_f_dense(inst, sc, fl)[0] == pytest.approx(0.75, abs=1e-15)
    assert ev.grad_f_sparse(inst, sc, fl)[0] == pytest.approx(0.75, abs=1e-15)

    def f(q):
        return ev.eval_objective(inst, sc, ev.eval_flows(inst, sc, q))

    assert orc.fd_gradient(f, np.array([-0.25]), 1e-6)[0] == pytest.approx(0.75, abs=1e-8)


def test_dimension_error(toy, toy_scen):
    with pytest.raises(DimensionError):
        ev.eval_flows(toy, toy_scen, np.zeros(3))


def test_flow_invariants(toy, toy_scen, rng):
    for _ in range(5):
        p = rng.uniform(toy.p_lower, toy.p_upper)
        fl = ev.eval_flows(toy, toy_scen, p)
        xu = toy.x_upper[:, None]
        assert np.all(fl.x >= 0) and np.all(fl.x <= xu)
        inside = (fl.y > 0) & (fl.y < xu)
        assert np.all(fl.omega <= inside)
        np.testing.assert_array_equal(fl.x[fl.omega], fl.y[fl.omega])
        np.testing.assert_array_equal(fl.active_counts, fl.omega.sum(axis=1))
        assert all(np.array_equal(s, np.flatnonzero(fl.omega[:, i])) for i, s in enumerate(fl.active_sets))


def test_boundary_entries_are_inactive(caplog):
    inst, sc = scalar()
    with caplog.at_level(logging.DEBUG, logger="onp.evaluator"):
        fl = ev.eval_flows(inst, sc, [-0.5])
    assert fl.n_boundary == 1 and not fl.omega.any()
    assert "boundary" in caplog.text


def test_constraint(toy, toy_scen):
    fl = ev.eval_flows(toy, toy_scen, toy.p_mid)
    c = ev.eval_constraint(toy, toy_scen, fl)
    ref = orc.dense_reference(toy, toy_scen, toy.p_mid)
    np.testing.assert_allclose(c, ref.constraint, rtol=0, atol=1e-12)
    # Frozen from the dense reference.
    np.testing.assert_allclose(c, [0.09727998605076793, 0.10140993566423978], rtol=0, atol=1e-12)
    assert ev.eval_objective(toy, toy_scen, fl) == pytest.approx(688.7658906947546, rel=1e-12)
    zero_l = toy.replace(commodity=toy.commodity.__class__(toy.commodity.pairs, toy.K, np.zeros(2)))
    assert np.all(ev.eval_constraint(zero_l, toy_scen, fl) <= 0)


def test_all_clipped_gradient_is_lam_p(toy, toy_scen):
    p = toy.p_upper  # B ~ -I: high prices push every flow to 0
    fl = ev.eval_flows(toy, toy_scen, p)
    assert not fl.omega.any()
    for g in (ev.grad_f_dense(toy, toy_scen, fl), ev.grad_f_sparse(toy, toy_scen, fl)):
        np.testing.assert_allclose(g, toy.lam * p, rtol=1e-15)
    assert not ev.grad_c(toy, toy_scen, fl).any()
    np.testing.assert_array_equal(ev.hess_f(toy, toy_scen, fl), toy.lam * np.eye(16))


def test_identity_b_zero_q(toy, rng):
    r = toy.n_routes
    offset = rng.uniform(0, 1, toy.n_edges)
    cost = pb.build_cost(toy.routes, np.zeros(toy.n_edges), offset)
    p = rng.uniform(-1, 1, r)
    el = pb.ElasticityModel(np.eye(r), 0.5 - p, np.zeros(r))
    inst = toy.replace(cost=cost, elasticity=el, lam=0.7)
    sc = pb.sample_scenarios(el, 1, 0)
    fl = ev.eval_flows(inst, sc, p)
    assert fl.omega.all()
    np.testing.assert_allclose(ev.grad_f_dense(inst, sc, fl), 0.7 * p - cost.linear, atol=1e-14)
    np.testing.assert_allclose(ev.grad_f_sparse(inst, sc, fl), 0.7 * p - cost.linear, atol=1e-14)


def test_full_activity_forms(toy, rng):
    r = toy.n_routes
    el = pb.ElasticityModel(toy.B, toy.elasticity.mu, np.zeros(r))
    inst = toy.replace(elasticity=el, x_upper=np.full(r, 1e6))
    sc = pb.sample_scenarios(el, 3, 0)
    fl = ev.eval_flows(inst, sc, inst.p_mid)
    assert fl.omega.all()
    Q = ev.dense_q(inst)
    expect = inst.lam * np.eye(r) + inst.B.T @ Q @ inst.B
    for mode in ("dense", "sparse"):
        np.testing.assert_allclose(ev.hess_f(inst, sc, fl, mode), expect, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ev.grad_c(inst, sc, fl), -inst.K.toarray() @ inst.B, atol=1e-14)


def test_single_active_route(toy, toy_scen):
    fl = ev.eval_flows(toy, toy_scen, toy.p_mid)
    om = np.zeros_like(fl.omega)
    om[3] = True
    one = ev.FlowEvaluation(fl.p, fl.y, fl.x, om, fl.boundary, om.sum(axis=1))
    g = ev.grad_f_sparse(toy, toy_scen, one)
    resid = (pb.apply_Q(toy.cost, fl.x)[3] - toy.cost.linear[3]).mean()
    np.testing.assert_allclose(g, toy.lam * fl.p + toy.B[3] * resid, rtol=1e-12)


def test_scalar_grad_c():
    inst, sc = scalar(demand=0.1)
    fl = ev.eval_flows(inst, sc, [-0.25])
    assert ev.grad_c(inst, sc, fl).tolist() == [[1.0]]  # -(1/N) K diag(N) B with B = -1
    assert ev.grad_c(inst, sc, fl, "dense").tolist() == [[1.0]]


@pytest.mark.parametrize("r,seed", [(16, 0), (32, 1), (64, 2)])
def test_sparse_dense_parity(r, seed, rng):
    inst = pb.gen_random_instance(r, seed=seed)
    sc = pb.sample_scenarios(inst.elasticity, 150, seed)
    p = rng.uniform(inst.p_lower, inst.p_upper) * 0.2 + 0.8 * inst.p_mid
    fl = ev.eval_flows(inst, sc, p)
    assert 0 < fl.omega.mean() < 1
    ref = orc.dense_reference(inst, sc, p)
    for got, want in [
        (ev.grad_f_sparse(inst, sc, fl), ev.grad_f_dense(inst, sc, fl)),
        (ev.grad_f_sparse(inst, sc, fl), ref.gradient),
        (ev.hess_f(inst, sc, fl, "sparse"), ev.hess_f(inst, sc, fl, "dense")),
        (ev.hess_f(inst, sc, fl, "sparse"), ref.hessian),
        (ev.grad_c(inst, sc, fl), ev.grad_c(inst, sc, fl, "dense")),
        (ev.grad_c(inst, sc, fl), ref.constraint_jacobian),
    ]:
        assert orc.rel_error(got, want)[0] <= 1e-10
    H = ev.hess_f(inst, sc, fl)
    assert np.abs(H - H.T).max() <= 1e-10 * np.abs(H).max()
    op = ev.hess_operator(inst, fl)
    v = rng.normal(size=r)
    np.testing.assert_allclose(op.matvec(v), H @ v, rtol=1e-10, atol=1e-10 * np.abs(H @ v).max())


def test_hessian_fd(rand16, rand16_scen, rng):
    p = orc.sample_smooth_point(rand16, rand16_scen, rng)
    assert orc.check_hessian(rand16, rand16_scen, p).max_rel_error <= 1e-4
    assert orc.check_hessian(rand16, rand16_scen, p, path="dense").max_rel_error <= 1e-4


def test_hess_c_zero(rand16, rand16_scen, rng):
    assert ev.hess_c(rand16) is ev.ZERO_HESSIAN
    np.testing.assert_array_equal(ev.hess_c() @ np.ones(4), np.zeros(4))
    p = orc.sample_smooth_point(rand16, rand16_scen, rng)
    assert orc.constraint_curvature(rand16, rand16_scen, p) <= 1e-6


def test_grad_c_jumps_across_transition():
    inst, sc = scalar(demand=0.1)
    # The flow leaves zero at p = 0: a difference straddling it sees the jump.
    curv = orc.constraint_curvature(inst, sc, np.array([0.0]), step=1e-3)
    assert curv > 1.0


def test_convexity_threshold():
    assert ev.curvature_bound(np.eye(3), np.eye(3)) == pytest.approx(1.0)
    inst = pb.gen_random_instance(16, seed=2)
    assert ev.convexity_threshold(inst) >= -1e-12
    with pytest.raises(CapabilityError):
        ev.convexity_threshold(inst, cap=8)


@given(st.integers(0, 10_000))
def test_local_convexity_nonnegative_p(seed):
    inst = pb.gen_random_instance(16, seed=seed % 5)
    sc = pb.sample_scenarios(inst.elasticity, 30, seed)
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 10, inst.n_routes)
    H = ev.hess_f(inst, sc, ev.eval_flows(inst, sc, p))
    assert p @ H @ p >= -1e-10


@given(st.integers(0, 10_000))
def test_lipschitz(seed):
    inst = pb.gen_random_instance(16, seed=seed % 3)
    rng = np.random.default_rng(seed)
    sc = pb.sample_scenarios(inst.elasticity, 1, seed)
    p1, p2 = rng.uniform(-5, 15, (2, inst.n_routes))
    smax = np.linalg.norm(inst.B, 2)
    x1 = ev.eval_flows(inst, sc, p1).x[:, 0]
    x2 = ev.eval_flows(inst, sc, p2).x[:, 0]
    assert np.linalg.norm(x1 - x2) <= smax * np.linalg.norm(p1 - p2) + 1e-12


def test_report_json(toy, toy_scen):
    rep = ev.evaluate(toy, toy_scen, toy.p_mid, path="sparse", hessian=True)
    doc = json.loads(rep.to_json())
    assert doc["path"] == "sparse" and set(doc["timing"]) >= {"gradient", "hessian"}
    assert doc["objective"] == pytest.approx(688.7658906947546, rel=1e-12)
    with pytest.raises(ValueError):
        ev.evaluate(toy, toy_scen, toy.p_mid, path="gpu")


def test_scalar_nonconvexity_at_zero():
    # The kink at p = -0.5 is convex; the concave one sits where the flow leaves zero.
    inst, sc = scalar(1.0)
    f = lambda p: ev.eval_objective(inst, sc, ev.eval_flows(inst, sc, np.array([p])))
    assert f(-0.5) < 0.5 * f(-0.75) + 0.5 * f(-0.25)
    assert f(0.0) > 0.5 * f(-0.25) + 0.5 * f(0.25)
    assert (f(0.0), 0.5 * f(-0.25) + 0.5 * f(0.25)) == pytest.approx((0.0, -0.09375), abs=1e-15)


def test_curvature_bound_needs_singular_q():
    # With Q positive definite the bound fails for the all-zero pattern.
    Q, B = np.eye(3), np.eye(3)
    bound = ev.curvature_bound(Q, B)
    J = np.zeros((3, 3))
    assert np.linalg.eigvalsh(B.T @ J @ Q @ J @ B)[0] < bound - 1e-8
