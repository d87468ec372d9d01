import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedpca import wdro
from fedpca.errors import CheckFailure, ConfigurationError, DataFormatError
from fedpca.wdro import DiscreteDistribution, FiniteSpace, LossTable

seeds = st.integers(0, 2**32 - 1)


@pytest.fixture
def two_point():
    return wdro.two_point_instance()


def lp_ball_sup(space, loss, center, rho):
    from scipy.optimize import linprog

    n = space.size
    a_eq = np.zeros((n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    res = linprog(-np.tile(loss.values, n), A_ub=[space.metric.ravel()], b_ub=[rho],
                  A_eq=a_eq, b_eq=center.weights, bounds=(0, None), method="highs")
    return -res.fun


# -- types ----------------------------------------------------------------------------

def test_space_validation():
    with pytest.raises(ValueError, match="triangle"):
        FiniteSpace([0, 1, 2], [[0, 1, 5], [1, 0, 1], [5, 1, 0]])
    with pytest.raises(ValueError):
        FiniteSpace([0, 1], [[0, 1], [2, 0]])
    with pytest.raises(ValueError):
        FiniteSpace([0, 1], [[1, 1], [1, 0]])
    with pytest.raises(ValueError):
        FiniteSpace([0, 1], [[0, 0], [0, 0]])
    s = FiniteSpace.from_points([[0, 0], [3, 4]])
    assert s.metric[0, 1] == 5 and s.min_gap == 5 and s.diameter == 5


def test_distribution_validation():
    with pytest.raises(ValueError):
        DiscreteDistribution([0.5, 0.4])
    with pytest.raises(ValueError):
        DiscreteDistribution([1.5, -0.5])
    assert DiscreteDistribution.point_mass(3, 1).expect([1, 2, 3]) == 2


def test_loss_table_certificates():
    s = FiniteSpace.from_points([0.0, 2.0])
    f = LossTable.on(s, [0.0, 1.0])
    assert f.lipschitz == 0.5 and f.bound == 1.0
    with pytest.raises(ValueError):
        LossTable.on(s, [0.0, 1.0], lipschitz=0.4)
    with pytest.raises(ValueError):
        LossTable.on(s, [0.0, 1.0], bound=0.5)


# -- surrogate ------------------------------------------------------------------------------

def test_phi_examples(two_point):
    s, f = two_point.space, two_point.loss
    assert wdro.phi_gamma(s, f, 0.5, 0) == 0.5
    assert wdro.phi_gamma(s, f, 0.5, 1) == 1.0
    assert wdro.phi_gamma(s, f, 0.0, 0) == 1.0
    big = 2 * f.bound / s.min_gap + 1
    assert wdro.phi_gamma(s, f, big, 0) == 0.0
    with pytest.raises(ValueError):
        wdro.phi_gamma(s, f, -1.0, 0)


@given(seeds)
def test_phi_at_large_gamma_is_loss(seed):
    inst = wdro.random_instance(seed)
    g = 2 * inst.loss.bound / inst.space.min_gap * 1.01
    np.testing.assert_allclose(wdro.phi_gamma_all(inst.space, inst.loss, g), inst.loss.values)


@given(seeds)
def test_phi_non_increasing_convex_and_above_loss(seed):
    inst = wdro.random_instance(seed)
    grid = np.linspace(0, 2 * inst.loss.bound / inst.space.min_gap + 1, 60)
    vals = np.array([wdro.phi_gamma_all(inst.space, inst.loss, g) for g in grid])
    assert np.all(vals >= inst.loss.values - 1e-12)
    assert np.all(np.diff(vals, axis=0) <= 1e-12)
    assert np.all(vals[:-2] + vals[2:] - 2 * vals[1:-1] >= -1e-9)


def test_robust_loss_examples(two_point):
    s, f, c = two_point.space, two_point.loss, two_point.center
    big = 10.0
    assert wdro.robust_loss(s, f, c, big, 0.0) == c.expect(f.values)
    assert wdro.robust_loss(s, f, c, 0.5, 0.4) == pytest.approx(0.5 + 0.2)
    val, g = wdro.dual_minimum(s, f, c, 0.4)
    assert val == pytest.approx(0.4) and g == pytest.approx(1.0)
    with pytest.raises(ValueError):
        wdro.robust_loss(s, f, c, 1.0, -0.1)


def test_gamma_grid_covers_range_and_breakpoints(two_point):
    grid = wdro.gamma_grid(two_point.space, two_point.loss)
    assert grid[0] == 0 and grid[-1] >= 2 * two_point.loss.bound / two_point.space.min_gap
    assert 1.0 in grid


@given(seeds)
def test_grid_dual_minimum_is_exact(seed):
    # convex piecewise linear: no finer gamma beats the breakpoint grid
    inst = wdro.random_instance(seed)
    val, _ = wdro.dual_minimum(inst.space, inst.loss, inst.center, inst.rho)
    fine = np.linspace(0, 2 * inst.loss.bound / inst.space.min_gap, 4001)
    brute = min(wdro.robust_loss(inst.space, inst.loss, inst.center, g, inst.rho) for g in fine)
    assert val <= brute + 1e-12


# -- ball supremum -------------------------------------------------------------------------

def test_ball_sup_examples(two_point):
    s, f, c = two_point.space, two_point.loss, two_point.center
    for method in ("grid", "exact"):
        v, q = wdro.ball_sup(s, f, c, 0.4, method=method)
        assert v == pytest.approx(0.4)
        np.testing.assert_allclose(q.weights, [0.6, 0.4], atol=1e-12)
        v, q = wdro.ball_sup(s, f, c, 0.0, method=method)
        assert v == 0.0 and np.array_equal(q.weights, c.weights)
        v, _ = wdro.ball_sup(s, f, c, s.diameter, method=method)
        assert v == pytest.approx(f.values.max())


def test_ball_sup_caps(two_point):
    s, f, c = two_point.space, two_point.loss, two_point.center
    with pytest.raises(ConfigurationError):
        wdro.ball_sup(s, f, c, 0.4, m=9)
    with pytest.raises(ConfigurationError):
        wdro.ball_sup(s, f, c, 0.4, m=201)
    big = FiniteSpace.from_points(np.arange(7.0))
    with pytest.raises(ConfigurationError):
        wdro.ball_sup(big, LossTable.on(big, np.zeros(7)), DiscreteDistribution(np.full(7, 1 / 7)), 1.0)


@given(seeds)
def test_exact_greedy_matches_lp_and_dual(seed):
    inst = wdro.random_instance(seed)
    s, f, c, rho = inst.space, inst.loss, inst.center, inst.rho
    exact, plan = wdro.ball_sup_exact(s, f, c, rho)
    assert exact == pytest.approx(lp_ball_sup(s, f, c, rho), abs=1e-9)
    assert exact == pytest.approx(wdro.dual_minimum(s, f, c, rho)[0], abs=1e-9)
    np.testing.assert_allclose(plan.sum(axis=1), c.weights, atol=1e-12)
    assert wdro.plan_cost(s, plan) <= rho + 1e-9
    assert np.all(plan >= 0)


@given(seeds, st.sampled_from([10, 50, 100]))
def test_grid_primal_is_a_lower_bound(seed, m):
    inst = wdro.random_instance(seed, max_points=4)
    s, f, c, rho = inst.space, inst.loss, inst.center, inst.rho
    grid, plan = wdro.ball_sup_grid(s, f, c, rho, m)
    assert grid <= wdro.ball_sup_exact(s, f, c, rho)[0] + 1e-9
    assert wdro.plan_cost(s, plan) <= rho + 1e-9


def test_grid_primal_tightens_with_m():
    inst = wdro.random_instance(3, max_points=4)
    vals = [wdro.ball_sup_grid(inst.space, inst.loss, inst.center, inst.rho, m)[0]
            for m in (10, 20, 40, 80, 160)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_wasserstein_examples(two_point):
    s = two_point.space
    p, q = DiscreteDistribution([1, 0]), DiscreteDistribution([0.6, 0.4])
    assert wdro.wasserstein1(s, p, q) == pytest.approx(0.4)
    assert wdro.wasserstein1(s, p, p) == pytest.approx(0.0)


@given(seeds, st.floats(0, 1))
def test_wasserstein_jointly_convex(seed, t):
    rng = np.random.default_rng(seed)
    inst = wdro.random_instance(seed)
    n = inst.space.size
    d = [DiscreteDistribution(rng.dirichlet(np.ones(n))) for _ in range(4)]

    def mix(a, b):
        return DiscreteDistribution((1 - t) * a.weights + t * b.weights)

    w = lambda a, b: wdro.wasserstein1(inst.space, a, b)
    assert w(mix(d[0], d[1]), mix(d[2], d[3])) <= (1 - t) * w(d[0], d[2]) + t * w(d[1], d[3]) + 1e-9


@given(seeds)
def test_ball_members_are_in_the_ball(seed):
    inst = wdro.random_instance(seed)
    for q in wdro.ball_members(inst.space, inst.loss, inst.center, inst.rho, n_random=5):
        assert wdro.wasserstein1(inst.space, inst.center, q) <= inst.rho + 1e-9


# -- checks ----------------------------------------------------------------------------------

def test_duality_two_point(two_point):
    rep = wdro.check_duality(two_point.space, two_point.loss, two_point.center, 0.4)
    assert rep.passed and rep.details["gap"] == pytest.approx(0.0, abs=1e-12)
    assert rep.details["primal_grid"] == pytest.approx(0.4)
    rep = wdro.check_duality(two_point.space, two_point.loss, two_point.center, 0.0)
    assert rep.passed and rep.details["dual"] == rep.details["primal_exact"] == 0.0


def test_duality_gap_violation_reported(two_point):
    # a gamma grid that misses gamma* = 1 leaves a gap above a tiny tolerance
    rep = wdro.check_duality(two_point.space, two_point.loss, two_point.center, 0.4,
                             grid=[0.0, 3.0], tol=1e-6)
    assert not rep.passed and rep.violations[0]["kind"] == "duality gap"
    with pytest.raises(CheckFailure):
        rep.raise_if_failed()


def test_sandwich_two_point(two_point):
    s, f, c = two_point.space, two_point.loss, two_point.center
    rep = wdro.check_sandwich(s, f, c, 0.4, 1.0, [c])
    assert rep.passed and rep.details["gamma_star"] == 1.0
    assert rep.details["robust_star"] == pytest.approx(0.4) and rep.details["slack"] == pytest.approx(0.8)


def test_sandwich_upper_side_fails_below_gamma_star(two_point):
    s, f, c = two_point.space, two_point.loss, two_point.center
    rep = wdro.check_sandwich(s, f, c, 0.4, 0.0, [c])
    assert not rep.passed
    assert rep.violations[0]["kind"] == "upper" and rep.violations[0]["robust"] == 1.0


@given(seeds, st.floats(0, 3))
def test_sandwich_holds_at_and_above_gamma_star(seed, extra):
    inst = wdro.random_instance(seed)
    for f in inst.losses:
        _, g_star = wdro.dual_minimum(inst.space, f, inst.center, inst.rho)
        members = wdro.ball_members(inst.space, f, inst.center, inst.rho, n_random=5, m=20)
        for g in (g_star, g_star + extra):
            assert wdro.check_sandwich(inst.space, f, inst.center, inst.rho, g, members).passed


def test_transfer_trivial_cases(two_point):
    s, f, c = two_point.space, two_point.loss, two_point.center
    rep = wdro.check_excess_risk_transfer(s, [f], c, 0.4, 1.0)
    assert rep.passed and rep.details["slack"] == pytest.approx(0.8)
    inst = wdro.random_instance(5)
    rep = wdro.check_excess_risk_transfer(inst.space, inst.losses, inst.center, 0.0, 0.0)
    assert rep.passed


def test_transfer_three_losses_on_four_points():
    rng = np.random.default_rng(4)
    space = FiniteSpace.from_points(rng.uniform(size=(4, 2)))
    losses = [LossTable.on(space, rng.uniform(-1, 1, 4)) for _ in range(3)]
    center = DiscreteDistribution(rng.dirichlet(np.ones(4)))
    rho = 0.3
    g = max(wdro.dual_minimum(space, f, center, rho)[1] for f in losses)
    assert wdro.check_excess_risk_transfer(space, losses, center, rho, g).passed


def test_random_instances_all_pass():
    for seed in range(200):
        inst = wdro.random_instance(seed)
        assert inst.space.size <= 5
        for rep in wdro.check_instance(inst):
            assert rep.passed, (seed, rep.name, rep.violations[:1])


# -- instance files ----------------------------------------------------------------------------

def test_instance_round_trip(tmp_path):
    inst = wdro.random_instance(9)
    p = tmp_path / "i.json"
    wdro.save_instance(p, inst)
    back = wdro.load_instance(p)
    np.testing.assert_array_equal(back.space.metric, inst.space.metric)
    np.testing.assert_array_equal(back.center.weights, inst.center.weights)
    assert back.rho == inst.rho and len(back.losses) == 3


def test_instance_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.json"
    obj = wdro.two_point_instance().to_dict()
    obj["points"] = [[0.0], [1.0], [2.0]]
    obj["metric"] = [[0, 1, 5], [1, 0, 1], [5, 1, 0]]
    obj["losses"] = [[0, 1, 2]]
    obj["weights"] = [1, 0, 0]
    del obj["lipschitz"], obj["bounds"]
    p.write_text(json.dumps(obj))
    with pytest.raises(DataFormatError, match="triangle"):
        wdro.load_instance(p)
    p.write_text("{not json")
    with pytest.raises(DataFormatError):
        wdro.load_instance(p)
    p.write_text(json.dumps({"points": [0, 1]}))
    with pytest.raises(DataFormatError):
        wdro.load_instance(p)
