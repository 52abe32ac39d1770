from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpel.errors import ConfigError, SolverError
from bpel.inner import (
    CONVERGED,
    STOPPED,
    UNBOUNDED,
    InnerSolver,
    LagrangeSolution,
    SolverOptions,
    inner_objective,
    kkt_residual,
    solve_lambda,
    solve_lambda_unpenalized,
)
from bpel.model import IvSimConfig, evaluate_moments, iv_moment_model, simulate_iv
from bpel.penalty import PenaltySpec

from oracles import grid_maximize

# dense 1-D grid (step 1e-5) and golden-section maximizer of the
# four-point example below, frozen
FOUR_POINT_LAM = 1.5190562
FOUR_POINT_OBJ = 0.16401332381


def _instance(rng, n, r, shift=0.3):
    return rng.standard_normal((n, r)) + rng.uniform(-shift, shift, r)


def test_objective_at_zero_is_zero(rng):
    G = rng.standard_normal((7, 3))
    assert inner_objective(G, PenaltySpec.l1(0.1), np.zeros(3)) == 0.0


def test_objective_single_point():
    val = inner_objective(np.array([[1.0]]), PenaltySpec.l1(0.1), [0.5])
    assert val == pytest.approx(0.355465, abs=1e-6)
    assert val == pytest.approx(math.log(1.5) - 0.05, rel=1e-15)


def test_objective_matches_scalar_loop(rng):
    G = rng.standard_normal((9, 4))
    lam = 0.05 * rng.standard_normal(4)
    acc = 0.0
    for row in G:
        acc += math.log(1.0 + sum(l * g for l, g in zip(lam, row)))
    expected = acc / 9 - 0.2 * sum(abs(l) for l in lam)
    assert inner_objective(G, PenaltySpec.l1(0.2), lam) == pytest.approx(expected, abs=1e-12)


def test_objective_rejects_infeasible_lambda():
    with pytest.raises(ValueError):
        inner_objective(np.array([[1.0], [-1.0]]), None, [2.0])


def test_zero_moments_give_zero_solution():
    sol = solve_lambda(np.zeros((6, 3)), PenaltySpec.l1(0.1))
    assert sol.status == CONVERGED
    assert not sol.lam.any() and sol.objective == 0.0


def test_symmetric_pair_gives_zero_solution():
    G = np.array([[1.0], [-1.0]])
    sol = solve_lambda(G, PenaltySpec.l1(0.01))
    assert sol.lam[0] == 0.0
    un = solve_lambda_unpenalized(G)
    assert un.status == CONVERGED
    assert abs(un.lam[0]) < 1e-12 and un.objective == pytest.approx(0.0, abs=1e-15)


def test_four_point_example_matches_grid_oracle():
    G = np.array([[0.9], [0.5], [0.1], [-0.3]])
    sol = solve_lambda(G, PenaltySpec.l1(0.05))
    assert sol.status == CONVERGED
    assert abs(sol.lam[0] - FOUR_POINT_LAM) <= 1e-4
    assert sol.objective == pytest.approx(FOUR_POINT_OBJ, abs=1e-9)


def test_tie_at_threshold_gives_zero():
    G = np.array([[0.25], [0.25]])
    sol = solve_lambda(G, PenaltySpec.l1(0.25))
    assert sol.lam[0] == 0.0


def test_positive_moments_are_unbounded_without_penalty():
    sol = solve_lambda_unpenalized(np.array([[1.0], [2.0], [3.0]]))
    assert sol.status == UNBOUNDED
    assert sol.objective == math.inf


def test_unpenalized_two_dim_grid_oracle(rng):
    G = rng.standard_normal((20, 2))
    sol = solve_lambda_unpenalized(G)
    assert sol.status == CONVERGED
    lam, val = grid_maximize(G, 0.0)
    assert sol.objective == pytest.approx(val, abs=1e-4)
    assert np.abs(sol.lam - lam).max() < 1e-3


@pytest.mark.parametrize("r", [1, 2])
def test_penalized_grid_oracle(rng, r):
    for _ in range(5):
        G = _instance(rng, int(rng.integers(5, 40)), r, 0.6)
        nu = float(rng.choice([0.01, 0.03, 0.05, 0.1]))
        sol = solve_lambda(G, PenaltySpec.l1(nu))
        lam, val = grid_maximize(G, nu)
        assert sol.objective == pytest.approx(val, abs=1e-4)
        assert np.abs(sol.lam - lam).max() <= 1e-4


def test_kkt_residual_examples(rng):
    G = np.array([[0.02], [-0.01]])
    pen = PenaltySpec.l1(0.1)
    zero = LagrangeSolution(np.zeros(1), 0.0, CONVERGED, 0)
    assert kkt_residual(G, pen, zero) == 0.0

    G = _instance(rng, 30, 4, 0.8)
    sol = solve_lambda(G, pen)
    assert sol.status == CONVERGED
    assert kkt_residual(G, pen, sol) <= SolverOptions().tol
    j = int(np.argmax(np.abs(sol.lam)))
    bumped = sol.lam.copy()
    bumped[j] += 0.1
    moved = LagrangeSolution(bumped, 0.0, CONVERGED, 0)
    assert kkt_residual(G, pen, moved) > 1e-3


def test_kkt_suite_and_zero_characterization(rng):
    opts = SolverOptions()
    for _ in range(60):
        n, r = int(rng.integers(5, 51)), int(rng.integers(1, 11))
        G = _instance(rng, n, r, 0.5)
        nu = float(rng.choice(np.arange(1, 11) / 100))
        pen = PenaltySpec.l1(nu)
        sol = solve_lambda(G, pen, opts)
        assert sol.status == CONVERGED
        assert kkt_residual(G, pen, sol) <= opts.tol
        inside = np.abs(G.mean(axis=0)).max() <= nu + opts.tol
        assert inside == (not sol.lam.any())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_objective_is_concave(seed, t):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((12, 3))
    pen = PenaltySpec.l1(0.05)
    # scale both points into the feasible region
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    bound = 0.5 / max(np.abs(G @ a).max(), np.abs(G @ b).max())
    a, b = a * bound, b * bound
    f = lambda lam: inner_objective(G, pen, lam)
    assert f(t * a + (1 - t) * b) >= t * f(a) + (1 - t) * f(b) - 1e-12


def test_objective_history_is_monotone(rng):
    for _ in range(10):
        G = _instance(rng, 40, 8, 0.8)
        sol = solve_lambda(G, PenaltySpec.l1(0.02), record_history=True)
        h = sol.history
        assert h.size >= 1
        assert np.all(np.diff(h) >= -1e-15)
        assert h[-1] == pytest.approx(sol.objective)
    G = rng.standard_normal((30, 3))
    h = solve_lambda_unpenalized(G, record_history=True).history
    assert np.all(np.diff(h) >= -1e-15)


def test_penalty_keeps_degenerate_instances_bounded():
    cfg = IvSimConfig(n=120, r=200, seed=5)
    data = simulate_iv(cfg)
    model = iv_moment_model(cfg)
    diverged = 0
    for theta in ([0.3, 0.3], [0.5, 0.5], [0.6, 0.4]):
        G = evaluate_moments(model, data, theta)
        diverged += solve_lambda_unpenalized(G).status == UNBOUNDED
        sol = solve_lambda(G, PenaltySpec.l1(0.03))
        assert sol.status == CONVERGED and math.isfinite(sol.objective)
    assert diverged == 3


def test_eta_consistency(rng):
    pen = PenaltySpec.l1(0.04)
    for _ in range(10):
        G = _instance(rng, 30, 6, 0.6)
        sol = solve_lambda(G, pen)
        score = (G / (1 + G @ sol.lam)[:, None]).mean(axis=0)
        for j, lj in enumerate(sol.lam):
            if lj != 0:
                assert sol.eta[j] == 0.04 * np.sign(lj)
            else:
                assert sol.eta[j] == pytest.approx(np.clip(score[j], -0.04, 0.04), abs=1e-15)
        assert np.allclose(sol.score, score, atol=1e-14)


def test_support_threshold():
    sol = LagrangeSolution(np.array([0.2, 1e-9, -0.01]), 0.0, CONVERGED, 0)
    assert sol.support == (0, 2)


def test_custom_linear_penalty_agrees_with_l1(rng):
    lin = PenaltySpec.custom(0.05, lambda t, nu: t, lambda t, nu: np.ones_like(t), lambda t, nu: 0 * t)
    G = _instance(rng, 25, 3, 0.7)
    a = solve_lambda(G, lin)
    b = solve_lambda(G, PenaltySpec.l1(0.05))
    assert a.status == CONVERGED
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-7)
    assert a.objective == pytest.approx(b.objective, abs=1e-12)


def test_custom_strictly_convex_penalty_is_stationary(rng):
    quad = PenaltySpec.custom(
        0.05, lambda t, nu: t + t * t, lambda t, nu: 1 + 2 * t, lambda t, nu: 2 + 0 * t
    )
    G = _instance(rng, 25, 3, 0.9)
    sol = solve_lambda(G, quad)
    assert sol.status == CONVERGED
    assert kkt_residual(G, quad, sol) <= 1e-8


def test_warm_start_reaches_same_maximum(rng):
    G = _instance(rng, 40, 5, 0.7)
    solver = InnerSolver(PenaltySpec.l1(0.03))
    cold = solver.solve(G)
    G2 = G + 0.01 * rng.standard_normal(G.shape)
    warm = solver.solve(G2)
    fresh = solve_lambda(G2, PenaltySpec.l1(0.03))
    assert warm.objective == pytest.approx(fresh.objective, abs=1e-12)
    assert cold.status == warm.status == CONVERGED


def test_objective_bound_stops_early(rng):
    G = _instance(rng, 40, 5, 0.9)
    full = solve_lambda(G, PenaltySpec.l1(0.02))
    stopped = solve_lambda(G, PenaltySpec.l1(0.02), obj_stop=0.5 * full.objective)
    assert stopped.status == STOPPED
    assert 0.5 * full.objective < stopped.objective <= full.objective
    not_reached = solve_lambda(G, PenaltySpec.l1(0.02), obj_stop=2 * full.objective)
    assert not_reached.status == CONVERGED


def test_non_finite_moments_raise():
    with pytest.raises(SolverError):
        solve_lambda(np.array([[np.nan], [1.0]]), PenaltySpec.l1(0.1))


def test_options_validation():
    with pytest.raises(ConfigError):
        SolverOptions(tol=2.0)
    with pytest.raises(ConfigError):
        SolverOptions(max_iter=0)
