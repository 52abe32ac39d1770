from __future__ import annotations

import math

import numpy as np
import pytest

from bpel.errors import ConfigError
from bpel.inner import STOPPED, solve_lambda
from bpel.likelihood import (
    NEG_INF,
    PosteriorEvaluator,
    PosteriorSpec,
    PriorSpec,
    log_el,
    log_pel,
    log_posterior,
)
from bpel.model import (
    Dataset,
    IvSimConfig,
    MomentModel,
    ParameterSpace,
    evaluate_moments,
    iv_moment_model,
    simulate_iv,
)
from bpel.penalty import PenaltySpec

# nested 41^3 grid maximization of the inner problem for the n=20, r=3
# desk instance at theta=(0.4, 0.6), nu=0.03, frozen
DESK_LOG_PEL = -67.3830844069

BOX = ParameterSpace.box(-5, 5, 1)


def _column_model():
    """g(x; theta) = x - theta, a one-parameter location model."""
    return MomentModel(1, 1, lambda X, t: X[:, :1] - t[0], lambda X, t: -np.ones((X.shape[0], 1, 1)))


def _zero_model():
    return MomentModel(2, 1, lambda X, t: np.zeros((X.shape[0], 2)))


def test_log_el_examples():
    post = PosteriorSpec(_zero_model(), Dataset(np.ones((5, 1))), None, BOX)
    assert log_el(post, [0.0]) == pytest.approx(-5 * math.log(5), abs=1e-12)
    pair = PosteriorSpec(_column_model(), Dataset(np.array([[1.0], [-1.0]])), None, BOX)
    assert log_el(pair, [0.0]) == pytest.approx(-2 * math.log(2), abs=1e-12)
    positive = PosteriorSpec(_column_model(), Dataset(np.array([[1.0], [2.0], [3.0]])), None, BOX)
    assert log_el(positive, [0.0]) == NEG_INF


def test_log_pel_examples():
    post = PosteriorSpec(_zero_model(), Dataset(np.ones((5, 1))), PenaltySpec.l1(0.1), BOX)
    assert log_pel(post, [0.0])[0] == pytest.approx(-5 * math.log(5), abs=1e-12)
    data = Dataset(np.array([[0.5], [1.0], [1.5]]))
    big = PosteriorSpec(_column_model(), data, PenaltySpec.l1(5.0), BOX)
    lp, sol = log_pel(big, [0.0])
    assert not sol.lam.any()
    assert lp == pytest.approx(-3 * math.log(3), abs=1e-12)


def test_log_pel_desk_instance_matches_grid_oracle():
    data = simulate_iv(IvSimConfig(n=20, r=4, seed=7))
    post = PosteriorSpec(iv_moment_model(3), data, PenaltySpec.l1(0.03), ParameterSpace.box(-5, 5, 2))
    lp, sol = log_pel(post, [0.4, 0.6])
    assert sol.converged
    assert abs(lp - DESK_LOG_PEL) <= 1e-3


def test_log_pel_requires_penalty_and_box():
    post = PosteriorSpec(_zero_model(), Dataset(np.ones((5, 1))), None, BOX)
    with pytest.raises(ConfigError):
        log_pel(post, [0.0])
    with pytest.raises(ConfigError):
        log_el(post, [9.0])


def test_log_posterior_improper_prior_and_box(desk_post):
    theta = np.array([0.45, 0.55])
    assert log_posterior(desk_post, theta) == log_pel(desk_post, theta)[0]
    assert log_posterior(desk_post, [5.5, 0.0]) == NEG_INF


def test_gaussian_prior_adds_peak_constant(desk_post):
    prior = PriorSpec.gaussian((0.6, 0.6), 0.5)
    post = PosteriorSpec(desk_post.model, desk_post.data, desk_post.penalty, desk_post.space, prior)
    theta = np.array([0.6, 0.6])
    peak = -2 * math.log(0.5) - math.log(2 * math.pi)
    assert log_posterior(post, theta) == pytest.approx(log_pel(desk_post, theta)[0] + peak, abs=1e-10)


def test_prior_validation():
    with pytest.raises(ConfigError):
        PriorSpec("gaussian", (0.0, 0.0), -1.0)
    with pytest.raises(ConfigError):
        PriorSpec("flat")
    assert PriorSpec().log_density([3.0, 4.0]) == 0.0


def test_posterior_dimension_checks():
    with pytest.raises(ConfigError):
        PosteriorSpec(_zero_model(), Dataset(np.ones((3, 1))), None, ParameterSpace.box(-1, 1, 2))


def test_log_pel_is_bounded_by_zero_multiplier(desk_post, rng):
    nlogn = desk_post.n * math.log(desk_post.n)
    for theta in rng.uniform(-2, 3, size=(10, 2)):
        assert log_pel(desk_post, theta)[0] <= -nlogn + 1e-9


def test_el_and_pel_agree_for_tiny_nu(rng):
    for _ in range(5):
        x = rng.standard_normal((15, 1)) + 0.3
        data = Dataset(x)
        el = PosteriorSpec(_column_model(), data, None, BOX)
        pel = el.with_penalty(PenaltySpec.l1(1e-6))
        theta = [float(np.median(x))]
        assert abs(log_pel(pel, theta)[0] - log_el(el, theta)) < 1e-3


def test_grid_argmax_is_argmin_of_profile():
    data = simulate_iv(IvSimConfig(n=60, r=10, seed=4))
    model = iv_moment_model(10)
    post = PosteriorSpec(model, data, PenaltySpec.l1(0.05), ParameterSpace.box(-5, 5, 2))
    axis = np.linspace(-0.5, 1.5, 21)
    lps, profile = [], []
    for a in axis:
        for b in axis:
            theta = np.array([a, b])
            lps.append(log_posterior(post, theta))
            G = evaluate_moments(model, data, theta)
            profile.append(solve_lambda(G, post.penalty).objective)
    assert int(np.argmax(lps)) == int(np.argmin(profile))


def test_floor_gives_upper_bound_below_floor(desk_post):
    ev = PosteriorEvaluator(desk_post)
    theta = np.array([1.5, -0.5])
    exact = ev.log_posterior(theta)
    ev.reset()
    bound, sol = ev.evaluate(theta, floor=exact + 5.0)
    assert sol.status == STOPPED
    assert exact <= bound < exact + 5.0
    ev.reset()
    value, sol = ev.evaluate(theta, floor=exact - 5.0)
    assert sol.converged and value == pytest.approx(exact, abs=1e-8)


def test_evaluator_cache_returns_same_solution(desk_post):
    ev = PosteriorEvaluator(desk_post)
    a = ev.solve([0.5, 0.5])
    b = ev.solve([0.5, 0.5])
    assert a is b and ev.evaluations == 1
