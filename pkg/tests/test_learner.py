import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import epw.learner as learner
from conftest import chain_mdp, toy_mdp
from epw.environments import GatesConfig, PaddleConfig, make_gates, make_paddle
from epw.learner import (
    ASTRONOMICAL,
    Algorithm1Error,
    ErmConfig,
    LossData,
    LossSpec,
    empirical_loss,
    empirical_loss_grad,
    minimize_loss,
    recursion_bound,
    run_algorithm1,
    theorem1_sample_size,
    theorem1_terms,
)
from epw.mdp import Batch, TabularMdp, sample_batch
from epw.oracle import policy_value, population_loss
from epw.policies import ContractError, MlpFamily, PolicyVector, SoftmaxLinearFamily

PADDLE = make_paddle(PaddleConfig(3, 2, 6))


def paddle_batch(n=400, seed=0, t=1):
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    rng = np.random.default_rng(seed)
    slots = [fam.random_params(rng, 3.0) if h < t else fam.theta_rand() for h in range(PADDLE.horizon)]
    vec = PolicyVector(fam.tag, tuple(slots))
    return fam, vec, sample_batch(PADDLE, fam, vec, n, seed)


def test_no_failures_means_zero_loss_and_gradient():
    mdp = chain_mdp(5)
    fam = SoftmaxLinearFamily(2, 2)
    batch = sample_batch(mdp, None, None, 50, 1)
    spec = LossSpec(1, 2, 2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta = fam.random_params(rng)
        assert empirical_loss(fam, theta, batch, spec) == 0.0
        assert not empirical_loss_grad(fam, theta, batch, spec).any()
    res = minimize_loss(fam, batch, spec)
    assert res.loss == 0.0 and np.array_equal(res.theta, fam.theta_rand())


@pytest.mark.parametrize("t,window", [(0, 0), (1, 2), (3, 1), (4, 3)])
def test_uniform_parameter_gives_failure_fraction(t, window):
    fam, _, batch = paddle_batch(t=t)
    spec = LossSpec(t, window, 3)
    idx = min(t + window + 1, PADDLE.horizon - 1)
    assert empirical_loss(fam, fam.theta_rand(), batch, spec) == pytest.approx(batch.failed_by(idx).mean(), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.integers(0, 4), window=st.integers(0, 5))
def test_loss_range(seed, t, window):
    fam, _, batch = paddle_batch(n=100, seed=seed % 7, t=t)
    theta = fam.random_params(np.random.default_rng(seed))
    m = min(window, PADDLE.horizon - 1 - t) + 1
    value = empirical_loss(fam, theta, batch, LossSpec(t, window, 3))
    assert 0.0 <= value <= 3**m


def test_estimator_is_unbiased_on_toy():
    mdp = toy_mdp()
    fam = SoftmaxLinearFamily(2, 1)
    theta = np.array([0.9, -0.4])
    behavior = PolicyVector.uniform(fam, 3)
    exact = population_loss(mdp, fam, behavior, theta, 0, 1)
    spec = LossSpec(0, 1, 2)
    vals = np.array([empirical_loss(fam, theta, sample_batch(mdp, fam, behavior, 16, s), spec) for s in range(2000)])
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - exact) <= 4 * se


@pytest.mark.parametrize("which", ["softmax", "mlp"])
def test_gradient_matches_finite_differences(which):
    fam0, _, batch = paddle_batch(n=300, t=2)
    fam = fam0 if which == "softmax" else MlpFamily(3, PADDLE.state_dim, hidden=4)
    spec = LossSpec(2, 2, 3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        theta = fam.random_params(rng, 2.0)
        g = empirical_loss_grad(fam, theta, batch, spec)
        fd = np.zeros_like(theta)
        for k in range(fam.dim):
            e = np.zeros_like(theta)
            e[k] = 1e-6
            fd[k] = (empirical_loss(fam, theta + e, batch, spec) - empirical_loss(fam, theta - e, batch, spec)) / 2e-6
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


def test_single_factor_gradient():
    fam, _, batch = paddle_batch(n=300, t=2)
    spec = LossSpec(2, 0, 3)
    theta = fam.random_params(np.random.default_rng(1), 2.0)
    fail = batch.failed_by(3)
    expected = np.zeros(fam.dim)
    for i in np.nonzero(fail)[0]:
        expected += fam.prob_grad(theta, batch.features[i, 2], int(batch.actions[i, 2]))
    expected *= 3 / batch.n
    np.testing.assert_allclose(empirical_loss_grad(fam, theta, batch, spec), expected, rtol=1e-10, atol=1e-14)


def test_loss_data_dedup_matches_direct_sum():
    fam, _, batch = paddle_batch(n=500, t=1)
    spec = LossSpec(1, 2, 3)
    theta = fam.random_params(np.random.default_rng(2))
    direct = 0.0
    for i in np.nonzero(batch.failed_by(4))[0]:
        prod = 1.0
        for j in range(3):
            prod *= fam.probs(theta, batch.features[i, 1 + j][None])[0, batch.actions[i, 1 + j]]
        direct += prod
    assert empirical_loss(fam, theta, batch, spec) == pytest.approx(27 * direct / batch.n, rel=1e-12)
    assert LossData(batch, spec).weights.sum() == pytest.approx(batch.failed_by(4).mean())


def test_empty_batch_is_rejected():
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    d = PADDLE.state_dim
    empty = Batch(np.zeros((0, 6, d)), np.zeros((0, 6), int), np.zeros((0, 6), np.int8), np.zeros((0, 6), int), 0)
    with pytest.raises(ContractError):
        empirical_loss(fam, fam.theta_rand(), empty, LossSpec(0, 1, 3))


def test_erm_contract():
    fam, _, batch = paddle_batch(n=600, t=1)
    spec = LossSpec(1, 2, 3)
    res = minimize_loss(fam, batch, spec, ErmConfig(restarts=4, steps=50))
    assert res.loss <= res.loss_at_rand
    assert all(res.loss <= v for v in res.initial_losses)
    assert len(res.initial_losses) == 4
    assert np.linalg.norm(res.theta) <= fam.bound * (1 + 1e-12)
    assert res.loss == pytest.approx(empirical_loss(fam, res.theta, batch, spec))
    again = minimize_loss(fam, batch, spec, ErmConfig(restarts=4, steps=50))
    assert np.array_equal(again.theta, res.theta)


def test_erm_matches_grid_search_in_two_dimensions():
    mdp = toy_mdp()
    fam = SoftmaxLinearFamily(2, 1, bound=3.0)
    batch = sample_batch(mdp, None, None, 400, 12)
    spec = LossSpec(0, 1, 2)
    data = LossData(batch, spec)
    grid = np.linspace(-3.0, 3.0, 200)
    best = min(
        data.value(fam, np.array([a, b])) for a in grid for b in grid if a * a + b * b <= 9.0
    )
    res = minimize_loss(fam, batch, spec, ErmConfig(restarts=8, steps=300), data)
    assert res.loss <= best + 1e-3


def test_warm_start_points_are_used():
    fam, _, batch = paddle_batch(n=300, t=1)
    spec = LossSpec(1, 1, 3)
    target = minimize_loss(fam, batch, spec, ErmConfig(restarts=3, steps=100)).theta
    res = minimize_loss(fam, batch, spec, ErmConfig(restarts=2, steps=0), warm=[target])
    assert res.restart == 1 and np.array_equal(res.theta, target)


def test_horizon_one_returns_uniform():
    mdp = TabularMdp([1], 2, np.array([False]), {}, features=np.ones((1, 1)))
    fam = SoftmaxLinearFamily(2, 1)
    vec, rec = run_algorithm1(mdp, fam, 10, 0, seed=0)
    assert vec.horizon == 1 and np.array_equal(vec.slots[0], fam.theta_rand())
    assert rec.levels == [] and rec.final_value == 1.0


def test_prefix_stability(monkeypatch):
    seen = []
    original = learner.sample_batch

    def spy(mdp, family, thetas, *args, **kwargs):
        seen.append(thetas)
        return original(mdp, family, thetas, *args, **kwargs)

    monkeypatch.setattr(learner, "sample_batch", spy)
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    final, _ = run_algorithm1(PADDLE, fam, 200, 1, seed=3, erm=ErmConfig(restarts=2, steps=30))
    seen.append(final)
    for t in range(1, len(seen)):
        prev, cur = seen[t - 1], seen[t]
        assert all(np.array_equal(prev.slots[h], cur.slots[h]) for h in range(t - 1))
        assert all(np.array_equal(cur.slots[h], fam.theta_rand()) for h in range(t, PADDLE.horizon))


def test_runs_are_reproducible_across_sampling_threads():
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    erm = ErmConfig(restarts=2, steps=40)
    a_vec, a = run_algorithm1(PADDLE, fam, 300, 1, seed=5, erm=erm)
    b_vec, b = run_algorithm1(PADDLE, fam, 300, 1, seed=5, erm=erm, workers=4)
    assert a.same_as(b) and a_vec == b_vec
    _, c = run_algorithm1(PADDLE, fam, 300, 1, seed=6, erm=erm)
    assert not a.same_as(c)


def test_run_record_diagnostics():
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    _, rec = run_algorithm1(PADDLE, fam, 300, 2, seed=1, erm=ErmConfig(restarts=2, steps=40))
    assert len(rec.levels) == PADDLE.horizon - 1
    assert len(rec.safe_occupancies) == PADDLE.horizon
    for lv in rec.levels:
        assert lv.loss_after <= lv.loss_before
        assert lv.safe_occupancy == rec.safe_occupancies[lv.level + 1]
        assert lv.population_loss is not None and lv.population_loss >= 0
    doc = rec.to_dict(timings=False)
    assert "wall_time_ms" not in doc and "wall_time_ms" not in doc["levels"][0]


def test_failure_keeps_partial_record(monkeypatch):
    calls = {"n": 0}
    original = learner.minimize_loss

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return original(*args, **kwargs)

    monkeypatch.setattr(learner, "minimize_loss", flaky)
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    with pytest.raises(Algorithm1Error) as info:
        run_algorithm1(PADDLE, fam, 100, 1, seed=0, erm=ErmConfig(restarts=1, steps=5))
    assert len(info.value.record.levels) == 2
    assert info.value.record.status.startswith("failed at level 2")


def test_algorithm_rejects_bad_window():
    fam = SoftmaxLinearFamily(3, PADDLE.state_dim)
    with pytest.raises(ContractError):
        run_algorithm1(PADDLE, fam, 10, PADDLE.horizon, seed=0)
    with pytest.raises(ContractError):
        run_algorithm1(PADDLE, fam, 0, 1, seed=0)


def test_sample_size_toy_value():
    assert theorem1_sample_size(0.5, 0.5, 2, 2, 0, 1, 1, 1) == 533 == math.ceil(256 * math.log(8))


@given(st.floats(0.01, 0.9), st.floats(0.01, 0.9))
def test_sample_size_decreasing_eps_increases_n(eps, delta):
    smaller = eps * 0.9
    assert theorem1_sample_size(smaller, delta, 5, 3, 1, 10, 2.0, 5.0) > theorem1_sample_size(eps, delta, 5, 3, 1, 10, 2.0, 5.0)


@given(st.integers(1, 50), st.integers(2, 5), st.integers(0, 4))
def test_sample_size_doubling_horizon_quadruples_leading_factor(H, A, C):
    with mpmath.workdps(60):
        a, _ = theorem1_terms(0.3, 0.1, H, A, C, 5, 1.0, 2.0)
        b, _ = theorem1_terms(0.3, 0.1, 2 * H, A, C, 5, 1.0, 2.0)
        assert b == 4 * a


def test_sample_size_saturates_and_exact_on_request():
    args = (0.1, 0.1, 200, 3, 40, 100, 5.0, 20.0)
    assert theorem1_sample_size(*args) == ASTRONOMICAL
    exact = theorem1_sample_size(*args, exact=True)
    assert isinstance(exact, int) and exact > 2**63
    with mpmath.workdps(200):
        lead, logs = theorem1_terms(*args)
        assert exact == int(mpmath.ceil(lead * logs))


def test_sample_size_rejects_bad_inputs():
    with pytest.raises(ContractError):
        theorem1_sample_size(1.5, 0.5, 2, 2, 0, 1, 1, 1)
    with pytest.raises(ContractError):
        theorem1_sample_size(0.5, 0.5, 2, 2, -1, 1, 1, 1)


def test_recursion_bound_formula():
    assert recursion_bound(3, 2, 2000) == pytest.approx(2 * 27 * math.sqrt(math.log(40) / 2000))


def test_gates_short_run_learns_something():
    mdp = make_gates(GatesConfig(5, 3, 9))
    fam = SoftmaxLinearFamily(3, mdp.state_dim)
    _, rec = run_algorithm1(mdp, fam, 1000, 2, seed=0, erm=ErmConfig(restarts=4, steps=150))
    assert rec.final_value > policy_value(mdp, None, None) + 0.3
