import numpy as np
import pytest

from epw.environments import (
    GatesConfig,
    PaddleConfig,
    RandomEpwConfig,
    TreeHardConfig,
    build_environment,
    gate_count,
    generate_random_epw,
    make_gates,
    make_paddle,
    make_tree_hard,
    tree_reward_path,
)
from epw.oracle import check_generic_game, max_safe_set, min_epw_constant, policy_value


def test_single_column_games_cannot_fail():
    assert policy_value(make_paddle(PaddleConfig(width=1)), None, None) == 1.0
    assert policy_value(make_gates(GatesConfig(width=1)), None, None) == 1.0


def test_paddle_window_is_at_most_two():
    assert min_epw_constant(make_paddle(PaddleConfig(3, 2, 6))).min_c <= 2


def test_gates_window_is_at_most_gate_period_minus_one():
    cfg = GatesConfig(5, 3, 12)
    assert min_epw_constant(make_gates(cfg)).min_c <= cfg.gate_period - 1


def test_gates_always_stay_value():
    cfg = GatesConfig(width=3, gate_period=3, horizon=9)
    mdp = make_gates(cfg)

    def stay(h, X):
        p = np.zeros((len(X), 3))
        p[:, 1] = 1.0
        return p

    last = forward_dp(mdp, stay)
    value = last[~mdp.failure[mdp.level_ids(mdp.horizon - 1)]].sum()
    assert gate_count(cfg) == 2
    assert value == pytest.approx((1 / 3) ** gate_count(cfg), abs=1e-15)


def forward_dp(mdp, pi):
    """Final-level distribution under a policy given as a function of (level, features)."""
    dists = [np.array([1.0])]
    for h in range(mdp.horizon - 1):
        ids = mdp.level_ids(h)
        live = np.where(mdp.failure[ids], 0.0, dists[h])
        mass = live[:, None] * pi(h, mdp.features_of(ids))
        nxt = np.zeros(mdp.level_size(h + 1))
        for i, s in enumerate(ids):
            for a in range(mdp.n_actions):
                for t, p in mdp.successors(int(s), a):
                    nxt[t - mdp.level_offsets[h + 1]] += mass[i, a] * p
        dists.append(nxt)
    return dists[-1]


def test_tree_small_instance_shape():
    mdp = make_tree_hard(TreeHardConfig(depth=3, seed=1))
    assert [mdp.level_size(h) for h in range(3)] == [1, 2, 2]
    # one doomed penultimate state plus the trap leaf
    assert int(mdp.failure.sum()) == 2


def test_tree_uniform_value_is_exact():
    mdp = make_tree_hard(TreeHardConfig(depth=12, seed=0))
    assert policy_value(mdp, None, None) == 2.0**-11


def test_tree_has_exactly_one_winning_path():
    mdp = make_tree_hard(TreeHardConfig(depth=6, seed=3))
    path = tree_reward_path(mdp)
    winners = 0
    for actions in np.ndindex(*(2,) * (mdp.horizon - 1)):
        s = 0
        for a in actions:
            if mdp.failure[s]:
                break
            s = mdp.successors(s, a)[0][0]
        else:
            if not mdp.failure[s]:
                winners += 1
                assert s == path[-1]
    assert winners == 1


def test_tree_features_are_one_hot():
    mdp = make_tree_hard(TreeHardConfig(depth=5))
    X = mdp.features_of(np.arange(mdp.n_states))
    assert np.array_equal(X, np.eye(mdp.n_states))


@pytest.mark.parametrize("planted", [1, 2, 3])
def test_random_generator_plants_its_constant(planted):
    for seed in range(15):
        mdp, p = generate_random_epw(RandomEpwConfig(planted_c=planted, seed=seed))
        assert p == planted
        assert min_epw_constant(mdp).min_c == planted
        assert check_generic_game(mdp).passed


def test_random_generator_documented_case():
    mdp, _ = generate_random_epw(RandomEpwConfig(planted_c=3, states_per_level=6, horizon=10))
    assert min_epw_constant(mdp).min_c == 3


def test_random_generator_rejects_bad_configs():
    with pytest.raises(ValueError, match="planted_c"):
        generate_random_epw(RandomEpwConfig(planted_c=0))
    with pytest.raises(ValueError, match="states_per_level"):
        generate_random_epw(RandomEpwConfig(planted_c=3, states_per_level=4))
    with pytest.raises(ValueError, match="horizon"):
        generate_random_epw(RandomEpwConfig(planted_c=3, horizon=4))


def test_safe_backbone_in_random_instances():
    mdp, _ = generate_random_epw(RandomEpwConfig(planted_c=2, seed=5))
    safe = max_safe_set(mdp)
    for s in np.nonzero(safe.safe)[0]:
        if mdp.levels[s] == mdp.horizon - 1:
            continue
        assert any(all(safe.safe[t] for t, _ in mdp.successors(int(s), a)) for a in range(mdp.n_actions))


@pytest.mark.parametrize(
    "mdp",
    [make_paddle(), make_gates(), make_tree_hard(TreeHardConfig(depth=8))],
    ids=["paddle", "gates", "tree"],
)
def test_default_instances_are_generic_games(mdp):
    assert check_generic_game(mdp).passed


@pytest.mark.parametrize("mdp", [make_paddle(PaddleConfig(4, 3, 8)), make_gates(GatesConfig(5, 3, 12))], ids=["paddle", "gates"])
def test_rally_state_is_safe_iff_target_in_reach(mdp):
    safe = max_safe_set(mdp)
    X = mdp.features_of(np.arange(mdp.n_states))
    for s, (p, g, off, d, one, h) in enumerate(X):
        assert off == g - p and one == 1.0 and h == mdp.levels[s]
        # a check scheduled past the last level never happens
        assert bool(safe.safe[s]) == (abs(g - p) <= d or h + d > mdp.horizon - 1)


def test_config_guards():
    with pytest.raises(ValueError, match="horizon"):
        make_paddle(PaddleConfig(3, 4, 4))
    with pytest.raises(ValueError, match="gate_period"):
        make_gates(GatesConfig(gate_period=1))


def test_build_environment_specs(tmp_path):
    mdp = build_environment({"name": "gates", "width": 3, "horizon": 9})
    assert mdp.horizon == 9
    path = tmp_path / "g.json"
    mdp.save(path)
    assert build_environment({"name": "file", "path": str(path)}).n_states == mdp.n_states
    with pytest.raises(ValueError, match="unknown gates parameters"):
        build_environment({"name": "gates", "colour": 3})
    with pytest.raises(ValueError, match="unknown environment"):
        build_environment({"name": "pong"})
