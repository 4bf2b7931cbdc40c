"""Concrete Generic Game instances, all enumerable.

* paddle: a Pong-like rally game. The ball column is fixed during a rally and
  the ball distance shrinks by one per step; at distance 0 the paddle must sit
  under the ball.
* gates: a Skiing-like slalom. Every ``G`` steps the skier must be in the gate
  column; the next gate appears right after the previous one is passed.
* tree-hard: binary tree with one rewarding leaf (hard exploration instance).
* random-epw: random layered instance with a planted doomed chain, used to
  exercise the EPW verifier.

Paddle and gates features are ``(agent col, target col, target - agent,
distance, 1, level)``. The signed offset and the constant let a linear softmax
express "move toward the target" with a small parameter norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp

STAY, LEFT, RIGHT = 1, 0, 2  # action a moves the agent by a - 1


@dataclass(frozen=True)
class PaddleConfig:
    width: int = 3
    spawn_distance: int = 2
    horizon: int = 6
    # spawns are part of the transition kernel; the seed only feeds config identity
    seed: int = 0


@dataclass(frozen=True)
class GatesConfig:
    width: int = 5
    gate_period: int = 3
    horizon: int = 12
    seed: int = 0


@dataclass(frozen=True)
class TreeHardConfig:
    depth: int = 12
    seed: int = 0


@dataclass(frozen=True)
class RandomEpwConfig:
    planted_c: int = 2
    states_per_level: int = 6
    horizon: int = 10
    n_actions: int = 3
    seed: int = 0


def _rally_game(width, distance, horizon, spawn_columns, name, meta):
    """Shared builder for paddle/gates: states (agent, target, dist) per level."""
    start = (width // 2, width // 2, 0)
    levels = [[start]]
    index = [{start: 0}]
    failing = [[False]]
    edges = []  # (level, local, action, [(local_next, p)])
    for h in range(horizon - 1):
        nxt: dict = {}
        nxt_fail: list = []

        def add(key):
            if key not in nxt:
                nxt[key] = len(nxt)
                p, g, d = key
                nxt_fail.append(d == 0 and p != g)
            return nxt[key]

        for local, (p, g, d) in enumerate(levels[h]):
            if failing[h][local]:
                continue
            for a in range(3):
                q = min(max(p + a - 1, 0), width - 1)
                if d == 0:
                    cols = spawn_columns(q)
                    succ = [(add((q, c, distance)), 1.0 / len(cols)) for c in cols]
                else:
                    succ = [(add((q, g, d - 1)), 1.0)]
                edges.append((h, local, a, succ))
        order = sorted(nxt, key=nxt.get)
        levels.append(order)
        index.append(nxt)
        failing.append(nxt_fail)

    sizes = [len(lv) for lv in levels]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    feats = np.array(
        [[p, g, g - p, d, 1.0, h] for h, lv in enumerate(levels) for (p, g, d) in lv], dtype=float
    )
    fail = np.array([f for fl in failing for f in fl])
    succ = {
        (offsets[h] + local, a): [(offsets[h + 1] + t, pr) for t, pr in s] for h, local, a, s in edges
    }
    return TabularMdp(sizes, 3, fail, succ, features=feats, name=name, meta=meta)


def make_paddle(cfg: PaddleConfig = PaddleConfig()) -> TabularMdp:
    W, D, H = cfg.width, cfg.spawn_distance, cfg.horizon
    if W < 1 or D < 1:
        raise ValueError("paddle needs width >= 1 and spawn_distance >= 1")
    if H < D + 1:
        raise ValueError(f"horizon {H} shorter than spawn_distance + 1 = {D + 1}")
    cols = list(range(W))
    return _rally_game(
        W, D, H, lambda q: cols, "paddle", {"width": W, "spawn_distance": D, "horizon": H}
    )


def make_gates(cfg: GatesConfig = GatesConfig()) -> TabularMdp:
    W, G, H = cfg.width, cfg.gate_period, cfg.horizon
    if G < 2:
        raise ValueError("gate_period must be at least 2")
    if W < 1 or H < 1:
        raise ValueError("gates needs width >= 1 and horizon >= 1")
    reach = G - 1

    def spawn(q):
        # gates appear within the skier's reach so the game stays winnable
        return list(range(max(0, q - reach), min(W - 1, q + reach) + 1))

    return _rally_game(W, reach, H, spawn, "gates", {"width": W, "gate_period": G, "horizon": H})


def gate_count(cfg: GatesConfig) -> int:
    return (cfg.horizon - 1) // cfg.gate_period


class TreeHardMdp(TabularMdp):
    """Tabular tree whose features are one-hot over all states, built on demand."""

    def _state_features(self, ids):
        out = np.zeros((len(ids), self.state_dim))
        out[np.arange(len(ids)), ids] = 1.0
        return out


def make_tree_hard(cfg: TreeHardConfig = TreeHardConfig()) -> TabularMdp:
    """Binary tree with ``H`` levels and a single rewarding leaf.

    Levels ``0..H-2`` are full (``2^h`` states); action ``a`` from local index
    ``i`` leads to child ``2i + a``. Penultimate states off the rewarding path
    are failure states. The on-path penultimate state sends the right action to
    the rewarding leaf and the wrong one to a failure leaf, so a uniform policy
    wins with probability exactly ``2^-(H-1)``.
    """
    H = cfg.depth
    if H < 2:
        raise ValueError("tree-hard needs depth >= 2")
    rng = np.random.default_rng(cfg.seed)
    target = int(rng.integers(0, 2 ** (H - 1)))
    sizes = [2**h for h in range(H - 1)] + [2]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    fail = np.zeros(n, dtype=bool)
    pen = H - 2
    on_path = target >> 1
    fail[offsets[pen] : offsets[pen + 1]] = True
    fail[offsets[pen] + on_path] = False
    leaf, trap = int(offsets[H - 1]), int(offsets[H - 1]) + 1
    fail[trap] = True
    succ = {}
    for h in range(H - 2):
        for i in range(sizes[h]):
            for a in range(2):
                succ[(int(offsets[h] + i), a)] = [(int(offsets[h + 1] + 2 * i + a), 1.0)]
    good = target & 1
    for a in range(2):
        succ[(int(offsets[pen] + on_path), a)] = [(leaf if a == good else trap, 1.0)]
    meta = {"depth": H, "target": target, "path": [(target >> (H - 1 - k)) for k in range(H - 1)]}
    return TreeHardMdp(sizes, 2, fail, succ, state_dim=n, name="tree-hard", meta=meta)


def tree_reward_path(mdp: TabularMdp) -> list[int]:
    """State ids on the rewarding path, level 0 to the leaf."""
    H = mdp.horizon
    target = mdp.meta["target"]
    ids = [int(mdp.level_offsets[h] + (target >> (H - 1 - h))) for h in range(H - 1)]
    return ids + [int(mdp.level_offsets[H - 1])]


def generate_random_epw(cfg: RandomEpwConfig) -> tuple[TabularMdp, int]:
    """Random layered Generic Game whose minimal EPW constant equals ``planted_c``.

    Each level above 0 holds ``K`` states playing one of three roles: safe,
    failure, or stage ``j`` of a doomed chain. Stage ``j`` states only lead to
    stage ``j+1`` (stage ``planted_c`` leads only to failure), and chains are
    placed so they always end inside the horizon. Every safe state keeps one
    action whose successors are all safe.
    """
    P, K, H, A = cfg.planted_c, cfg.states_per_level, cfg.horizon, cfg.n_actions
    if P < 1:
        raise ValueError("planted_c must be >= 1: a length-0 doomed chain is a failure state")
    if K < P + 2:
        raise ValueError(f"states_per_level {K} cannot hold a safe state, a failure state and {P} chain stages")
    if H < P + 2:
        raise ValueError(f"horizon {H} too short for a chain of length {P}")
    if A < 2:
        raise ValueError("need at least two actions")
    rng = np.random.default_rng(cfg.seed)

    def stage_ok(j, h):
        return 1 <= j <= h and h + (P - j + 1) <= H - 1

    roles = [["safe"]]
    for h in range(1, H):
        base = ["safe", "fail"] + [f"s{j}" for j in range(1, P + 1) if stage_ok(j, h)]
        pool = ["safe", "fail"] + [f"s{j}" for j in range(1, P + 1) if stage_ok(j, h)]
        extra = [pool[i] for i in rng.integers(len(pool), size=K - len(base))]
        lv = base + extra
        rng.shuffle(lv)
        roles.append(lv)

    sizes = [1] + [K] * (H - 1)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    fail = np.array([r == "fail" for lv in roles for r in lv])

    def ids_with(h, role):
        return [int(offsets[h] + i) for i, r in enumerate(roles[h]) if r == role]

    def draw(cands, lo, hi):
        k = int(rng.integers(lo, min(hi, len(cands)) + 1))
        pick = rng.choice(cands, size=k, replace=False)
        w = rng.dirichlet(np.ones(k))
        return [(int(t), float(p)) for t, p in zip(pick, w)]

    entry_level = int(rng.integers(0, H - 1 - P))
    succ = {}
    for h in range(H - 1):
        nxt_all = list(range(int(offsets[h + 1]), int(offsets[h + 2])))
        nxt_safe = ids_with(h + 1, "safe")
        safe_here = ids_with(h, "safe")
        entry_state = safe_here[int(rng.integers(len(safe_here)))] if h == entry_level else None
        for i, role in enumerate(roles[h]):
            s = int(offsets[h] + i)
            if role == "fail":
                continue
            if role == "safe":
                good = int(rng.integers(A))
                risky = [a for a in range(A) if a != good]
                for a in range(A):
                    succ[(s, a)] = draw(nxt_safe, 1, 2) if a == good else draw(nxt_all, 1, 3)
                if s == entry_state:
                    a = risky[int(rng.integers(len(risky)))]
                    head = ids_with(h + 1, "s1")
                    keep = [t for t, _ in succ[(s, a)] if t not in head][:1]
                    chosen = [head[int(rng.integers(len(head)))]] + keep
                    w = rng.dirichlet(np.ones(len(chosen)))
                    succ[(s, a)] = [(int(t), float(p)) for t, p in zip(chosen, w)]
                continue
            j = int(role[1:])
            targets = ids_with(h + 1, f"s{j + 1}") if j < P else ids_with(h + 1, "fail")
            for a in range(A):
                succ[(s, a)] = draw(targets, 1, 2)

    feats = np.zeros((int(offsets[-1]), K + 2))
    for h in range(H):
        for i in range(sizes[h]):
            s = int(offsets[h] + i)
            feats[s, i] = 1.0
            feats[s, K] = 1.0
            feats[s, K + 1] = h
    meta = {"planted_c": P, "states_per_level": K, "horizon": H, "n_actions": A, "seed": cfg.seed}
    mdp = TabularMdp(sizes, A, fail, succ, features=feats, name="random-epw", meta=meta)
    return mdp, P


ENVIRONMENTS = {
    "paddle": (PaddleConfig, make_paddle),
    "gates": (GatesConfig, make_gates),
    "tree-hard": (TreeHardConfig, make_tree_hard),
    "random-epw": (RandomEpwConfig, lambda cfg: generate_random_epw(cfg)[0]),
}


def build_environment(spec: dict) -> TabularMdp:
    """Build from ``{"name": ..., <config fields>}`` or ``{"name": "file", "path": ...}``."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "file":
        return TabularMdp.load(spec["path"])
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)} or 'file'")
    cfg_cls, factory = ENVIRONMENTS[name]
    fields = set(cfg_cls.__dataclass_fields__)
    unknown = set(spec) - fields
    if unknown:
        raise ValueError(f"unknown {name} parameters: {sorted(unknown)}")
    return factory(cfg_cls(**spec))
