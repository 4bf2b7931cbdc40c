"""Leveled episodic MDPs, trajectories and seeded rollout sampling.

Every state lives on exactly one level ``h`` in ``[0, H-1]``. A failure state
ends the game; trajectories keep their fixed length ``H`` by padding the
remaining levels with absorbed-failure states whose recorded actions are drawn
uniformly at random. The reward is implicit: a trajectory returns 1 iff its
level ``H-1`` state is an ordinary (non-failure) state.

Randomness is counter based. Trajectory ``i`` of a batch seeded with ``seed``
reads its uniforms from a Philox stream keyed by ``(seed, i)``, and every step
consumes exactly two of them (one for the action, one for the transition), so
serial, chunked and parallel sampling agree bit for bit.
"""

from __future__ import annotations

import enum
import json
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_SUM_TOL = 1e-12
SEED_MASK = (1 << 64) - 1


class StateKind(enum.IntEnum):
    ORDINARY = 0
    FAILURE = 1
    ABSORBED = 2


@dataclass(frozen=True)
class State:
    features: np.ndarray
    level: int
    kind: StateKind = StateKind.ORDINARY
    id: int = -1

    @property
    def failed(self) -> bool:
        return self.kind != StateKind.ORDINARY

    def __eq__(self, other):
        if not isinstance(other, State):
            return NotImplemented
        return (
            self.level == other.level
            and self.kind == other.kind
            and self.id == other.id
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self):
        return hash((self.level, int(self.kind), self.id, self.features.tobytes()))


@dataclass(frozen=True)
class Trajectory:
    """Exactly ``H`` (state, action) pairs.

    ``failed_at`` is the level of the first failure state, or ``None`` when the
    trajectory was won.
    """

    states: tuple[State, ...]
    actions: tuple[int, ...]
    failed_at: int | None = None

    @property
    def won(self) -> bool:
        return self.failed_at is None

    @property
    def status(self) -> str:
        return "Won" if self.won else f"Failed({self.failed_at})"

    def __len__(self):
        return len(self.states)


def trajectory_return(traj: Trajectory) -> int:
    return 1 if traj.won else 0


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    """Dedicated counter-based stream for trajectory ``index`` of batch ``seed``."""
    if index < 0:
        raise ValueError("trajectory index must be non-negative")
    key = (int(index) << 64) | (int(seed) & SEED_MASK)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(master: int, *path: int) -> int:
    """64-bit child seed from a master seed and an integer path (e.g. (tag, level))."""
    ss = np.random.SeedSequence(entropy=int(master) & SEED_MASK, spawn_key=tuple(int(p) for p in path))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw: smallest index whose cumulative mass exceeds ``u``."""
    cum = np.cumsum(probs, axis=-1)
    idx = (cum <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class LeveledMdp(ABC):
    """Episodic environment partitioned into ``horizon`` levels."""

    horizon: int
    n_actions: int
    state_dim: int

    @abstractmethod
    def initial_state(self) -> State: ...

    @abstractmethod
    def transition(self, state: State, action: int, rng: np.random.Generator) -> State:
        """Sample a successor of a non-failure state below level ``H-1``."""

    @abstractmethod
    def is_failure(self, state: State) -> bool: ...

    @property
    def enumerable(self) -> bool:
        return False

    def absorbed_state(self, level: int) -> State:
        return State(np.zeros(self.state_dim), level, StateKind.ABSORBED)


class TabularMdp(LeveledMdp):
    """Enumerable leveled MDP with explicit transition tables.

    State ids are contiguous per level: level ``h`` owns ids
    ``level_offsets[h] .. level_offsets[h+1]-1`` and the initial state is id 0.
    Successors of ``(s, a)`` are stored padded to a common width ``M`` in
    ``succ_ids``/``succ_probs`` (padding carries probability 0). Failure states
    and final-level states have no outgoing transitions.
    """

    def __init__(
        self,
        level_sizes: Sequence[int],
        n_actions: int,
        failure: np.ndarray,
        successors: dict[tuple[int, int], Sequence[tuple[int, float]]],
        features: np.ndarray | None = None,
        state_dim: int | None = None,
        name: str = "tabular",
        meta: dict | None = None,
    ):
        if len(level_sizes) < 1 or level_sizes[0] != 1:
            raise ValueError("level 0 must hold exactly the initial state")
        if n_actions < 1:
            raise ValueError("need at least one action")
        self.horizon = len(level_sizes)
        self.n_actions = int(n_actions)
        self.level_offsets = np.concatenate([[0], np.cumsum(level_sizes)]).astype(np.int64)
        self.n_states = int(self.level_offsets[-1])
        self.levels = np.repeat(np.arange(self.horizon), level_sizes)
        self.failure = np.asarray(failure, dtype=bool)
        if self.failure.shape != (self.n_states,):
            raise ValueError("failure flags must cover every state")
        if features is not None:
            features = np.asarray(features, dtype=float)
            if features.shape[0] != self.n_states:
                raise ValueError("feature table must cover every state")
            state_dim = features.shape[1]
        if state_dim is None:
            raise ValueError("state_dim is required without a feature table")
        self._features = features
        self.state_dim = int(state_dim)
        self.name = name
        self.meta = dict(meta or {})
        self._build_tables(successors)

    def _build_tables(self, successors):
        A = self.n_actions
        width = max((len(v) for v in successors.values()), default=1)
        ids = np.zeros((self.n_states, A, width), dtype=np.int64)
        probs = np.zeros((self.n_states, A, width))
        has = np.zeros((self.n_states, A), dtype=bool)
        for (s, a), succ in successors.items():
            h = self.levels[s]
            if self.failure[s] or h == self.horizon - 1:
                raise ValueError(f"state {s} must not have transitions")
            if not 0 <= a < A:
                raise ValueError(f"action {a} out of range")
            total = 0.0
            lo, hi = self.level_offsets[h + 1], self.level_offsets[h + 2]
            for k, (t, p) in enumerate(succ):
                if not lo <= t < hi:
                    raise ValueError(f"successor {t} of state {s} is not on level {h + 1}")
                if p < 0:
                    raise ValueError("negative transition probability")
                ids[s, a, k] = t
                probs[s, a, k] = p
                total += p
            if abs(total - 1.0) > PROB_SUM_TOL:
                raise ValueError(f"probabilities of ({s}, {a}) sum to {total!r}")
            has[s, a] = True
        # padding slots point at a valid id of the next level so gathers never go out of range
        for s in range(self.n_states):
            h = self.levels[s]
            pad = self.level_offsets[min(h + 1, self.horizon - 1)]
            for a in range(A):
                n_real = len(successors.get((s, a), ()))
                ids[s, a, n_real:] = pad
        needs = (~self.failure) & (self.levels < self.horizon - 1)
        missing = needs[:, None] & ~has
        if missing.any():
            s, a = np.argwhere(missing)[0]
            raise ValueError(f"missing transitions for state {s}, action {a}")
        self.succ_ids = ids
        self.succ_probs = probs
        cum = np.cumsum(probs, axis=-1)
        # pin the last real slot to exactly 1 so inverse-CDF never runs off the support
        for s, a in zip(*np.nonzero(has)):
            last = max(int(np.nonzero(probs[s, a])[0].max()), 0)
            cum[s, a, last:] = 1.0
        self.succ_cum = cum

    # -- enumeration ---------------------------------------------------
    @property
    def enumerable(self) -> bool:
        return True

    def level_ids(self, h: int) -> np.ndarray:
        return np.arange(self.level_offsets[h], self.level_offsets[h + 1])

    def level_size(self, h: int) -> int:
        return int(self.level_offsets[h + 1] - self.level_offsets[h])

    def features_of(self, ids) -> np.ndarray:
        """Feature rows for state ids; ``-1`` (absorbed) maps to the zero vector."""
        ids = np.asarray(ids, dtype=np.int64)
        out = np.zeros(ids.shape + (self.state_dim,))
        ok = ids >= 0
        if ok.any():
            out[ok] = self._state_features(ids[ok])
        return out

    def _state_features(self, ids: np.ndarray) -> np.ndarray:
        return self._features[ids]

    def successors(self, s: int, a: int) -> list[tuple[int, float]]:
        p = self.succ_probs[s, a]
        keep = p > 0
        return list(zip(self.succ_ids[s, a][keep].tolist(), p[keep].tolist()))

    def transition_matrix_row(self, s: int, a: int) -> dict[int, float]:
        return dict(self.successors(s, a))

    def state(self, sid: int) -> State:
        kind = StateKind.FAILURE if self.failure[sid] else StateKind.ORDINARY
        return State(self.features_of(np.array([sid]))[0], int(self.levels[sid]), kind, int(sid))

    def state_norm_bound(self) -> float:
        norms = [np.linalg.norm(self.features_of(self.level_ids(h)), axis=1).max() for h in range(self.horizon)]
        return float(max(norms))

    # -- LeveledMdp ----------------------------------------------------
    def initial_state(self) -> State:
        return self.state(0)

    def is_failure(self, state: State) -> bool:
        return state.id >= 0 and bool(self.failure[state.id])

    def transition(self, state: State, action: int, rng: np.random.Generator) -> State:
        if state.level >= self.horizon - 1:
            raise ValueError("no transitions out of the final level")
        u = rng.random()
        k = int((self.succ_cum[state.id, action] <= u).sum())
        k = min(k, self.succ_ids.shape[-1] - 1)
        return self.state(int(self.succ_ids[state.id, action, k]))

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        levels = []
        for h in range(self.horizon):
            ids = self.level_ids(h)
            feats = self.features_of(ids)
            levels.append(
                [
                    {"id": int(s), "features": [float(x) for x in f], "failure": bool(self.failure[s])}
                    for s, f in zip(ids, feats)
                ]
            )
        transitions = []
        for s in range(self.n_states):
            if self.failure[s] or self.levels[s] == self.horizon - 1:
                continue
            for a in range(self.n_actions):
                transitions.append(
                    {"state": s, "action": a, "successors": [[t, p] for t, p in self.successors(s, a)]}
                )
        return {
            "format": "epw-instance",
            "version": 1,
            "name": self.name,
            "horizon": self.horizon,
            "n_actions": self.n_actions,
            "state_dim": self.state_dim,
            "meta": self.meta,
            "levels": levels,
            "transitions": transitions,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        if data.get("format") != "epw-instance":
            raise ValueError("not an epw instance document")
        H, A, d = int(data["horizon"]), int(data["n_actions"]), int(data["state_dim"])
        if len(data["levels"]) != H:
            raise ValueError(f"expected {H} level blocks, found {len(data['levels'])}")
        remap: dict[int, int] = {}
        feats, fail, sizes = [], [], []
        for block in data["levels"]:
            sizes.append(len(block))
            for rec in block:
                if rec["id"] in remap:
                    raise ValueError(f"duplicate state id {rec['id']}")
                remap[rec["id"]] = len(feats)
                f = [float(x) for x in rec["features"]]
                if len(f) != d:
                    raise ValueError(f"state {rec['id']} has {len(f)} features, expected {d}")
                feats.append(f)
                fail.append(bool(rec["failure"]))
        succ = {}
        for rec in data["transitions"]:
            key = (remap[rec["state"]], int(rec["action"]))
            if key in succ:
                raise ValueError(f"duplicate transition record {rec['state']}, {rec['action']}")
            succ[key] = [(remap[t], float(p)) for t, p in rec["successors"]]
        return cls(
            sizes,
            A,
            np.array(fail),
            succ,
            features=np.array(feats).reshape(len(feats), d),
            name=data.get("name", "tabular"),
            meta=data.get("meta"),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "TabularMdp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# sampling

PolicyFn = Callable[[int, np.ndarray], np.ndarray]
"""(level, features[m, d]) -> action probabilities[m, |A|]."""


def policy_fn(family, thetas) -> PolicyFn:
    slots = thetas.slots if hasattr(thetas, "slots") else thetas

    def fn(h, X):
        return family.probs(slots[h], X)

    return fn


def uniform_policy(n_actions: int) -> PolicyFn:
    def fn(h, X):
        return np.full((len(X), n_actions), 1.0 / n_actions)

    fn.ignores_features = True
    return fn


def _as_policy(mdp, family, thetas) -> PolicyFn:
    if family is None:
        return uniform_policy(mdp.n_actions) if thetas is None else thetas
    return policy_fn(family, thetas)


def sample_trajectory(mdp: LeveledMdp, family, thetas, rng: np.random.Generator) -> Trajectory:
    """Roll out one episode; level ``h`` acts with slot ``h`` of ``thetas``.

    Pass ``family=None`` and ``thetas=None`` for the uniform policy, or
    ``family=None`` with a :data:`PolicyFn` as ``thetas``.
    """
    pi = _as_policy(mdp, family, thetas)
    H, A = mdp.horizon, mdp.n_actions
    state = mdp.initial_state()
    states, actions = [], []
    failed_at = None
    for h in range(H):
        u_act = rng.random()
        if failed_at is None and mdp.is_failure(state):
            failed_at = h
            state = State(state.features, h, StateKind.FAILURE, state.id)
        if failed_at is None:
            p = pi(h, state.features[None, :])[0]
            a = int(inverse_cdf(p, np.array(u_act)))
        else:
            a = min(int(u_act * A), A - 1)
        states.append(state)
        actions.append(a)
        if h == H - 1:
            break
        if failed_at is None:
            state = mdp.transition(state, a, rng)
        else:
            rng.random()
            state = mdp.absorbed_state(h + 1)
    return Trajectory(tuple(states), tuple(actions), failed_at)


@dataclass
class Batch:
    """``n`` trajectories stored column-wise.

    ``ids`` is ``-1`` at absorbed-failure positions and everywhere for
    non-enumerable MDPs.
    """

    features: np.ndarray  # (n, H, d)
    actions: np.ndarray  # (n, H)
    kinds: np.ndarray  # (n, H) StateKind values
    ids: np.ndarray  # (n, H)
    seed: int
    behavior: str = ""
    _trajs: list | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def failed_by(self, idx: int) -> np.ndarray:
        return self.kinds[:, idx] != StateKind.ORDINARY

    def returns(self) -> np.ndarray:
        return (self.kinds[:, -1] == StateKind.ORDINARY).astype(int)

    def trajectory(self, i: int) -> Trajectory:
        kinds = self.kinds[i]
        fail = np.nonzero(kinds == StateKind.FAILURE)[0]
        failed_at = int(fail[0]) if len(fail) else None
        states = tuple(
            State(self.features[i, h].copy(), h, StateKind(int(kinds[h])), int(self.ids[i, h]))
            for h in range(self.horizon)
        )
        return Trajectory(states, tuple(int(a) for a in self.actions[i]), failed_at)

    @property
    def trajectories(self) -> list[Trajectory]:
        if self._trajs is None:
            self._trajs = [self.trajectory(i) for i in range(self.n)]
        return self._trajs

    def same_as(self, other: "Batch") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.kinds, other.kinds)
            and np.array_equal(self.ids, other.ids)
        )


def _stream_uniforms(seed: int, start: int, stop: int, H: int) -> np.ndarray:
    return np.stack([trajectory_stream(seed, i).random(2 * H) for i in range(start, stop)])


def simulate_tabular(mdp: TabularMdp, pi: PolicyFn, uniforms: np.ndarray):
    """Vectorised rollouts driven by pre-drawn uniforms of shape (n, 2H).

    Returns ``(ids, actions, kinds)``. Consumes the uniforms exactly as
    :func:`sample_trajectory` consumes its stream.
    """
    n = uniforms.shape[0]
    H, A = mdp.horizon, mdp.n_actions
    ids = np.full((n, H), -1, dtype=np.int64)
    actions = np.zeros((n, H), dtype=np.int64)
    kinds = np.full((n, H), int(StateKind.ABSORBED), dtype=np.int8)
    cur = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for h in range(H):
        u_act = uniforms[:, 2 * h]
        ids[alive, h] = cur[alive]
        fail_now = alive & mdp.failure[np.where(alive, cur, 0)]
        kinds[alive, h] = np.where(fail_now[alive], int(StateKind.FAILURE), int(StateKind.ORDINARY))
        acting = alive & ~fail_now
        a = np.minimum((u_act * A).astype(np.int64), A - 1)
        if acting.any():
            # only the visited states are evaluated; rows are independent so this matches per-state calls
            visited, inv = np.unique(cur[acting], return_inverse=True)
            X = np.zeros((len(visited), 0)) if getattr(pi, "ignores_features", False) else mdp.features_of(visited)
            probs = pi(h, X)
            a[acting] = inverse_cdf(probs[inv.ravel()], u_act[acting])
        actions[:, h] = a
        alive = acting
        if h == H - 1:
            break
        if alive.any():
            u_tr = uniforms[alive, 2 * h + 1]
            s, act = cur[alive], a[alive]
            cum = mdp.succ_cum[s, act]
            k = np.minimum((cum <= u_tr[:, None]).sum(-1), cum.shape[-1] - 1)
            cur[alive] = mdp.succ_ids[s, act, k]
    return ids, actions, kinds


def _sample_chunk(mdp, pi, seed, start, stop):
    H = mdp.horizon
    if isinstance(mdp, TabularMdp):
        ids, actions, kinds = simulate_tabular(mdp, pi, _stream_uniforms(seed, start, stop, H))
        return mdp.features_of(ids), actions, kinds, ids
    trajs = [sample_trajectory(mdp, None, pi, trajectory_stream(seed, i)) for i in range(start, stop)]
    feats = np.stack([[s.features for s in t.states] for t in trajs]).reshape(len(trajs), H, mdp.state_dim)
    actions = np.array([t.actions for t in trajs], dtype=np.int64).reshape(len(trajs), H)
    kinds = np.array([[int(s.kind) for s in t.states] for t in trajs], dtype=np.int8).reshape(len(trajs), H)
    ids = np.array([[s.id for s in t.states] for t in trajs], dtype=np.int64).reshape(len(trajs), H)
    return feats, actions, kinds, ids


def sample_batch(
    mdp: LeveledMdp, family, thetas, n: int, seed: int, workers: int = 1, behavior: str = ""
) -> Batch:
    """Sample ``n`` trajectories; trajectory ``i`` uses ``trajectory_stream(seed, i)``.

    ``workers > 1`` splits the index range across threads; the result does
    not depend on the split.
    """
    if n < 1:
        raise ValueError("batch size must be positive")
    pi = _as_policy(mdp, family, thetas)
    if not behavior and hasattr(thetas, "identity"):
        behavior = thetas.identity()
    workers = max(1, min(int(workers), n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    if workers == 1:
        parts = [_sample_chunk(mdp, pi, seed, 0, n)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(
                pool.map(lambda k: _sample_chunk(mdp, pi, seed, bounds[k], bounds[k + 1]), range(workers))
            )
    feats, actions, kinds, ids = (np.concatenate(x) for x in zip(*parts))
    return Batch(feats, actions, kinds, ids, int(seed), behavior)
