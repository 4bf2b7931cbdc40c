"""Exact dynamic programming on enumerable MDPs.

All quantities here are computed from the transition tables, never from
samples, and serve as ground truth for the learner and the samplers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp
from .policies import ContractError, PolicyFamily, PolicyVector

AGREEMENT_TOL = 1e-9


class ConsistencyError(RuntimeError):
    """Two independent exact computations disagreed."""


def _require_tabular(mdp):
    if not isinstance(mdp, TabularMdp):
        raise ContractError("oracle operations need an enumerable MDP")
    return mdp


def _level_push(mdp: TabularMdp, h: int, mass_sa: np.ndarray) -> np.ndarray:
    """Push state-action mass at level h (n_h, A) to a distribution over level h+1."""
    lo, hi = mdp.level_offsets[h], mdp.level_offsets[h + 1]
    ids = mdp.succ_ids[lo:hi] - mdp.level_offsets[h + 1]
    w = mass_sa[:, :, None] * mdp.succ_probs[lo:hi]
    return np.bincount(ids.ravel(), weights=w.ravel(), minlength=mdp.level_size(h + 1))


def _level_probs(mdp: TabularMdp, family: PolicyFamily | None, theta, h: int) -> np.ndarray:
    n = mdp.level_size(h)
    if family is None:
        return np.full((n, mdp.n_actions), 1.0 / mdp.n_actions)
    return family.probs(theta, mdp.features_of(mdp.level_ids(h)))


def _level_fail(mdp, h):
    return mdp.failure[mdp.level_offsets[h] : mdp.level_offsets[h + 1]]


# ---------------------------------------------------------------------------
# safe sets and the EPW constant


@dataclass
class SafeSetTable:
    safe: np.ndarray  # bool per state id
    level_offsets: np.ndarray

    def level(self, h: int) -> np.ndarray:
        return self.safe[self.level_offsets[h] : self.level_offsets[h + 1]]

    def sizes(self) -> list[int]:
        return [int(self.level(h).sum()) for h in range(len(self.level_offsets) - 1)]

    def __contains__(self, sid):
        return bool(self.safe[sid])


def max_safe_set(mdp: TabularMdp, seed: np.ndarray | None = None) -> SafeSetTable:
    """Backward DP: safe iff non-failure and (final level or some action stays safe).

    ``seed`` optionally supplies a candidate table used for the final level
    only; passing a previous result recomputes the fixed point.
    """
    mdp = _require_tabular(mdp)
    H = mdp.horizon
    safe = np.zeros(mdp.n_states, dtype=bool)
    last = mdp.level_ids(H - 1)
    safe[last] = ~mdp.failure[last]
    if seed is not None:
        safe[last] &= seed[last]
    for h in range(H - 2, -1, -1):
        ids = mdp.level_ids(h)
        ok = (mdp.succ_probs[ids] <= 0) | safe[mdp.succ_ids[ids]]
        safe[ids] = ~mdp.failure[ids] & ok.all(axis=2).any(axis=1)
    return SafeSetTable(safe, mdp.level_offsets)


def _positive_edges(mdp, ids):
    return mdp.succ_probs[ids] > 0


def ancestors(mdp: TabularMdp, s_prime: int, x: int) -> np.ndarray:
    """States on level max(0, h - x) from which ``s_prime`` is reachable with positive probability."""
    mdp = _require_tabular(mdp)
    if x < 0:
        raise ValueError("x must be non-negative")
    h = int(mdp.levels[s_prime])
    target_level = max(0, h - x)
    reach = np.zeros(mdp.n_states, dtype=bool)
    reach[s_prime] = True
    for lvl in range(h - 1, target_level - 1, -1):
        ids = mdp.level_ids(lvl)
        hit = _positive_edges(mdp, ids) & reach[mdp.succ_ids[ids]]
        reach[ids] = hit.any(axis=(1, 2))
    cand = mdp.level_ids(target_level)
    return cand[reach[cand]]


def _nonfailure_reach(mdp: TabularMdp) -> list[np.ndarray]:
    """reach[k][s]: s is non-failure and reaches a non-failure state k levels later."""
    nonfail = ~mdp.failure
    reach = [nonfail.copy()]
    for k in range(1, mdp.horizon):
        prev = reach[-1]
        hit = (mdp.succ_probs > 0) & prev[mdp.succ_ids]
        reach.append(nonfail & hit.any(axis=(1, 2)))
    return reach


def _descendant(mdp, s, x):
    """Smallest-id non-failure state reachable from s in exactly x steps (None if none)."""
    front = np.zeros(mdp.n_states, dtype=bool)
    front[s] = True
    for _ in range(x):
        nxt = np.zeros(mdp.n_states, dtype=bool)
        src = np.nonzero(front & ~mdp.failure)[0]
        if len(src) == 0:
            return None
        pos = mdp.succ_probs[src] > 0
        nxt[mdp.succ_ids[src][pos]] = True
        front = nxt
    hits = np.nonzero(front & ~mdp.failure)[0]
    return int(hits[0]) if len(hits) else None


@dataclass
class EpwCertificate:
    min_c: int
    witnesses: dict[int, tuple[int, int]] = field(default_factory=dict)
    holds: bool = True
    safe_sizes: list[int] = field(default_factory=list)

    def to_dict(self):
        return {
            "min_c": self.min_c,
            "holds": self.holds,
            "witnesses": {str(x): {"state": s, "ancestor": a} for x, (s, a) in sorted(self.witnesses.items())},
            "safe_set_sizes": self.safe_sizes,
        }


def min_epw_constant(mdp: TabularMdp, safe: SafeSetTable | None = None) -> EpwCertificate:
    """Smallest x in [0, H-1] such that every x-ancestor of every non-failure state is safe.

    For each violated x < min_c the certificate stores a pair (s', s): a
    non-failure state and one of its unsafe x-ancestors. If the initial state
    is unsafe no x works; the result is H-1 with ``holds=False``.
    """
    mdp = _require_tabular(mdp)
    H = mdp.horizon
    safe = safe or max_safe_set(mdp)
    unsafe_nf = ~safe.safe & ~mdp.failure
    reach = _nonfailure_reach(mdp)
    witnesses = {}
    s0_unsafe = bool(unsafe_nf[0])
    for x in range(H):
        bad = np.nonzero(unsafe_nf & reach[x])[0]
        if len(bad) == 0 and not s0_unsafe:
            return EpwCertificate(x, witnesses, True, safe.sizes())
        if len(bad):
            s = int(bad[0])
            witnesses[x] = (_descendant(mdp, s, x), s)
        else:
            witnesses[x] = (0, 0)
    return EpwCertificate(H - 1, witnesses, False, safe.sizes())


def validate_certificate(mdp: TabularMdp, cert: EpwCertificate) -> bool:
    """Independent audit through :func:`ancestors` and brute force over all states."""
    safe = max_safe_set(mdp)
    for x, (s_prime, s) in cert.witnesses.items():
        if x >= cert.min_c and cert.holds:
            return False
        if mdp.failure[s_prime] or safe.safe[s]:
            return False
        if s not in set(ancestors(mdp, s_prime, x).tolist()):
            return False
    if not cert.holds:
        return True
    for x in range(cert.min_c):
        if x not in cert.witnesses:
            return False
    for s_prime in np.nonzero(~mdp.failure)[0]:
        anc = ancestors(mdp, int(s_prime), cert.min_c)
        if not safe.safe[anc].all():
            return False
    return True


# ---------------------------------------------------------------------------
# Generic Game checks


@dataclass
class GenericGameReport:
    failure_set_nonempty: bool
    binary_rewards_ok: bool
    best_failure_prob: float
    threshold: float

    @property
    def completeness_ok(self) -> bool:
        return self.best_failure_prob <= self.threshold

    @property
    def trivial(self) -> bool:
        return not self.failure_set_nonempty

    @property
    def passed(self) -> bool:
        return self.binary_rewards_ok and self.completeness_ok

    def to_dict(self):
        return {
            "failure_set_nonempty": self.failure_set_nonempty,
            "trivial_game": self.trivial,
            "binary_rewards_ok": self.binary_rewards_ok,
            "best_failure_prob": self.best_failure_prob,
            "completeness_threshold": self.threshold,
            "completeness_ok": self.completeness_ok,
            "passed": self.passed,
        }


def min_failure_prob(mdp: TabularMdp) -> np.ndarray:
    """Per-state minimum failure probability over deterministic policies."""
    mdp = _require_tabular(mdp)
    H = mdp.horizon
    q = mdp.failure.astype(float)
    for h in range(H - 2, -1, -1):
        ids = mdp.level_ids(h)
        val = (mdp.succ_probs[ids] * q[mdp.succ_ids[ids]]).sum(axis=2).min(axis=1)
        q[ids] = np.where(mdp.failure[ids], 1.0, val)
    return q


def check_generic_game(mdp: TabularMdp) -> GenericGameReport:
    mdp = _require_tabular(mdp)
    H = mdp.horizon
    # rewards are implicit in the final-level failure flags; the structure is sound
    # when some final state is winnable and only live non-final states move on
    last = mdp.level_ids(H - 1)
    live = ~mdp.failure & (mdp.levels < H - 1)
    sums = mdp.succ_probs.sum(axis=2)
    moves_ok = np.allclose(sums[live], 1.0, atol=1e-12) and np.all(sums[~live] == 0)
    binary_ok = bool((~mdp.failure[last]).any() and moves_ok)
    best = float(min_failure_prob(mdp)[0])
    return GenericGameReport(bool(mdp.failure.any()), binary_ok, best, 2.0 ** (-H))


# ---------------------------------------------------------------------------
# values and occupancies


def _slots(thetas):
    return thetas.slots if isinstance(thetas, PolicyVector) else thetas


def occupancies(mdp: TabularMdp, family: PolicyFamily | None, thetas, upto: int | None = None):
    """Forward DP. Returns per-level state distributions and absorbed-failure mass.

    ``family=None`` plays the uniform policy. ``dists[h]`` covers level-h
    states; ``absorbed[h]`` is the mass that failed strictly before level h.
    """
    mdp = _require_tabular(mdp)
    H = mdp.horizon if upto is None else upto + 1
    slots = None if family is None else _slots(thetas)
    dists = [np.array([1.0])]
    absorbed = [0.0]
    for h in range(H - 1):
        d = dists[h]
        fail = _level_fail(mdp, h)
        pi = _level_probs(mdp, family, None if slots is None else slots[h], h)
        live = np.where(fail, 0.0, d)
        dists.append(_level_push(mdp, h, live[:, None] * pi))
        absorbed.append(absorbed[h] + float(d[fail].sum()))
    return dists, absorbed


def policy_value(mdp: TabularMdp, family: PolicyFamily | None, thetas) -> float:
    """P(level H-1 state is a non-failure state) under the level-indexed policy."""
    dists, _ = occupancies(mdp, family, thetas)
    last = dists[-1]
    return float(last[~_level_fail(mdp, mdp.horizon - 1)].sum())


def uniform_value_by_matrices(mdp: TabularMdp) -> float:
    """Uniform-policy value through explicit per-level transition matrices."""
    mdp = _require_tabular(mdp)
    A = mdp.n_actions
    v = np.zeros(mdp.level_size(0))
    v[0] = 1.0
    for h in range(mdp.horizon - 1):
        n0, n1 = mdp.level_size(h), mdp.level_size(h + 1)
        M = np.zeros((n0, n1))
        for i, s in enumerate(mdp.level_ids(h)):
            if mdp.failure[s]:
                continue
            for a in range(A):
                for t, p in mdp.successors(int(s), a):
                    M[i, t - mdp.level_offsets[h + 1]] += p / A
        v = v @ M
    return float(v[~_level_fail(mdp, mdp.horizon - 1)].sum())


def safe_occupancy(mdp: TabularMdp, family, thetas, t: int, safe: SafeSetTable | None = None) -> float:
    safe = safe or max_safe_set(mdp)
    dists, _ = occupancies(mdp, family, thetas, upto=t)
    return float(dists[t][safe.level(t)].sum())


def safe_occupancies(mdp: TabularMdp, family, thetas, safe: SafeSetTable | None = None) -> list[float]:
    safe = safe or max_safe_set(mdp)
    dists, _ = occupancies(mdp, family, thetas)
    return [float(d[safe.level(h)].sum()) for h, d in enumerate(dists)]


# ---------------------------------------------------------------------------
# population loss


def window_bounds(horizon: int, t: int, window: int) -> tuple[int, int]:
    """(number of product factors, indicator index) for level t and window C'.

    Factors cover levels t..t+m-1 with m = min(C', H-1-t) + 1; the indicator
    index is min(t + C' + 1, H-1).
    """
    if not 0 <= t <= horizon - 2:
        raise ContractError(f"level t={t} outside [0, {horizon - 2}]")
    if window < 0:
        raise ContractError("window must be non-negative")
    m = min(window, horizon - 1 - t) + 1
    return m, min(t + window + 1, horizon - 1)


def _loss_by_importance(mdp, family, behavior_slots, theta, t, m, idx):
    """|A|^m E_behavior[ 1{failed by idx} prod_j pi_theta(a_{t+j} | s_{t+j}) ], forward."""
    A = mdp.n_actions
    dists, absorbed = occupancies(mdp, family, behavior_slots, upto=t)
    d = dists[t]
    gone = absorbed[t]  # weighted mass of trajectories that failed before the current level
    u_abs = family.probs(theta, np.zeros((1, mdp.state_dim)))[0]
    for h in range(t, idx):
        fail = _level_fail(mdp, h)
        beta = family.probs(behavior_slots[h], mdp.features_of(mdp.level_ids(h)))
        beta = np.where(fail[:, None], 1.0 / A, beta)  # failure states act uniformly
        w = A * beta * family.probs(theta, mdp.features_of(mdp.level_ids(h)))
        w_abs = float((A * (1.0 / A) * u_abs).sum())
        gone = gone * w_abs + float((d[fail][:, None] * w[fail]).sum())
        live = np.where(fail, 0.0, d)
        d = _level_push(mdp, h, live[:, None] * w)
    # a window ending on the final level still has one factor at idx
    if idx < t + m:
        fail = _level_fail(mdp, idx)
        beta = family.probs(behavior_slots[idx], mdp.features_of(mdp.level_ids(idx)))
        beta = np.where(fail[:, None], 1.0 / A, beta)
        w = (A * beta * family.probs(theta, mdp.features_of(mdp.level_ids(idx)))).sum(axis=1)
        w_abs = float((A * (1.0 / A) * u_abs).sum())
        return gone * w_abs + float((d[fail] * w[fail]).sum())
    return gone + float(d[_level_fail(mdp, idx)].sum())


def _loss_by_conditional(mdp, family, behavior_slots, theta, t, idx):
    """E_{s_t}[ P_theta(failed by idx | s_t) ], backward over the window."""
    dists, absorbed = occupancies(mdp, family, behavior_slots, upto=t)
    q = _level_fail(mdp, idx).astype(float)
    for h in range(idx - 1, t - 1, -1):
        ids = mdp.level_ids(h)
        pi = family.probs(theta, mdp.features_of(ids))
        lo = mdp.level_offsets[h + 1]
        cont = (mdp.succ_probs[ids] * q[mdp.succ_ids[ids] - lo]).sum(axis=2)
        q = np.where(_level_fail(mdp, h), 1.0, (pi * cont).sum(axis=1))
    return absorbed[t] + float((dists[t] * q).sum())


def population_loss(
    mdp: TabularMdp, family: PolicyFamily, behavior, theta, t: int, window: int, check: bool = True
) -> float:
    """Exact L_t(theta) under the given behavior policy vector.

    Computed both as the importance-weighted expectation that the empirical
    loss estimates and as the expected conditional failure probability of
    playing ``theta`` from s_t. The two agree when the behavior plays the
    uniform parameter on the window levels, which holds for every policy
    vector built by the level-by-level learner; a disagreement raises ConsistencyError.
    """
    mdp = _require_tabular(mdp)
    slots = _slots(behavior)
    theta = family.check(theta)
    m, idx = window_bounds(mdp.horizon, t, window)
    rand = family.theta_rand()
    if check and not all(np.array_equal(slots[h], rand) for h in range(t, min(t + m, mdp.horizon))):
        raise ContractError("behavior must play theta_rand on levels t..t+C'")
    first = _loss_by_importance(mdp, family, slots, theta, t, m, idx)
    if not check:
        return first
    second = _loss_by_conditional(mdp, family, slots, theta, t, idx)
    if abs(first - second) > AGREEMENT_TOL:
        raise ConsistencyError(f"population loss forms disagree: {first!r} vs {second!r}")
    return first
