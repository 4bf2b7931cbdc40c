"""Windowed failure loss, its minimisation, and the level-by-level learner.

At level ``t`` the learner samples trajectories with the current policy
vector, then scores a candidate parameter by how much probability it would put
on the recorded actions of trajectories that have failed shortly after ``t``:

    L_t(theta) = |A|^m / n * sum_i 1{s_i,idx failed} * prod_{j<m} pi_theta(a_i,t+j | s_i,t+j)

with ``m = min(C', H-1-t) + 1`` factors and indicator index
``idx = min(t + C' + 1, H-1)``. The minimiser is spliced into slot ``t`` and
every later slot keeps the uniform parameter.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import mpmath
import numpy as np

from .mdp import Batch, LeveledMdp, TabularMdp, derive_seed, sample_batch
from .oracle import max_safe_set, policy_value, population_loss, safe_occupancies, window_bounds
from .policies import ContractError, PolicyFamily, PolicyVector, project_to_ball

INT64_MAX = 2**63 - 1
ASTRONOMICAL = math.inf

_TAG_BATCH, _TAG_ERM = 1, 2


@dataclass(frozen=True)
class LossSpec:
    t: int
    window: int
    n_actions: int


@dataclass(frozen=True)
class ErmConfig:
    restarts: int = 8
    steps: int = 300
    step_size: float = 1.0
    init_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ContractError("ERM needs at least one restart")
        if self.steps < 0 or self.step_size <= 0:
            raise ContractError("ERM needs steps >= 0 and a positive step size")


class LossData:
    """Failing trajectories of a batch reduced to unique windows with weights."""

    def __init__(self, batch: Batch, spec: LossSpec):
        if batch.n == 0:
            raise ContractError("empty batch")
        H = batch.horizon
        m, idx = window_bounds(H, spec.t, spec.window)
        if spec.window > H - 1:
            raise ContractError(f"window {spec.window} exceeds H-1 = {H - 1}")
        self.m, self.idx, self.n = m, idx, batch.n
        self.scale = float(spec.n_actions) ** m
        fail = batch.failed_by(idx)
        X = batch.features[fail, spec.t : spec.t + m]
        acts = batch.actions[fail, spec.t : spec.t + m]
        d = batch.features.shape[2]
        self.state_dim = d
        if len(X) == 0:
            self.states = np.zeros((0, d))
            self.state_index = np.zeros((0, m), dtype=np.int64)
            self.acts = np.zeros((0, m), dtype=np.int64)
            self.weights = np.zeros(0)
            return
        states, inv = np.unique(X.reshape(-1, d), axis=0, return_inverse=True)
        rows = np.concatenate([inv.reshape(-1, m), acts], axis=1)
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        self.states = states
        self.state_index = uniq[:, :m]
        self.acts = uniq[:, m:]
        self.weights = counts / batch.n

    @property
    def empty(self) -> bool:
        return len(self.weights) == 0

    def _factors(self, family, theta):
        p = family.probs(theta, self.states)
        return p[self.state_index, self.acts]

    def value(self, family, theta) -> float:
        if self.empty:
            return 0.0
        f = self._factors(family, theta)
        return float(self.scale * (self.weights * f.prod(axis=1)).sum())

    def value_and_grad(self, family, theta):
        if self.empty:
            return 0.0, np.zeros(family.dim)
        p, jac = family.probs_jacobian(theta, self.states)
        f = p[self.state_index, self.acts]  # (u, m)
        g = jac[self.state_index, self.acts]  # (u, m, D)
        ones = np.ones((len(f), 1))
        before = np.cumprod(np.concatenate([ones, f[:, :-1]], axis=1), axis=1)
        after = np.cumprod(np.concatenate([ones, f[:, :0:-1]], axis=1), axis=1)[:, ::-1]
        others = before * after  # product of every factor except j
        val = float(self.scale * (self.weights * f.prod(axis=1)).sum())
        grad = self.scale * np.einsum("u,um,umd->d", self.weights, others, g)
        return val, grad


def empirical_loss(family: PolicyFamily, theta, batch: Batch, spec: LossSpec, data: LossData | None = None) -> float:
    theta = family.check(theta)
    data = data or LossData(batch, spec)
    return data.value(family, theta)


def empirical_loss_grad(
    family: PolicyFamily, theta, batch: Batch, spec: LossSpec, data: LossData | None = None
) -> np.ndarray:
    theta = family.check(theta)
    data = data or LossData(batch, spec)
    return data.value_and_grad(family, theta)[1]


@dataclass
class ErmResult:
    theta: np.ndarray
    loss: float
    restart: int
    iterate: int
    loss_at_rand: float
    initial_losses: list[float] = field(default_factory=list)


def minimize_loss(
    family: PolicyFamily,
    batch: Batch,
    spec: LossSpec,
    erm: ErmConfig = ErmConfig(),
    data: LossData | None = None,
    warm: list | None = None,
) -> ErmResult:
    """Multi-restart projected gradient descent on the empirical loss.

    Each step backtracks (halving) until the projected step gives sufficient
    decrease, and doubles the trial step after every accepted move. Restart 0
    starts at the uniform parameter, the next ones at the ``warm`` points (if
    any), the rest at seeded points inside the ball. The best iterate over all restarts wins; ties go
    to the lowest restart, then the earliest iterate.
    """
    data = data or LossData(batch, spec)
    rand = family.theta_rand()
    base = data.value(family, rand)
    best = ErmResult(rand.copy(), base, 0, 0, base)
    if data.empty:
        best.initial_losses = [0.0] * erm.restarts
        return best
    rng = np.random.default_rng(erm.seed)
    radius = min(erm.init_radius, family.bound)
    starts = [rand] + [np.asarray(w, dtype=float) for w in (warm or [])][: erm.restarts - 1]
    starts += [family.random_params(rng, radius) for _ in range(erm.restarts - len(starts))]
    for r, theta in enumerate(starts):
        theta = project_to_ball(theta, family.bound)
        val, grad = data.value_and_grad(family, theta)
        best.initial_losses.append(val)
        if val < best.loss:
            best = ErmResult(theta.copy(), val, r, 0, base, best.initial_losses)
        step = erm.step_size
        for k in range(1, erm.steps + 1):
            if val == 0.0:
                break
            # backtracking on the projected step; a success lets the step grow again
            while True:
                cand = project_to_ball(theta - step * grad, family.bound)
                cand_val = data.value(family, cand)
                if cand_val <= val - 1e-4 * np.dot(grad, theta - cand) or step < 1e-8:
                    break
                step *= 0.5
            if cand_val >= val:
                break
            theta = cand
            val, grad = data.value_and_grad(family, theta)
            step = min(step * 2.0, erm.step_size * 1e3)
            if val < best.loss:
                best = ErmResult(theta.copy(), val, r, k, base, best.initial_losses)
    return best


def theorem1_terms(eps, delta, horizon, n_actions, c, d_theta, rho, bound):
    """The two factors of the sample-size bound as mpmath numbers: (leading factor, log bracket)."""
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ContractError("eps and delta must lie in (0, 1)")
    if min(horizon, n_actions, d_theta, rho, bound) <= 0 or c < 0:
        raise ContractError("horizon, |A|, d_theta, rho, B must be positive and C >= 0")
    H, A, C = mpmath.mpf(horizon), mpmath.mpf(n_actions), mpmath.mpf(c)
    e, dl = mpmath.mpf(eps), mpmath.mpf(delta)
    lead = 4 * H**2 * A ** (2 * C + 2) / e**2
    logs = mpmath.log(2 * H / dl) + d_theta * mpmath.log(1 + 32 * H * A ** (C + 1) * C * mpmath.mpf(rho) * mpmath.mpf(bound) / e)
    return lead, logs


def theorem1_sample_size(eps, delta, horizon, n_actions, c, d_theta, rho, bound, exact: bool = False):
    """Per-level sample size guaranteeing an eps-optimal policy w.p. 1 - delta.

    n = ceil( 4 H^2 |A|^(2C+2) / eps^2 * ( ln(2H/delta) + d ln(1 + 32 H |A|^(C+1) C rho B / eps) ) )

    Evaluated in arbitrary precision with at least 20 guard digits. Values beyond int64 saturate to
    ``ASTRONOMICAL`` unless ``exact=True``, which returns the exact integer.
    """
    digits = 60
    while True:
        with mpmath.workdps(digits):
            lead, logs = theorem1_terms(eps, delta, horizon, n_actions, c, d_theta, rho, bound)
            n = int(mpmath.ceil(lead * logs))
        # keep enough guard digits that the ceiling is exact
        if len(str(n)) + 20 <= digits:
            break
        digits = len(str(n)) + 40
    if exact or n <= INT64_MAX:
        return n
    return ASTRONOMICAL


# ---------------------------------------------------------------------------
# level-by-level learner


@dataclass
class LevelRecord:
    level: int
    loss_before: float
    loss_after: float
    restart_chosen: int
    iterate_chosen: int
    failing: int
    safe_occupancy: float | None = None
    population_loss: float | None = None
    wall_time_ms: float = 0.0


@dataclass
class RunRecord:
    config: dict
    seed: int
    levels: list[LevelRecord] = field(default_factory=list)
    thetas: PolicyVector | None = None
    final_value: float | None = None
    safe_occupancies: list[float] | None = None
    status: str = "complete"
    wall_time_ms: float = 0.0

    def to_dict(self, timings: bool = True) -> dict:
        levels = []
        for lv in self.levels:
            row = asdict(lv)
            if not timings:
                row.pop("wall_time_ms")
            levels.append(row)
        out = {
            "config": self.config,
            "seed": self.seed,
            "status": self.status,
            "final_value": self.final_value,
            "safe_occupancies": self.safe_occupancies,
            "levels": levels,
            "policy_identity": self.thetas.identity() if self.thetas is not None else None,
        }
        if timings:
            out["wall_time_ms"] = self.wall_time_ms
        return out

    def same_as(self, other: "RunRecord") -> bool:
        """Equality up to wall-clock fields."""
        return self.to_dict(timings=False) == other.to_dict(timings=False) and self.thetas == other.thetas


class Algorithm1Error(RuntimeError):
    def __init__(self, msg, record: RunRecord):
        super().__init__(msg)
        self.record = record


def run_algorithm1(
    mdp: LeveledMdp,
    family: PolicyFamily,
    n: int,
    window: int,
    seed: int,
    erm: ErmConfig | None = None,
    workers: int = 1,
    diagnostics: bool = True,
    warm_start: bool = True,
) -> tuple[PolicyVector, RunRecord]:
    """Learn one parameter per level, front to back.

    The batch for level ``t`` is drawn with seed ``derive_seed(seed, 1, t)``
    and the ERM restarts for level ``t`` are seeded with
    ``derive_seed(seed, 2, t)``, so a run is a pure function of its inputs.
    """
    H = mdp.horizon
    if n < 1:
        raise ContractError("n must be positive")
    if not 0 <= window <= max(H - 1, 0):
        raise ContractError(f"window C'={window} outside [0, {H - 1}]")
    erm = erm or ErmConfig()
    config = {
        "mdp": getattr(mdp, "name", type(mdp).__name__),
        "family": family.spec(),
        "n": n,
        "window": window,
        "erm": asdict(erm),
    }
    thetas = PolicyVector.uniform(family, H)
    record = RunRecord(config, int(seed), thetas=thetas)
    start = time.perf_counter()
    for t in range(H - 1):
        tic = time.perf_counter()
        try:
            batch = sample_batch(mdp, family, thetas, n, derive_seed(seed, _TAG_BATCH, t), workers)
            spec = LossSpec(t, window, mdp.n_actions)
            data = LossData(batch, spec)
            warm = [thetas.slots[t - 1]] if (warm_start and t > 0) else None
            level_erm = ErmConfig(**{**asdict(erm), "seed": derive_seed(seed, _TAG_ERM, t)})
            res = minimize_loss(family, batch, spec, level_erm, data, warm)
        except Exception as exc:
            record.status = f"failed at level {t}: {exc}"
            record.thetas = thetas
            raise Algorithm1Error(record.status, record) from exc
        thetas = thetas.with_slot(t, res.theta)
        record.levels.append(
            LevelRecord(
                t,
                res.loss_at_rand,
                res.loss,
                res.restart,
                res.iterate,
                int(round(float(data.weights.sum()) * n)),
                wall_time_ms=(time.perf_counter() - tic) * 1e3,
            )
        )
    record.thetas = thetas
    if diagnostics and isinstance(mdp, TabularMdp):
        safe = max_safe_set(mdp)
        occ = safe_occupancies(mdp, family, thetas, safe)
        record.safe_occupancies = occ
        rand = family.theta_rand()
        for lv in record.levels:
            lv.safe_occupancy = occ[lv.level + 1]
            # behavior at level t: learned slots below t, uniform from t on
            behavior = PolicyVector(family.tag, thetas.slots[: lv.level] + (rand,) * (H - lv.level))
            lv.population_loss = population_loss(mdp, family, behavior, thetas.slots[lv.level], lv.level, window)
        record.final_value = policy_value(mdp, family, thetas)
    record.wall_time_ms = (time.perf_counter() - start) * 1e3
    return thetas, record


def recursion_bound(n_actions: int, window: int, n: int, delta: float = 0.05) -> float:
    """Allowed per-level drop of safe occupancy: 2 |A|^(C'+1) sqrt(ln(2/delta) / n)."""
    return 2.0 * n_actions ** (window + 1) * math.sqrt(math.log(2.0 / delta) / n)
