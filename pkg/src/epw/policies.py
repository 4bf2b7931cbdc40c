"""Regular policy families: bounded parameters, Lipschitz action probabilities.

Batched evaluation uses broadcast-and-reduce instead of matrix products so each
row's result is independent of how many rows are evaluated together. The
samplers rely on this for bit-identical serial and parallel rollouts.
"""

from __future__ import annotations

import hashlib
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """A documented precondition was violated."""


class LipschitzViolation(RuntimeError):
    pass


def project_to_ball(theta: np.ndarray, bound: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    norm = np.linalg.norm(theta)
    if norm <= bound:
        return theta
    return theta * (bound / norm)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _rowdot(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    # (m, d) x (k, d) -> (m, k), reduced per row
    return (X[:, None, :] * W[None, :, :]).sum(axis=-1)


class PolicyFamily(ABC):
    tag: str
    n_actions: int
    state_dim: int
    dim: int
    bound: float

    @abstractmethod
    def probs(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Action probabilities for each row of ``X``: shape (m, |A|)."""

    @abstractmethod
    def probs_jacobian(self, theta: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Probabilities (m, |A|) and their parameter gradients (m, |A|, dim)."""

    @abstractmethod
    def certified_lipschitz(self, state_norm_bound: float) -> float: ...

    def theta_rand(self) -> np.ndarray:
        return np.zeros(self.dim)

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ContractError(f"expected {self.dim} parameters, got shape {theta.shape}")
        # small slack: projected iterates sit exactly on the sphere up to rounding
        if np.linalg.norm(theta) > self.bound * (1 + 1e-12):
            raise ContractError(f"parameter norm {np.linalg.norm(theta):.6g} exceeds bound {self.bound}")
        return theta

    def action_probs(self, theta, s) -> np.ndarray:
        feats = getattr(s, "features", s)
        return self.probs(self.check(theta), np.asarray(feats, dtype=float)[None, :])[0]

    def prob_grad(self, theta, s, a: int) -> np.ndarray:
        feats = getattr(s, "features", s)
        _, jac = self.probs_jacobian(self.check(theta), np.asarray(feats, dtype=float)[None, :])
        return jac[0, a]

    def random_params(self, rng: np.random.Generator, radius: float | None = None) -> np.ndarray:
        """Uniform draw from the ball of the given radius (default: the family bound)."""
        r = self.bound if radius is None else radius
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        return v * r * rng.random() ** (1.0 / self.dim)

    def spec(self) -> dict:
        return {"family": self.tag, "n_actions": self.n_actions, "state_dim": self.state_dim, "bound": self.bound}


class SoftmaxLinearFamily(PolicyFamily):
    """pi(a|s) proportional to exp(s . theta_a); theta is |A| x d_S, row-major."""

    tag = "softmax-linear"

    def __init__(self, n_actions: int, state_dim: int, bound: float = 20.0):
        self.n_actions = int(n_actions)
        self.state_dim = int(state_dim)
        self.dim = self.n_actions * self.state_dim
        self.bound = float(bound)

    def weights(self, theta):
        return np.asarray(theta, dtype=float).reshape(self.n_actions, self.state_dim)

    def probs(self, theta, X):
        return _softmax(_rowdot(np.asarray(X, dtype=float), self.weights(theta)))

    def probs_jacobian(self, theta, X):
        X = np.asarray(X, dtype=float)
        p = self.probs(theta, X)
        A = self.n_actions
        # d p_a / d theta_b = p_a (delta_ab - p_b) s
        dz = p[:, :, None] * (np.eye(A)[None] - p[:, None, :])
        jac = dz[:, :, :, None] * X[:, None, None, :]
        return p, jac.reshape(len(X), A, self.dim)

    def certified_lipschitz(self, state_norm_bound):
        # ||grad_theta p_a|| = ||s|| * p_a * sqrt((1-p_a)^2 + sum_{b!=a} p_b^2) <= ||s||
        return float(state_norm_bound)


class MlpFamily(PolicyFamily):
    """One hidden rectifier layer followed by a softmax.

    Layout of theta: W1 (h x d), b1 (h), W2 (|A| x h), b2 (|A|).
    """

    tag = "mlp"

    def __init__(self, n_actions: int, state_dim: int, hidden: int = 8, bound: float = 20.0):
        self.n_actions = int(n_actions)
        self.state_dim = int(state_dim)
        self.hidden = int(hidden)
        self.bound = float(bound)
        h, d, A = self.hidden, self.state_dim, self.n_actions
        self._sizes = [h * d, h, A * h, A]
        self.dim = sum(self._sizes)

    def unpack(self, theta):
        h, d, A = self.hidden, self.state_dim, self.n_actions
        W1, b1, W2, b2 = np.split(np.asarray(theta, dtype=float), np.cumsum(self._sizes)[:-1])
        return W1.reshape(h, d), b1, W2.reshape(A, h), b2

    def _forward(self, theta, X):
        W1, b1, W2, b2 = self.unpack(theta)
        pre = _rowdot(X, W1) + b1
        act = np.maximum(pre, 0.0)
        return pre, act, _rowdot(act, W2) + b2

    def probs(self, theta, X):
        return _softmax(self._forward(theta, np.asarray(X, dtype=float))[2])

    def probs_jacobian(self, theta, X):
        X = np.asarray(X, dtype=float)
        m = len(X)
        W1, b1, W2, b2 = self.unpack(theta)
        pre, act, logits = self._forward(theta, X)
        p = _softmax(logits)
        A, h, d = self.n_actions, self.hidden, self.state_dim
        dz = p[:, :, None] * (np.eye(A)[None] - p[:, None, :])  # (m, a, b) = dp_a/dz_b
        gate = (pre > 0).astype(float)  # slope 0 at the kink
        g_W2 = dz[:, :, :, None] * act[:, None, None, :]  # (m, a, b, h)
        g_b2 = dz
        back = (dz[:, :, :, None] * W2[None, None, :, :]).sum(axis=2) * gate[:, None, :]  # (m, a, h)
        g_W1 = back[:, :, :, None] * X[:, None, None, :]  # (m, a, h, d)
        g_b1 = back
        jac = np.concatenate(
            [g_W1.reshape(m, A, h * d), g_b1, g_W2.reshape(m, A, A * h), g_b2.reshape(m, A, A)], axis=2
        )
        return p, jac

    def certified_lipschitz(self, state_norm_bound):
        # ||dp_a/dz|| <= 1/2; ||hidden|| <= B sqrt(S^2 + 1); ||W2|| <= B.
        # Chain rule over the four parameter blocks gives the product bound below.
        B, S = self.bound, float(state_norm_bound)
        return 0.5 * math.sqrt(2.0 * B * B * (S * S + 1.0) + 1.0)

    def spec(self):
        return {**super().spec(), "hidden": self.hidden}


def make_family(spec: dict, n_actions: int, state_dim: int) -> PolicyFamily:
    tag = spec.get("family", "softmax-linear")
    bound = float(spec.get("bound", 20.0))
    if tag == "softmax-linear":
        return SoftmaxLinearFamily(n_actions, state_dim, bound)
    if tag == "mlp":
        return MlpFamily(n_actions, state_dim, int(spec.get("hidden", 8)), bound)
    raise ContractError(f"unknown policy family {tag!r}")


def audit_lipschitz(
    family: PolicyFamily,
    states: np.ndarray,
    rho: float,
    pairs: int = 10_000,
    rng: np.random.Generator | None = None,
) -> float:
    """Randomised check of the certified constant; raises on any violation.

    Returns the largest observed ratio |dp| / ||d theta||.
    """
    rng = rng or np.random.default_rng(0)
    states = np.asarray(states, dtype=float)
    worst = 0.0
    for _ in range(pairs):
        t1 = family.random_params(rng)
        # mix of near and far partners so both local slopes and chords are probed
        if rng.random() < 0.5:
            t2 = family.random_params(rng)
        else:
            t2 = project_to_ball(t1 + rng.standard_normal(family.dim) * 10 ** rng.uniform(-4, 0), family.bound)
        gap = np.linalg.norm(t1 - t2)
        if gap == 0:
            continue
        X = states[rng.integers(len(states), size=min(len(states), 4))]
        diff = np.abs(family.probs(t1, X) - family.probs(t2, X)).max()
        ratio = diff / gap
        worst = max(worst, ratio)
        if ratio > rho * (1 + 1e-9):
            raise LipschitzViolation(f"observed ratio {ratio:.6g} exceeds certified {rho:.6g}")
    return worst


@dataclass(frozen=True)
class PolicyVector:
    """One parameter vector per level; level ``h`` states act with ``slots[h]``."""

    family_tag: str
    slots: tuple

    @classmethod
    def uniform(cls, family: PolicyFamily, horizon: int) -> "PolicyVector":
        return cls(family.tag, tuple(family.theta_rand() for _ in range(horizon)))

    @property
    def horizon(self) -> int:
        return len(self.slots)

    @property
    def dim(self) -> int:
        return len(self.slots[0]) if self.slots else 0

    def with_slot(self, h: int, theta) -> "PolicyVector":
        slots = list(self.slots)
        slots[h] = np.asarray(theta, dtype=float).copy()
        return PolicyVector(self.family_tag, tuple(slots))

    def identity(self) -> str:
        digest = hashlib.sha256(self.family_tag.encode())
        for s in self.slots:
            digest.update(np.ascontiguousarray(s, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, PolicyVector):
            return NotImplemented
        return self.family_tag == other.family_tag and len(self.slots) == len(other.slots) and all(
            np.array_equal(a, b) for a, b in zip(self.slots, other.slots)
        )

    def __hash__(self):
        return hash(self.identity())

    def dumps(self, **stamp) -> str:
        """Header line, then one line of hex floats per slot (bit-exact round trip)."""
        extra = "".join(f" {k}={v}" for k, v in stamp.items())
        lines = [f"# epw-policy family={self.family_tag} dim={self.dim} horizon={self.horizon}{extra}"]
        for s in self.slots:
            lines.append(" ".join(float(x).hex() for x in s))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PolicyVector":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0]
        if not head.startswith("# epw-policy"):
            raise ValueError("missing epw-policy header")
        fields = dict(tok.split("=", 1) for tok in head.split()[2:])
        dim, horizon = int(fields["dim"]), int(fields["horizon"])
        slots = tuple(np.array([float.fromhex(x) for x in ln.split()]) for ln in lines[1:])
        if len(slots) != horizon or any(len(s) != dim for s in slots):
            raise ValueError("policy body does not match its header")
        return cls(fields["family"], slots)


def dump_params(theta, family_tag: str) -> str:
    return PolicyVector(family_tag, (np.asarray(theta, dtype=float),)).dumps()


def load_params(text: str) -> np.ndarray:
    return PolicyVector.loads(text).slots[0]
