"""Slotted multi-user status-update environment.

The state of an M-user system is the vector of per-user ages and retransmission
counts ``(delta_1, r_1, ..., delta_M, r_M)``.  At each slot the source either
idles, sends a fresh update to user ``j`` or (HARQ only) retransmits the failed
packet it still holds for user ``j``.

Users are indexed from 0 in the Python API.  Human-readable action labels follow
the usual ``i`` / ``n1`` / ``x1`` notation with 1-based user numbers.

Two views of the state space live here:

* the exact, countable model used by :func:`transition_distribution` and
  :func:`step` (ages are unbounded unless a cap is passed), and
* :class:`TruncatedSpace`, the finite grid used by the planners, where ages
  saturate at ``delta_max``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

ARQ = "ARQ"
HARQ = "HARQ"
PROTOCOLS = (ARQ, HARQ)

IDLE, NEW, RETX = "idle", "new", "retx"


class ConfigError(ValueError):
    """Raised when an environment or solver configuration is invalid."""


class InfeasibleActionError(ValueError):
    """Raised when an action is not available in the given state."""


@dataclass(frozen=True)
class UserChannel:
    """Error probabilities ``g(0..r_max)`` and priority weight of one user."""

    error_curve: tuple[float, ...]
    weight: float = 1.0

    def __post_init__(self):
        curve = tuple(float(g) for g in np.atleast_1d(self.error_curve))
        object.__setattr__(self, "error_curve", curve)
        object.__setattr__(self, "weight", float(self.weight))
        if not curve:
            raise ConfigError("error curve must hold at least g(0)")
        if any(not (0.0 <= g <= 1.0) for g in curve):
            raise ConfigError(f"error probabilities must lie in [0, 1], got {curve}")
        if any(b > a for a, b in zip(curve, curve[1:])):
            raise ConfigError(f"error curve must be non-increasing in r, got {curve}")
        if not self.weight > 0:
            raise ConfigError(f"weight must be positive, got {self.weight}")

    @classmethod
    def arq(cls, p: float, weight: float = 1.0) -> "UserChannel":
        return cls((p,), weight)

    @classmethod
    def geometric(cls, p0: float, q: float, r_max: int, weight: float = 1.0) -> "UserChannel":
        """HARQ curve ``g(r) = p0 * q**r`` for ``r = 0..r_max``."""
        if not 0.0 < q <= 1.0:
            raise ConfigError(f"geometric ratio must lie in (0, 1], got {q}")
        return cls(tuple(p0 * q**r for r in range(r_max + 1)), weight)

    def g(self, r: int) -> float:
        return self.error_curve[min(r, len(self.error_curve) - 1)]


@dataclass(frozen=True)
class EnvConfig:
    """Network description plus the solver-side age cap and the transmission budget."""

    channels: tuple[UserChannel, ...]
    protocol: str = ARQ
    r_max: int = 0
    delta_max: int = 100
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.M < 1:
            raise ConfigError("at least one user is required")
        if self.r_max < 0:
            raise ConfigError("r_max must be non-negative")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.delta_max < self.M or self.delta_max <= self.r_cap:
            raise ConfigError(
                f"delta_max={self.delta_max} must be >= M={self.M} and > r_max={self.r_cap}"
            )
        if self.protocol == HARQ:
            for j, ch in enumerate(self.channels):
                if len(ch.error_curve) != self.r_max + 1:
                    raise ConfigError(
                        f"user {j + 1}: HARQ needs g(0..{self.r_max}), "
                        f"got {len(ch.error_curve)} values"
                    )

    @classmethod
    def arq(cls, p: Sequence[float], weights: Sequence[float] | None = None, **kw) -> "EnvConfig":
        weights = [1.0] * len(p) if weights is None else weights
        return cls(tuple(UserChannel.arq(pj, wj) for pj, wj in zip(p, weights, strict=True)), ARQ, **kw)

    @classmethod
    def harq(cls, curves: Sequence[Sequence[float]], weights: Sequence[float] | None = None,
             **kw) -> "EnvConfig":
        weights = [1.0] * len(curves) if weights is None else weights
        r_max = len(curves[0]) - 1
        kw.setdefault("r_max", r_max)
        return cls(tuple(UserChannel(tuple(c), w) for c, w in zip(curves, weights, strict=True)),
                   HARQ, **kw)

    @property
    def M(self) -> int:
        return len(self.channels)

    @property
    def r_cap(self) -> int:
        """Largest reachable retransmission count; ARQ discards failed packets."""
        return self.r_max if self.protocol == HARQ else 0

    @property
    def n_actions(self) -> int:
        return 2 * self.M + 1

    @property
    def weights(self) -> np.ndarray:
        return np.array([ch.weight for ch in self.channels])

    @property
    def fail_matrix(self) -> np.ndarray:
        """``(M, r_cap + 1)`` array of error probabilities g_j(r)."""
        return np.array([[ch.g(r) for r in range(self.r_cap + 1)] for ch in self.channels])


@dataclass(frozen=True, order=True)
class SystemState:
    ages: tuple[int, ...]
    retx: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ages", tuple(int(d) for d in self.ages))
        object.__setattr__(self, "retx", tuple(int(r) for r in self.retx))
        if len(self.ages) != len(self.retx):
            raise ValueError("ages and retx must have equal length")
        for d, r in zip(self.ages, self.retx):
            if d < 1 or r < 0 or r >= d:
                raise ValueError(f"invalid per-user pair (delta={d}, r={r})")

    @classmethod
    def from_flat(cls, flat: Sequence[int]) -> "SystemState":
        return cls(tuple(flat[0::2]), tuple(flat[1::2]))

    def flat(self) -> tuple[int, ...]:
        return tuple(v for pair in zip(self.ages, self.retx) for v in pair)

    def __str__(self):
        return "(" + ",".join(map(str, self.flat())) + ")"


@dataclass(frozen=True, order=True)
class Action:
    kind: str = IDLE
    user: int = -1

    @classmethod
    def idle(cls) -> "Action":
        return cls(IDLE, -1)

    @classmethod
    def new(cls, j: int) -> "Action":
        return cls(NEW, j)

    @classmethod
    def retx(cls, j: int) -> "Action":
        return cls(RETX, j)

    def code(self, M: int) -> int:
        """Integer code in tie-break order: idle < n_1..n_M < x_1..x_M."""
        if self.kind == IDLE:
            return 0
        return 1 + self.user + (M if self.kind == RETX else 0)

    @classmethod
    def from_code(cls, code: int, M: int) -> "Action":
        code = int(code)
        if code == 0:
            return cls.idle()
        if 1 <= code <= M:
            return cls.new(code - 1)
        if M < code <= 2 * M:
            return cls.retx(code - 1 - M)
        raise ValueError(f"action code {code} out of range for M={M}")

    @property
    def transmits(self) -> bool:
        return self.kind != IDLE

    def __str__(self):
        if self.kind == IDLE:
            return "i"
        return ("n" if self.kind == NEW else "x") + str(self.user + 1)

    @classmethod
    def parse(cls, label: str) -> "Action":
        if label == "i":
            return cls.idle()
        kind = {"n": NEW, "x": RETX}[label[0]]
        return cls(kind, int(label[1:]) - 1)


def initial_state(config: EnvConfig) -> SystemState:
    """Canonical start ``(1,0,2,0,...,M,0)``."""
    return SystemState(tuple(range(1, config.M + 1)), (0,) * config.M)


def feasible_actions(s: SystemState, config: EnvConfig) -> tuple[Action, ...]:
    acts = [Action.idle()] + [Action.new(j) for j in range(config.M)]
    if config.protocol == HARQ:
        acts += [Action.retx(j) for j, r in enumerate(s.retx) if 1 <= r < config.r_max]
    return tuple(acts)


def _check_feasible(s: SystemState, a: Action, config: EnvConfig):
    if len(s.ages) != config.M:
        raise ValueError(f"state has {len(s.ages)} users, config has {config.M}")
    if a not in feasible_actions(s, config):
        raise InfeasibleActionError(f"action {a} is infeasible in state {s}")


def transition_distribution(s: SystemState, a: Action, config: EnvConfig,
                            cap: int | None = None) -> list[tuple[SystemState, float]]:
    """Exact next-state distribution; ages saturate at ``cap`` when given."""
    _check_feasible(s, a, config)
    limit = cap if cap is not None else np.iinfo(np.int64).max
    base_ages = [min(d + 1, limit) for d in s.ages]
    base_retx = list(s.retx)
    if a.kind == IDLE:
        return [(SystemState(tuple(base_ages), tuple(base_retx)), 1.0)]

    j = a.user
    ch = config.channels[j]
    r_cap = config.r_cap
    if a.kind == NEW:
        p_fail = ch.g(0)
        ok = (1, 0)
        bad = (base_ages[j], min(1, r_cap))
    else:
        r = s.retx[j]
        p_fail = ch.g(r)
        ok = (r, 0)
        bad = (base_ages[j], min(r + 1, r_cap))

    out: dict[SystemState, float] = {}
    for (d, r), prob in ((ok, 1.0 - p_fail), (bad, p_fail)):
        if prob <= 0.0:
            continue
        ages, retx = list(base_ages), list(base_retx)
        ages[j], retx[j] = d, r
        nxt = SystemState(tuple(ages), tuple(retx))
        out[nxt] = out.get(nxt, 0.0) + prob
    return list(out.items())


def age_cost(s: SystemState, config: EnvConfig) -> float:
    return float(np.dot(config.weights, s.ages))


def step(s: SystemState, a: Action, config: EnvConfig, rng: np.random.Generator,
         cap: int | None = None) -> tuple[SystemState, float, int]:
    """Sample one slot; the age cost is charged on ``s`` before the transition."""
    dist = transition_distribution(s, a, config, cap)
    cost = age_cost(s, config)
    tx = int(a.transmits)
    if len(dist) == 1:
        return dist[0][0], cost, tx
    u = rng.random()
    acc = 0.0
    for nxt, prob in dist:
        acc += prob
        if u < acc:
            return nxt, cost, tx
    return dist[-1][0], cost, tx


@dataclass(frozen=True)
class TruncatedSpace:
    """Finite state grid with ages in ``1..delta_max`` and r in ``0..r_cap``.

    States are flattened in C order over the shape ``(D, R+1) * M``, user 0
    most significant.  Grid points with ``r >= delta`` are not valid system
    states; they are kept so the grid stays rectangular and are masked out by
    :attr:`valid`.
    """

    M: int
    delta_max: int
    r_cap: int

    @classmethod
    def of(cls, config: EnvConfig) -> "TruncatedSpace":
        return _space_cache(config.M, config.delta_max, config.r_cap)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.delta_max, self.r_cap + 1) * self.M

    @property
    def size(self) -> int:
        return (self.delta_max * (self.r_cap + 1)) ** self.M

    @property
    def n_actions(self) -> int:
        return 2 * self.M + 1

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """``(ages, retx)`` arrays of shape ``(size, M)``."""
        grid = np.indices(self.shape, dtype=np.int64).reshape(2 * self.M, -1).T
        return grid[:, 0::2] + 1, grid[:, 1::2]

    @cached_property
    def strides(self) -> np.ndarray:
        per_user = self.delta_max * (self.r_cap + 1)
        return per_user ** np.arange(self.M - 1, -1, -1, dtype=np.int64)

    @cached_property
    def valid(self) -> np.ndarray:
        ages, retx = self.coords
        return np.all(retx < ages, axis=1)

    def index_arrays(self, ages: np.ndarray, retx: np.ndarray) -> np.ndarray:
        ages = np.minimum(ages, self.delta_max)
        local = (ages - 1) * (self.r_cap + 1) + retx
        return local @ self.strides

    def encode(self, s: SystemState) -> int:
        return int(self.index_arrays(np.asarray(s.ages), np.asarray(s.retx)))

    def decode(self, idx: int) -> SystemState:
        ages, retx = self.coords
        return SystemState(tuple(ages[idx]), tuple(retx[idx]))

    def initial_index(self) -> int:
        return self.encode(SystemState(tuple(range(1, self.M + 1)), (0,) * self.M))

    @cached_property
    def kernel(self) -> "SpaceKernel":
        return SpaceKernel.build(self)


@dataclass(frozen=True)
class SpaceKernel:
    """Successor index tables of the capped transition kernel.

    ``idle_next[s]`` is the successor under idling.  ``new_ok[j]``/``new_bad[j]``
    and ``retx_ok[j]``/``retx_bad[j]`` are the successors of a successful or
    failed transmission to user ``j``.  ``retx_mask[j]`` marks the grid states
    where retransmitting to ``j`` is feasible under ``r_max = r_cap``.
    """

    idle_next: np.ndarray
    new_ok: np.ndarray
    new_bad: np.ndarray
    retx_ok: np.ndarray
    retx_bad: np.ndarray
    retx_mask: np.ndarray
    retx_level: np.ndarray
    ages: np.ndarray

    @classmethod
    def build(cls, space: TruncatedSpace) -> "SpaceKernel":
        ages, retx = space.coords
        D, R = space.delta_max, space.r_cap
        stride = space.strides
        aged = np.minimum(ages + 1, D)
        idle_next = space.index_arrays(aged, retx)
        M, n = space.M, space.size

        def replace(j, new_age, new_r):
            # idle successor with user j's component swapped
            old = ((aged[:, j] - 1) * (R + 1) + retx[:, j]) * stride[j]
            new = ((new_age - 1) * (R + 1) + new_r) * stride[j]
            return idle_next - old + new

        new_ok = np.empty((M, n), dtype=np.int64)
        new_bad = np.empty((M, n), dtype=np.int64)
        retx_ok = np.empty((M, n), dtype=np.int64)
        retx_bad = np.empty((M, n), dtype=np.int64)
        retx_mask = np.zeros((M, n), dtype=bool)
        for j in range(M):
            new_ok[j] = replace(j, np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64))
            new_bad[j] = replace(j, aged[:, j], np.full(n, min(1, R), dtype=np.int64))
            mask = (retx[:, j] >= 1) & (retx[:, j] < R)
            retx_mask[j] = mask
            r_safe = np.where(mask, retx[:, j], 1)
            ok = replace(j, np.maximum(r_safe, 1), np.zeros(n, dtype=np.int64))
            bad = replace(j, aged[:, j], np.minimum(r_safe + 1, R))
            self_idx = np.arange(n, dtype=np.int64)
            retx_ok[j] = np.where(mask, ok, self_idx)
            retx_bad[j] = np.where(mask, bad, self_idx)
        for arr in (idle_next, new_ok, new_bad, retx_ok, retx_bad, retx_mask):
            arr.flags.writeable = False
        return cls(idle_next, new_ok, new_bad, retx_ok, retx_bad, retx_mask,
                   np.ascontiguousarray(retx.T), np.ascontiguousarray(ages.T))


_SPACES: dict[tuple[int, int, int], TruncatedSpace] = {}


def _space_cache(M: int, delta_max: int, r_cap: int) -> TruncatedSpace:
    key = (M, delta_max, r_cap)
    if key not in _SPACES:
        _SPACES[key] = TruncatedSpace(M, delta_max, r_cap)
    return _SPACES[key]


def success_probs(space: TruncatedSpace, fail: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-user new-packet failure probability and per-state retransmission failure.

    ``fail`` is the ``(M, r_cap + 1)`` matrix of error probabilities.
    Returns ``(p_new_fail (M,), p_retx_fail (M, n))``.
    """
    fail = np.asarray(fail, dtype=float)
    level = space.kernel.retx_level
    p_retx = np.take_along_axis(fail, level, axis=1)
    return fail[:, 0].copy(), p_retx
