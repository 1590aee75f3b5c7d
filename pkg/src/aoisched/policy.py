"""Closed-form lower bound and index/heuristic scheduling rules for ARQ networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import ARQ, Action, ConfigError, EnvConfig, SystemState, TruncatedSpace
from .solve import PeriodicPolicy, TablePolicy


@dataclass(frozen=True)
class BoundValue:
    J_LB: float
    j_star: int  # 0-based user index attaining the argmin


def lower_bound_terms(config: EnvConfig) -> BoundValue:
    """Average-AoI lower bound for ARQ under transmission budget ``lambda``.

    ``J_LB = (sum_j sqrt(w_j / (1 - p_j)))^2 / (2 lambda)
    + lambda w_k p_k / (2 (1 - p_k)) + sum_j w_j / 2`` with ``k`` the user
    minimising ``w_j p_j / (2 (1 - p_j))`` (lowest index on ties).
    """
    if config.protocol != ARQ:
        raise ConfigError("the lower bound is only defined for the ARQ protocol")
    p = config.fail_matrix[:, 0]
    w = config.weights
    if np.any(p >= 1.0):
        raise ConfigError("the lower bound needs p_j < 1 for every user")
    lam = config.lam
    penalty = w * p / (2.0 * (1.0 - p))
    k = int(np.argmin(penalty))
    value = (np.sum(np.sqrt(w / (1.0 - p)))) ** 2 / (2.0 * lam) + lam * penalty[k] + 0.5 * np.sum(w)
    return BoundValue(float(value), k)


def lower_bound(config: EnvConfig) -> float:
    return lower_bound_terms(config).J_LB


@dataclass(frozen=True)
class WhittleContext:
    error_probs: tuple[float, ...]
    weights: tuple[float, ...]
    eta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "error_probs", tuple(float(p) for p in self.error_probs))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.error_probs) != len(self.weights):
            raise ValueError("error_probs and weights must have equal length")
        if any(not 0.0 <= p < 1.0 for p in self.error_probs):
            raise ConfigError("the Whittle index needs error probabilities in [0, 1)")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")

    @classmethod
    def from_config(cls, config: EnvConfig, eta: float = 0.0,
                    error_probs: Sequence[float] | None = None) -> "WhittleContext":
        p = config.fail_matrix[:, 0] if error_probs is None else error_probs
        return cls(tuple(p), tuple(config.weights), eta)


def whittle_index(delta, ctx: WhittleContext, j: int):
    """``w (1 - p) delta (delta + (1 + p) / (1 - p))`` for user ``j``; vectorises over ``delta``."""
    p = ctx.error_probs[j]
    if p >= 1.0:
        raise ConfigError("index undefined for p = 1")
    w = ctx.weights[j]
    return w * (1.0 - p) * delta * (delta + (1.0 + p) / (1.0 - p))


def whittle_action(s: SystemState, ctx: WhittleContext) -> Action:
    idx = [whittle_index(d, ctx, j) for j, d in enumerate(s.ages)]
    j = int(np.argmax(idx))
    return Action.new(j) if idx[j] > ctx.eta else Action.idle()


def greedy_action(s: SystemState, weights: Sequence[float]) -> Action:
    """Fresh packet to the user with the largest weighted age."""
    return Action.new(int(np.argmax(np.asarray(weights) * np.asarray(s.ages))))


def round_robin_action(t: int, M: int) -> Action:
    return Action.new(t % M)


# -- grid tabulations used for exact evaluation --------------------------------

def whittle_table(config: EnvConfig, ctx: WhittleContext) -> TablePolicy:
    ages = TruncatedSpace.of(config).kernel.ages.astype(float)
    idx = np.stack([whittle_index(ages[j], ctx, j) for j in range(config.M)])
    best = np.argmax(idx, axis=0)
    top = idx[best, np.arange(idx.shape[1])]
    return TablePolicy(np.where(top > ctx.eta, best + 1, 0).astype(np.int64))


def greedy_table(config: EnvConfig) -> TablePolicy:
    ages = TruncatedSpace.of(config).kernel.ages
    return TablePolicy((np.argmax(config.weights[:, None] * ages, axis=0) + 1).astype(np.int64))


def constant_table(config: EnvConfig, action: Action) -> TablePolicy:
    return TablePolicy(np.full(TruncatedSpace.of(config).size, action.code(config.M), dtype=np.int64))


def round_robin_policy(config: EnvConfig) -> PeriodicPolicy:
    n = TruncatedSpace.of(config).size
    return PeriodicPolicy(tuple(np.full(n, 1 + j, dtype=np.int64) for j in range(config.M)))
