"""Online learners that discover the error probabilities from ACK/NACK feedback.

* :class:`Ucrl2Agent` plans in an optimistic model built from lower
  confidence bounds on the per-user (ARQ) or per-retransmission-level (HARQ)
  error rates, with count-doubling episodes and a multiplier update at every
  episode start.  The planner is either relative value iteration or, for ARQ,
  the Whittle index rule.
* :class:`SarsaAgent` is a tabular differential SARSA baseline.

Agents act in the uncapped world; ages above ``delta_max`` are saturated only
when looking up planner or Q tables.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import kernels
from .env import ARQ, ConfigError, EnvConfig, TruncatedSpace, initial_state
from .solve import LagrangianProblem, TablePolicy, rvi

VI, WHITTLE = "vi", "whittle"
PLANNERS = (VI, WHITTLE)


@dataclass(frozen=True)
class LearnerConfig:
    delta: float = 0.05
    alpha: float = 100.0
    U: float = 1.0
    planner: str = VI
    lam: float | None = None  # defaults to the environment budget
    rvi_tol: float = 1e-6
    rvi_max_iter: int = 20_000
    # SARSA
    beta0: float = 0.1
    beta_ref: float = 1000.0
    gamma: float = 0.01
    eps_start: float = 0.2
    eps_end: float = 0.01
    eps_anneal: float = 50_000.0
    eta_period: int = 1000

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("confidence delta must lie in (0, 1)")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not self.U > 0:
            raise ConfigError("U must be positive")
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {PLANNERS}")
        if self.lam is not None and not 0.0 < self.lam <= 1.0:
            raise ConfigError("lambda must lie in (0, 1]")

    def budget(self, env: EnvConfig) -> float:
        return env.lam if self.lam is None else self.lam


@dataclass
class Trajectory:
    """Per-slot log of one run; ``cost`` is the weighted age charged before the transition."""

    cost: np.ndarray
    action: np.ndarray
    feedback: np.ndarray
    state: np.ndarray
    eta: np.ndarray
    M: int
    cap_hit: bool = False
    episodes: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, T: int, M: int) -> "Trajectory":
        return cls(np.zeros(T), np.zeros(T, dtype=np.int8), np.full(T, -1, dtype=np.int8),
                   np.zeros(T, dtype=np.int64), np.zeros(T), M)

    @property
    def T(self) -> int:
        return self.cost.shape[0]

    def write_jsonl(self, fh: IO[str], space: TruncatedSpace | None = None):
        """One JSON record per slot: t, state digest, action, feedback, cost, eta."""
        from .env import Action

        fb_label = {-1: None, 0: "ack", 1: "nack"}
        for t in range(self.T):
            rec = {
                "t": t + 1,
                "state": int(self.state[t]),
                "action": str(Action.from_code(int(self.action[t]), self.M)),
                "feedback": fb_label[int(self.feedback[t])],
                "cost": float(self.cost[t] + self.eta[t] * (self.action[t] != 0)),
                "age": float(self.cost[t]),
                "eta": float(self.eta[t]),
            }
            if space is not None:
                rec["state_tuple"] = [int(v) for v in space.decode(int(self.state[t])).flat()]
            fh.write(json.dumps(rec) + "\n")


class World:
    """Uncapped simulation state plus the static arrays the kernels need."""

    def __init__(self, config: EnvConfig):
        self.config = config
        s0 = initial_state(config)
        self.ages = np.array(s0.ages, dtype=np.int64)
        self.retx = np.array(s0.retx, dtype=np.int64)
        self.fail = np.ascontiguousarray(config.fail_matrix)
        self.weights = np.ascontiguousarray(config.weights)
        self.space = TruncatedSpace.of(config)
        self.strides = np.ascontiguousarray(self.space.strides)
        self.t = 0


_EMPTY_I2 = np.zeros((0, 0), dtype=np.int64)
_EMPTY_I1 = np.zeros(0, dtype=np.int64)
_EMPTY_F1 = np.zeros(0)


def run_segment(world: World, kind: int, n_steps: int, u: np.ndarray, traj: Trajectory | None,
                offset: int = 0, table_a=None, table_b=None, mu: float = 1.0,
                index_p=None, eta: float = 0.0, counters=None, stop_on_double: bool = False):
    """Thin wrapper over the compiled/pure kernel; returns ``(steps, tx, cap_hit, status)``."""
    cfg = world.config
    table_a = _EMPTY_I1 if table_a is None else table_a
    table_b = table_a if table_b is None else table_b
    index_p = _EMPTY_F1 if index_p is None else np.ascontiguousarray(index_p, dtype=float)
    if counters is None:
        N = E = V = N0 = _EMPTY_I2
    else:
        N, E, V, N0 = counters
    if traj is None:
        out = (_EMPTY_F1, np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int8), _EMPTY_I1)
    else:
        sl = slice(offset, offset + n_steps)
        out = (traj.cost[sl], traj.action[sl], traj.feedback[sl], traj.state[sl])
    res = kernels.run_segment(kind, world.ages, world.retx, world.t, n_steps, world.fail,
                              world.weights, cfg.r_cap, world.strides, cfg.delta_max,
                              table_a, table_b, float(mu), index_p, float(eta), N, E, V, N0,
                              bool(stop_on_double), u, *out)
    world.t += res[0]
    return res


# -- UCRL2 ------------------------------------------------------------------------

@dataclass
class UcrlStats:
    """Counters of one UCRL2 run.

    ``N[j, r]``/``E[j, r]`` count attempts and failures at retransmission level
    ``r`` (level 0 is a fresh packet; ARQ only has level 0).  ``V`` holds the
    episode-local attempt counts and ``N_start`` the counts at episode start.
    """

    N: np.ndarray
    E: np.ndarray
    V: np.ndarray
    N_start: np.ndarray
    C: int = 0
    t: int = 1
    eta: float = 0.0
    episode: int = 0

    @classmethod
    def fresh(cls, config: EnvConfig) -> "UcrlStats":
        shape = (config.M, config.r_cap + 1)
        z = lambda: np.zeros(shape, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    def check(self):
        assert np.all(self.E >= 0) and np.all(self.E <= self.N)
        assert self.t >= 1


def state_action_sizes(config: EnvConfig) -> tuple[int, int]:
    """Truncated ``|S| = (delta_max (r_cap + 1))^M`` and ``|A| = 2M + 1``."""
    return (config.delta_max * (config.r_cap + 1)) ** config.M, 2 * config.M + 1


def ucrl_optimistic_probs(stats: UcrlStats, config: EnvConfig, lcfg: LearnerConfig,
                          t_k: int | None = None) -> np.ndarray:
    """Lower confidence bounds ``max(0, p_hat - sqrt(U log(S A t_k / delta) / max(1, N)))``."""
    t_k = stats.t if t_k is None else t_k
    if t_k < 1:
        raise ValueError("t_k must be >= 1")
    S, A = state_action_sizes(config)
    n = np.maximum(stats.N, 1)
    p_hat = stats.E / n
    radius = np.sqrt(lcfg.U * math.log(S * A * t_k / lcfg.delta) / n)
    return np.maximum(0.0, p_hat - radius)


def plan_vi(p_tilde: np.ndarray, eta: float, config: EnvConfig, tol: float = 1e-6,
            h0: np.ndarray | None = None, max_iter: int = 20_000, strict: bool = True):
    """Greedy RVI policy of the Lagrangian MDP built on ``p_tilde``; returns ``(policy, h)``.

    Optimistic models often have perfect channels whose near-ties slow the
    last digits of RVI down.  With ``strict=False`` the sweep cap just ends
    planning early instead of raising.
    """
    res = rvi(LagrangianProblem(config, eta, fail=p_tilde), tol, max_iter=max_iter, h0=h0,
              evaluate=False, strict=strict)
    return res.policy, res.h


@dataclass(frozen=True)
class WhittleRule:
    index_p: np.ndarray
    eta: float

    def __call__(self, s, weights):
        from .policy import WhittleContext, whittle_action
        return whittle_action(s, WhittleContext(tuple(self.index_p), tuple(weights), self.eta))


def plan_whittle(p_tilde: np.ndarray, eta: float) -> WhittleRule:
    """Whittle index rule on the optimistic error probabilities (no value iteration)."""
    p = np.minimum(np.asarray(p_tilde, dtype=float).reshape(-1), 1.0 - 1e-12)
    return WhittleRule(p, float(eta))


class Ucrl2Agent:
    """UCRL2 with per-parameter optimism, doubling episodes and a multiplier update."""

    def __init__(self, lcfg: LearnerConfig = LearnerConfig(), name: str | None = None):
        self.lcfg = lcfg
        self.name = name or f"ucrl2-{lcfg.planner}"
        self.episode_log: list[dict] = []

    def _check(self, config: EnvConfig):
        if self.lcfg.planner == WHITTLE and config.protocol != ARQ:
            raise ConfigError("the Whittle planner is only available for ARQ")

    def start_episode(self, stats: UcrlStats, config: EnvConfig, h0=None):
        """Multiplier update, optimistic estimates and planning at ``t_k = stats.t``."""
        lcfg = self.lcfg
        lam = lcfg.budget(config)
        t_k = stats.t
        stats.eta = max(0.0, stats.eta + lcfg.alpha * (stats.C / t_k - lam))
        p_tilde = ucrl_optimistic_probs(stats, config, lcfg, t_k)
        stats.N_start[...] = stats.N
        stats.V[...] = 0
        stats.episode += 1
        if lcfg.planner == VI:
            plan, h = plan_vi(p_tilde, stats.eta, config, lcfg.rvi_tol, h0, lcfg.rvi_max_iter,
                            strict=False)
        else:
            plan, h = plan_whittle(p_tilde[:, 0], stats.eta), None
        return plan, h, p_tilde

    def run(self, config: EnvConfig, T: int, rng: np.random.Generator,
            log: bool = True) -> Trajectory:
        self._check(config)
        world = World(config)
        stats = UcrlStats.fresh(config)
        traj = Trajectory.empty(T, config.M)
        u = rng.random((T, 2))
        h = None
        self.episode_log = []
        done = 0
        while done < T:
            plan, h, p_tilde = self.start_episode(stats, config, h)
            kw = {}
            if isinstance(plan, TablePolicy):
                kind, kw["table_a"] = kernels.TABLE, plan.codes
            else:
                kind, kw["index_p"], kw["eta"] = kernels.WHITTLE, plan.index_p, plan.eta
            steps, tx, cap, status = run_segment(
                world, kind, T - done, u[done:], traj, done,
                counters=(stats.N, stats.E, stats.V, stats.N_start), stop_on_double=True, **kw)
            if status:
                raise RuntimeError(f"planner produced an infeasible action at slot {done + steps + 1}")
            traj.eta[done:done + steps] = stats.eta
            traj.cap_hit |= bool(cap)
            traj.episodes.append(done)
            self.episode_log.append({"episode": stats.episode, "t_k": stats.t, "eta": stats.eta,
                                     "steps": int(steps), "p_tilde": p_tilde.tolist()})
            done += steps
            stats.t += steps
            stats.C += tx
        self.stats = stats
        return traj


# -- SARSA --------------------------------------------------------------------------

@dataclass
class SarsaState:
    Q: np.ndarray
    visits: np.ndarray
    rho: float = 0.0
    eta: float = 0.0
    epsilon: float = 0.2
    tx_total: float = 0.0
    pending: int = -1
    pending_greedy: bool = True

    @classmethod
    def fresh(cls, config: EnvConfig, lcfg: LearnerConfig) -> "SarsaState":
        n, A = state_action_sizes(config)
        return cls(np.zeros((n, A)), np.zeros((n, A), dtype=np.int64), epsilon=lcfg.eps_start)


def sarsa_update(Q: np.ndarray, s: int, a: int, cost: float, rho: float, s2: int, a2: int,
                 beta: float) -> None:
    """Differential SARSA backup ``Q(s,a) += beta (cost - rho + Q(s',a') - Q(s,a))``."""
    Q[s, a] += beta * (cost - rho + Q[s2, a2] - Q[s, a])


def sarsa_params(lcfg: LearnerConfig, lam: float) -> np.ndarray:
    return np.array([lcfg.beta0, lcfg.beta_ref, lcfg.gamma, lcfg.eps_start, lcfg.eps_end,
                     lcfg.eps_anneal, lcfg.alpha, lam, float(lcfg.eta_period)])


def sarsa_step(world: World, sarsa: SarsaState, lcfg: LearnerConfig, rng: np.random.Generator,
               n_steps: int = 1, traj: Trajectory | None = None, offset: int = 0) -> SarsaState:
    """Advance SARSA by ``n_steps`` slots in place and return the state."""
    config = world.config
    u = rng.random((n_steps, 3))
    vec = np.array([sarsa.rho, sarsa.eta, sarsa.tx_total, float(sarsa.pending),
                    1.0 if sarsa.pending_greedy else 0.0])
    if traj is None:
        out = (_EMPTY_F1, np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int8), _EMPTY_I1)
    else:
        sl = slice(offset, offset + n_steps)
        out = (traj.cost[sl], traj.action[sl], traj.feedback[sl], traj.state[sl])
    _, _, cap = kernels.run_sarsa(world.ages, world.retx, world.t, n_steps, world.fail,
                                  world.weights, config.r_cap, world.strides, config.delta_max,
                                  sarsa.Q, sarsa.visits, sarsa_params(lcfg, lcfg.budget(config)),
                                  vec, u, *out)
    if traj is not None:
        traj.cap_hit |= bool(cap)
    world.t += n_steps
    sarsa.rho, sarsa.eta, sarsa.tx_total = float(vec[0]), float(vec[1]), float(vec[2])
    sarsa.pending, sarsa.pending_greedy = int(vec[3]), bool(vec[4] > 0.5)
    frac = max(0.0, 1.0 - world.t / lcfg.eps_anneal) if lcfg.eps_anneal > 0 else 0.0
    sarsa.epsilon = lcfg.eps_end + (lcfg.eps_start - lcfg.eps_end) * frac
    return sarsa


class SarsaAgent:
    def __init__(self, lcfg: LearnerConfig = LearnerConfig(), name: str = "sarsa"):
        self.lcfg = lcfg
        self.name = name
        # chunks aligned with the multiplier period keep eta constant inside a chunk
        self.chunk = lcfg.eta_period if lcfg.eta_period > 0 else 10_000

    def run(self, config: EnvConfig, T: int, rng: np.random.Generator,
            log: bool = True) -> Trajectory:
        world = World(config)
        self.sarsa = SarsaState.fresh(config, self.lcfg)
        traj = Trajectory.empty(T, config.M)
        done = 0
        while done < T:
            n = min(self.chunk, T - done)
            eta_before = self.sarsa.eta
            sarsa_step(world, self.sarsa, self.lcfg, rng, n, traj, done)
            traj.eta[done:done + n] = eta_before
            done += n
        return traj


def replay_counts(traj: Trajectory, config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Recount attempts/failures per (user, level) from a trajectory log."""
    M = config.M
    space = TruncatedSpace.of(config)
    _, retx = space.coords
    N = np.zeros((M, config.r_cap + 1), dtype=np.int64)
    E = np.zeros_like(N)
    a = traj.action.astype(np.int64)
    for j in range(M):
        for code, level_of in ((1 + j, None), (1 + M + j, retx[:, j])):
            sel = a == code
            if not sel.any():
                continue
            lv = np.zeros(sel.sum(), dtype=np.int64) if level_of is None else level_of[traj.state[sel]]
            fails = traj.feedback[sel] == kernels.NACK
            np.add.at(N[j], lv, 1)
            np.add.at(E[j], lv[fails], 1)
    return N, E


__all__ = [
    "LearnerConfig", "SarsaAgent", "SarsaState", "Trajectory", "Ucrl2Agent", "UcrlStats",
    "World", "plan_vi", "plan_whittle", "replay_counts", "sarsa_step", "sarsa_update",
    "ucrl_optimistic_probs",
]
