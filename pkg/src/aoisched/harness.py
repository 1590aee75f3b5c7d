"""Seeded Monte-Carlo rollouts, multi-seed sweeps and the figure presets.

Seeds are split from a master seed as
``SeedSequence([master_seed, crc32(agent_id), sweep_index, replicate])`` so
that every (agent, sweep point, replicate) cell gets an independent stream
and adding agents or sweep points never shifts the streams of other cells.

Cost accounting: the weighted age of the state at the start of slot ``t`` is
charged in slot ``t`` (t = 1..T, starting from ``s_0``).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .env import (Action, ConfigError, EnvConfig, InfeasibleActionError, SystemState,
                  UserChannel, initial_state, step)
from .learn import LearnerConfig, SarsaAgent, Trajectory, Ucrl2Agent, World, run_segment
from .policy import lower_bound_terms
from .solve import MixturePolicy, TablePolicy, solve_cmdp

log = logging.getLogger(__name__)

CSV_HEADER = ("preset", "sweep_var", "sweep_value", "agent", "seed_count",
              "mean_J", "std_J", "mean_C", "std_C")
CURVE_HEADER = ("preset", "sweep_value", "agent", "t", "running_avg_J")


# -- agents -------------------------------------------------------------------------

def _raise_infeasible(world: World, traj: Trajectory, slot: int):
    s = world.space.decode(int(traj.state[slot]))
    a = Action.from_code(int(traj.action[slot]), world.config.M)
    raise InfeasibleActionError(f"agent chose infeasible action {a} at slot {slot + 1} in state {s.flat()}")


class StationaryAgent:
    """Fixed table or two-table mixture policy over the truncated grid."""

    def __init__(self, policy: TablePolicy | MixturePolicy, name: str = "stationary"):
        self.policy = policy
        self.name = name

    def run(self, config: EnvConfig, T: int, rng: np.random.Generator, log: bool = True) -> Trajectory:
        pol = self.policy
        if isinstance(pol, MixturePolicy):
            a, b, mu = pol.pi_low.codes, pol.pi_high.codes, pol.mu
        else:
            a, b, mu = pol.codes, pol.codes, 1.0
        return _run_kernel(config, T, rng, kernels.TABLE, table_a=a, table_b=b, mu=mu)


class RuleAgent:
    """Index or heuristic rule with known parameters: whittle, greedy, round_robin or idle."""

    KINDS = {"whittle": kernels.WHITTLE, "greedy": kernels.GREEDY,
             "round_robin": kernels.ROUND_ROBIN, "idle": kernels.IDLE_RULE}

    def __init__(self, rule: str, eta: float = 0.0, error_probs: Sequence[float] | None = None,
                 name: str | None = None):
        if rule not in self.KINDS:
            raise ConfigError(f"unknown rule {rule!r}; choose from {sorted(self.KINDS)}")
        self.rule = rule
        self.eta = float(eta)
        self.error_probs = error_probs
        self.name = name or rule

    def run(self, config: EnvConfig, T: int, rng: np.random.Generator, log: bool = True) -> Trajectory:
        p = config.fail_matrix[:, 0] if self.error_probs is None else self.error_probs
        if self.rule == "whittle" and np.any(np.asarray(p) >= 1.0):
            raise ConfigError("the Whittle rule needs error probabilities below 1")
        return _run_kernel(config, T, rng, self.KINDS[self.rule], index_p=p, eta=self.eta)


class CallableAgent:
    """Wraps ``fn(state, t) -> Action``; simulated step by step in Python."""

    def __init__(self, fn: Callable[[SystemState, int], Action], name: str = "callable"):
        self.fn = fn
        self.name = name

    def run(self, config: EnvConfig, T: int, rng: np.random.Generator, log: bool = True) -> Trajectory:
        from .env import TruncatedSpace, feasible_actions

        space = TruncatedSpace.of(config)
        traj = Trajectory.empty(T, config.M)
        s = initial_state(config)
        for t in range(T):
            a = self.fn(s, t)
            if a not in feasible_actions(s, config):
                raise InfeasibleActionError(f"agent chose infeasible action {a} at slot {t + 1} in state {s.flat()}")
            traj.cap_hit |= max(s.ages) > config.delta_max
            traj.state[t] = space.encode(_saturate(s, config.delta_max))
            traj.action[t] = a.code(config.M)
            s2, cost, _ = step(s, a, config, rng)
            traj.cost[t] = cost
            if a.transmits:
                ok = s2.ages[a.user] < s.ages[a.user] + 1
                traj.feedback[t] = kernels.ACK if ok else kernels.NACK
            s = s2
        return traj


def _saturate(s: SystemState, D: int) -> SystemState:
    return SystemState(tuple(min(d, D) for d in s.ages), s.retx)


def _run_kernel(config: EnvConfig, T: int, rng: np.random.Generator, kind: int, **kw) -> Trajectory:
    world = World(config)
    traj = Trajectory.empty(T, config.M)
    u = rng.random((T, 2))
    steps, _, cap, status = run_segment(world, kind, T, u, traj, **kw)
    if status:
        _raise_infeasible(world, traj, steps)
    traj.cap_hit = bool(cap)
    return traj


# -- metrics ------------------------------------------------------------------------

@dataclass
class RunMetrics:
    T: int
    curve_t: np.ndarray
    curve_J: np.ndarray
    J_emp: float
    C_emp: float
    cap_hit: bool
    seed: int | None = None
    burn_in: int = 0
    trajectory: Trajectory | None = field(default=None, repr=False)

    @classmethod
    def from_trajectory(cls, traj: Trajectory, stride: int = 1000, burn_in: int = 0,
                        seed: int | None = None, keep: bool = False) -> "RunMetrics":
        T = traj.T
        if not 0 <= burn_in < T:
            raise ValueError("burn_in must lie in [0, T)")
        running = np.cumsum(traj.cost) / np.arange(1, T + 1)
        stride = max(1, int(stride))
        idx = np.arange(stride - 1, T, stride)
        if idx.size == 0 or idx[-1] != T - 1:
            idx = np.append(idx, T - 1)
        tail = slice(burn_in, T)
        return cls(T, idx + 1, running[idx], float(traj.cost[tail].mean()),
                   float(np.mean(traj.action[tail] != 0)), bool(traj.cap_hit), seed, burn_in,
                   traj if keep else None)


def rollout(agent, config: EnvConfig, T: int, seed: int | np.random.SeedSequence | None,
            stride: int = 1000, burn_in: int = 0, keep_trajectory: bool = False) -> RunMetrics:
    """Run ``agent`` for ``T`` slots from ``s_0``; deterministic given ``seed``.

    ``agent`` is anything with ``run(config, T, rng) -> Trajectory`` (fixed
    policies, rules, learners) or a plain callable ``fn(state, t) -> Action``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if callable(agent) and not hasattr(agent, "run"):
        agent = CallableAgent(agent)
    rng = np.random.default_rng(seed)
    traj = agent.run(config, T, rng)
    label = seed if isinstance(seed, (int, np.integer)) else None
    return RunMetrics.from_trajectory(traj, stride, burn_in, label, keep_trajectory)


def cell_seed(master_seed: int, agent_id: str, sweep_index: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), zlib.crc32(agent_id.encode()), int(sweep_index),
                                   int(replicate)])


# -- presets ------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentSpec:
    """``make(config)`` builds a runnable agent; ``reference`` agents are analytic and not simulated."""

    id: str
    make: Callable[[EnvConfig], object] | None = None
    reference: Callable[[EnvConfig], tuple[float, float]] | None = None


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    sweep_var: str
    sweep_values: tuple
    make_config: Callable[[object], EnvConfig]
    agents: tuple[AgentSpec, ...]
    T: int = 100_000
    seeds: int = 10
    burn_in: int = 0

    def __post_init__(self):
        if self.T < 1 or self.seeds < 1:
            raise ConfigError("a preset needs T >= 1 and seeds >= 1")

    def with_(self, **kw) -> "ExperimentPreset":
        from dataclasses import replace
        return replace(self, **kw)


def _ucrl(planner: str, lcfg: LearnerConfig | None = None) -> AgentSpec:
    from dataclasses import replace
    base = lcfg or LearnerConfig()
    return AgentSpec(f"ucrl2-{planner}", lambda cfg: Ucrl2Agent(replace(base, planner=planner)))


def _sarsa(lcfg: LearnerConfig | None = None) -> AgentSpec:
    return AgentSpec("sarsa", lambda cfg: SarsaAgent(lcfg or LearnerConfig()))


def _bound_ref(cfg: EnvConfig) -> tuple[float, float]:
    return lower_bound_terms(cfg).J_LB, cfg.lam


_ORACLES: dict[tuple, MixturePolicy] = {}


def oracle_policy(cfg: EnvConfig) -> MixturePolicy:
    """Constrained optimum with known channels (memoised per config)."""
    key = (cfg.protocol, cfg.r_max, cfg.delta_max, cfg.lam,
           tuple(ch.weight for ch in cfg.channels), tuple(tuple(ch.error_curve) for ch in cfg.channels))
    if key not in _ORACLES:
        _ORACLES[key] = solve_cmdp(cfg).mixture
    return _ORACLES[key]


LOWER_BOUND = AgentSpec("lower_bound", reference=_bound_ref)
VI_ORACLE = AgentSpec("vi", lambda cfg: StationaryAgent(oracle_policy(cfg), "vi"))
WHITTLE_KNOWN = AgentSpec("whittle", lambda cfg: RuleAgent("whittle"))
GREEDY = AgentSpec("greedy", lambda cfg: RuleAgent("greedy"))
ROUND_ROBIN = AgentSpec("round_robin", lambda cfg: RuleAgent("round_robin"))

FIG2_LAMBDAS = (0.3, 0.4, 0.5, 0.6, 0.8, 1.0)
FIG_P = (0.5, 0.2, 0.1)
LEARNER_DELTA_MAX = 30


def fig3_probs(M: int) -> tuple[float, ...]:
    """``p_j = j / (M + 1)``; the literal ``j / M`` would give the last user a dead link."""
    return tuple(j / (M + 1) for j in range(1, M + 1))


def harq_fig5_curve(r_max: int = 3) -> list[float]:
    return UserChannel.geometric(0.5, 0.5, r_max).error_curve


def make_preset(name: str, sizes: Sequence[int] | None = None) -> ExperimentPreset:
    D = LEARNER_DELTA_MAX
    if name == "fig2":
        return ExperimentPreset(
            "fig2", "lambda", FIG2_LAMBDAS,
            lambda lam: EnvConfig.arq(FIG_P, delta_max=D, lam=lam),
            (_ucrl("vi"), _ucrl("whittle"), LOWER_BOUND))
    if name == "fig3":
        return ExperimentPreset(
            "fig3", "M", tuple(sizes or range(2, 7)),
            lambda M: EnvConfig.arq(fig3_probs(int(M)), delta_max=D, lam=1.0),
            (AgentSpec("ucrl2-whittle", _ucrl("whittle").make), WHITTLE_KNOWN, GREEDY, ROUND_ROBIN,
             LOWER_BOUND))
    if name == "fig4":
        return ExperimentPreset(
            "fig4", "lambda", (1.0,),
            lambda lam: EnvConfig.arq(FIG_P, delta_max=D, lam=lam),
            (_ucrl("whittle"), _ucrl("vi"), _sarsa(), VI_ORACLE))
    if name == "fig5":
        curve = harq_fig5_curve()
        return ExperimentPreset(
            "fig5", "lambda", (1.0,),
            lambda lam: EnvConfig.harq([curve, curve], delta_max=D, lam=lam, r_max=len(curve) - 1),
            (_ucrl("vi"), _sarsa(), VI_ORACLE))
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


PRESETS = ("fig2", "fig3", "fig4", "fig5")


# -- sweeps -------------------------------------------------------------------------

@dataclass
class CellResult:
    sweep_index: int
    sweep_value: object
    agent: str
    metrics: list[RunMetrics] = field(default_factory=list)
    reference: tuple[float, float] | None = None
    error: str | None = None

    def row(self, preset: ExperimentPreset) -> tuple:
        head = (preset.name, preset.sweep_var, _fmt(self.sweep_value), self.agent)
        if self.error is not None:
            return head + (0, "nan", "nan", "nan", "nan")
        if self.reference is not None:
            J, C = self.reference
            return head + (0, _fmt(J), _fmt(0.0), _fmt(C), _fmt(0.0))
        J = np.array([m.J_emp for m in self.metrics])
        C = np.array([m.C_emp for m in self.metrics])
        return head + (len(J), _fmt(J.mean()), _fmt(_std(J)), _fmt(C.mean()), _fmt(_std(C)))

    def mean_curve(self) -> tuple[np.ndarray, np.ndarray]:
        return self.metrics[0].curve_t, np.mean([m.curve_J for m in self.metrics], axis=0)


@dataclass
class SweepResult:
    preset: ExperimentPreset
    cells: list[CellResult]

    def rows(self) -> list[tuple]:
        return [c.row(self.preset) for c in self.cells]

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]

    def cell(self, sweep_value, agent: str) -> CellResult:
        for c in self.cells:
            if c.agent == agent and c.sweep_value == sweep_value:
                return c
        raise KeyError((sweep_value, agent))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for c in self.cells:
            if c.error is not None or not c.metrics:
                continue
            t, J = c.mean_curve()
            for ti, Ji in zip(t, J):
                w.writerow((self.preset.name, _fmt(c.sweep_value), c.agent, int(ti), _fmt(Ji)))
        return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else format(float(x), ".10g")
    return str(x)


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _run_cell(preset: ExperimentPreset, index: int, value, spec: AgentSpec, master_seed: int,
              stride: int) -> CellResult:
    cell = CellResult(index, value, spec.id)
    try:
        cfg = preset.make_config(value)
        if spec.reference is not None:
            cell.reference = spec.reference(cfg)
            return cell
        for rep in range(preset.seeds):
            agent = spec.make(cfg)
            ss = cell_seed(master_seed, spec.id, index, rep)
            m = rollout(agent, cfg, preset.T, ss, stride=stride, burn_in=preset.burn_in)
            m.seed = rep
            cell.metrics.append(m)
    except Exception as exc:  # recorded as a failure row, the sweep goes on
        log.warning("cell (%s=%s, %s) failed: %s", preset.sweep_var, value, spec.id, exc)
        cell.metrics = []
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _run_named_cell(name: str, overrides: dict, index: int, agent_id: str, master_seed: int,
                    stride: int) -> CellResult:
    # presets hold closures, so worker processes rebuild them by name
    preset = make_preset(name, overrides["sweep_values"]).with_(**overrides)
    spec = next(a for a in preset.agents if a.id == agent_id)
    return _run_cell(preset, index, preset.sweep_values[index], spec, master_seed, stride)


def sweep(preset: ExperimentPreset, master_seed: int = 0, stride: int = 1000,
          agents: Iterable[str] | None = None, workers: int = 1,
          progress: Callable[[CellResult], None] | None = None) -> SweepResult:
    """Run every (sweep value, agent) cell; rows come out in (sweep value, agent) order.

    With ``workers > 1`` cells run in worker processes; results are merged by
    cell key, so the output does not depend on completion order.
    """
    specs = [a for a in preset.agents if agents is None or a.id in set(agents)]
    jobs = [(i, v, s) for i, v in enumerate(preset.sweep_values) for s in specs]
    if workers > 1:
        if preset.name not in PRESETS:
            raise ConfigError("parallel sweeps are only available for the bundled presets")
        over = dict(sweep_values=preset.sweep_values, T=preset.T, seeds=preset.seeds,
                    burn_in=preset.burn_in)
        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(_run_named_cell, preset.name, over, i, s.id, master_seed, stride)
                    for i, _, s in jobs]
            cells = [f.result() for f in futs]
    else:
        cells = []
        for i, v, s in jobs:
            cells.append(_run_cell(preset, i, v, s, master_seed, stride))
            if progress:
                progress(cells[-1])
    key = {(i, s.id): n for n, (i, _, s) in enumerate(jobs)}
    cells.sort(key=lambda c: key[(c.sweep_index, c.agent)])
    return SweepResult(preset, cells)


def first_within(curve_t: np.ndarray, curve_J: np.ndarray, target: float, frac: float) -> int | None:
    """First logged slot from which the running average stays within ``frac`` of ``target``."""
    ok = np.abs(curve_J - target) <= frac * abs(target)
    if not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    return int(curve_t[0] if bad.size == 0 else curve_t[bad[-1] + 1])


__all__ = [
    "AgentSpec", "CSV_HEADER", "CallableAgent", "ExperimentPreset", "PRESETS", "RuleAgent",
    "RunMetrics", "StationaryAgent", "SweepResult", "cell_seed", "first_within", "make_preset",
    "oracle_policy", "rollout", "sweep",
]
