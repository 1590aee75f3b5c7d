"""Command-line front end.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import CliConfig
from .env import ARQ, ConfigError, TruncatedSpace
from .harness import (PRESETS, AgentSpec, ExperimentPreset, RuleAgent, StationaryAgent,
                      make_preset, oracle_policy, rollout, sweep, cell_seed)
from .learn import SarsaAgent, Ucrl2Agent
from .policy import lower_bound_terms
from .solve import LagrangianProblem, SolverError, rvi, solve_cmdp

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("aoisched")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--seeds", type=int, help="number of replicates")
    p.add_argument("--master-seed", type=int, help="master seed for seed splitting")
    p.add_argument("--horizon", type=int, help="number of slots T")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="aoisched", description="Age-of-information scheduling workbench")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("bound", parents=[common], help="closed-form ARQ lower bound (JSON)")
    sub.add_parser("solve", parents=[common], help="exact constrained optimum (JSON)")
    sim = sub.add_parser("simulate", parents=[common], help="roll out a fixed policy (CSV)")
    sim.add_argument("--curves", help="write the running-average curve CSV here")
    lrn = sub.add_parser("learn", parents=[common], help="run a learning agent (CSV)")
    lrn.add_argument("--curves", help="write the running-average curve CSV here")
    lrn.add_argument("--trajectory", help="JSONL per-slot log of the first replicate")
    rep = sub.add_parser("reproduce", parents=[common], help="run a figure preset (CSV)")
    rep.add_argument("preset", help=f"one of {', '.join(PRESETS)}")
    rep.add_argument("--sizes", help="network sizes for fig3, e.g. 2..6 or 2,4,6")
    rep.add_argument("--full", action="store_true", help="use 100 seeds")
    rep.add_argument("--agents", help="comma-separated subset of agent ids")
    rep.add_argument("--curves", help="write the running-average curve CSV here")
    rep.add_argument("--workers", type=int, default=1, help="worker processes")
    return parser


def parse_sizes(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            sizes = list(range(int(lo), int(hi) + 1))
        else:
            sizes = [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --sizes {text!r}; use 2..6 or 2,3,4") from exc
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes must list positive network sizes")
    return sizes


@contextmanager
def _sink(path: str | None):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _load(args) -> CliConfig:
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    cfg = CliConfig.load(args.config)
    run = cfg["run"]
    if args.seeds is not None:
        run["seeds"] = args.seeds
    if args.master_seed is not None:
        run["master_seed"] = args.master_seed
    if args.horizon is not None:
        run["horizon"] = cfg["learner"]["T"] = args.horizon
    cfg.validate()
    return cfg


def _json_out(obj, path):
    with _sink(path) as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def cmd_bound(args) -> int:
    cfg = _load(args)
    env = cfg.env_config()
    b = lower_bound_terms(env)
    _json_out({"J_LB": b.J_LB, "j_star": b.j_star + 1,
               "inputs": {"p": env.fail_matrix[:, 0].tolist(), "weights": env.weights.tolist(),
                          "lambda": env.lam}}, args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load(args)
    env = cfg.env_config()
    sv = cfg["solver"]
    size = TruncatedSpace.of(env).size
    if size > sv["max_states"]:
        raise ConfigError(f"truncated grid has {size} states, above max_states={sv['max_states']}")
    sol = solve_cmdp(env, sv["tol"], sv["max_iter"], sv["eta0"], sv["eps"], sv.get("xi"),
                     sv["dual_max_iter"])
    res = rvi(LagrangianProblem(env, sol.eta_star), sv["tol"], sv["max_iter"])
    out = {"solve_result": res.to_dict(), "mixture": sol.to_dict(), "n_states": size}
    if env.protocol == ARQ:
        try:
            out["lower_bound"] = lower_bound_terms(env).J_LB
        except ConfigError:
            pass
    _json_out(out, args.out)
    return EXIT_OK


def _single_point(name: str, cfg: CliConfig, agent: AgentSpec, T: int) -> ExperimentPreset:
    env = cfg.env_config()
    run = cfg["run"]
    return ExperimentPreset(name, "lambda", (env.lam,), lambda _: env, (agent,), T, run["seeds"],
                            run["burn_in"])


def _policy_spec(cfg: CliConfig) -> AgentSpec:
    pol = cfg["run"]["policy"]
    if pol == "optimal":
        return AgentSpec("optimal", lambda env: StationaryAgent(oracle_policy(env), "optimal"))
    return AgentSpec(pol, lambda env: RuleAgent(pol))


def _learner_spec(cfg: CliConfig) -> AgentSpec:
    lcfg = cfg.learner_config()
    if cfg["learner"]["agent"] == "sarsa":
        return AgentSpec("sarsa", lambda env: SarsaAgent(lcfg))
    return AgentSpec(f"ucrl2-{lcfg.planner}", lambda env: Ucrl2Agent(lcfg))


def _emit_sweep(result, args, out_path):
    with _sink(out_path) as fh:
        fh.write(result.to_csv())
    if getattr(args, "curves", None):
        Path(args.curves).write_text(result.curves_csv())
    for cell in result.failures:
        print(f"cell {cell.sweep_value}/{cell.agent} failed: {cell.error}", file=sys.stderr)
    return EXIT_RUNTIME if result.failures else EXIT_OK


def _progress(args):
    if args.quiet:
        return None
    return lambda c: print(f"  done {c.sweep_value} {c.agent}", file=sys.stderr)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    preset = _single_point("simulate", cfg, _policy_spec(cfg), cfg["run"]["horizon"])
    result = sweep(preset, cfg["run"]["master_seed"], cfg["run"]["stride"], progress=_progress(args))
    return _emit_sweep(result, args, args.out or cfg["run"].get("out"))


def cmd_learn(args) -> int:
    cfg = _load(args)
    spec = _learner_spec(cfg)
    env = cfg.env_config()
    preset = _single_point("learn", cfg, spec, cfg["learner"]["T"])
    result = sweep(preset, cfg["run"]["master_seed"], cfg["run"]["stride"], progress=_progress(args))
    traj_path = args.trajectory or cfg["run"].get("trajectory")
    if traj_path and not result.failures:
        m = rollout(spec.make(env), env, preset.T, cell_seed(cfg["run"]["master_seed"], spec.id, 0, 0),
                    keep_trajectory=True)
        with open(traj_path, "w") as fh:
            m.trajectory.write_jsonl(fh, TruncatedSpace.of(env))
    return _emit_sweep(result, args, args.out or cfg["run"].get("out"))


def cmd_reproduce(args) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
    sizes = parse_sizes(args.sizes) if args.sizes else None
    if sizes and args.preset != "fig3":
        raise ConfigError("--sizes only applies to fig3")
    preset = make_preset(args.preset, sizes)
    over = {}
    if args.full:
        over["seeds"] = 100
    if args.seeds is not None:
        over["seeds"] = args.seeds
    if args.horizon is not None:
        over["T"] = args.horizon
    preset = preset.with_(**over)
    agents = None
    if args.agents:
        agents = [a.strip() for a in args.agents.split(",")]
        known = {a.id for a in preset.agents}
        if not set(agents) <= known:
            raise ConfigError(f"unknown agent(s) {sorted(set(agents) - known)}; preset has {sorted(known)}")
    result = sweep(preset, args.master_seed or 0, agents=agents, workers=args.workers,
                   progress=_progress(args))
    return _emit_sweep(result, args, args.out)


COMMANDS = {"bound": cmd_bound, "solve": cmd_solve, "simulate": cmd_simulate,
            "learn": cmd_learn, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.quiet:
            logging.getLogger().setLevel(logging.ERROR)
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    except (SolverError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is still a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
