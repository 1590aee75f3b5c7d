"""TOML run configuration: four sections, every key typed, unknown keys rejected.

Grammar (all sections and keys optional unless noted)::

    [env]
    protocol  = "ARQ" | "HARQ"
    M         = int                  # cross-checked against the per-user arrays
    p         = [float, ...]         # ARQ error probabilities (required for ARQ)
    g         = [[float, ...], ...]  # HARQ curves g_j(0..r_max), or instead:
    p0        = float | [float, ...] # geometric family g_j(r) = p0_j * q_j**r
    q         = float | [float, ...]
    r_max     = int
    weights   = [float, ...]         # default all ones
    delta_max = int                  # solver-side age cap, default 100
    lambda    = float                # transmission budget in (0, 1]

    [solver]   tol, max_iter, eta0 ("auto" or number), eps, xi, dual_max_iter, max_states
    [learner]  agent ("ucrl2" | "sarsa"), planner ("vi" | "whittle"), T, delta, alpha, U,
               rvi_tol, beta0, beta_ref, gamma, eps_start, eps_end, eps_anneal, eta_period
    [run]      seeds, master_seed, horizon, out, stride, burn_in, policy, trajectory

The normalised document fills in every default, so ``load -> dump -> load``
is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .env import ARQ, HARQ, ConfigError, EnvConfig, UserChannel
from .learn import LearnerConfig

_NUM = (int, float)
_LEARNER_TYPES = {int: (int,), float: _NUM, str: (str,)}

# key -> (accepted types, default); ``None`` defaults are left out of the document
SCHEMA: dict[str, dict[str, tuple[tuple, Any]]] = {
    "env": {
        "protocol": ((str,), ARQ),
        "M": ((int,), None),
        "p": ((list,), None),
        "g": ((list,), None),
        "p0": ((int, float, list), None),
        "q": ((int, float, list), None),
        "r_max": ((int,), None),
        "weights": ((list,), None),
        "delta_max": ((int,), 100),
        "lambda": (_NUM, 1.0),
    },
    "solver": {
        "tol": (_NUM, 1e-6),
        "max_iter": ((int,), 100_000),
        "eta0": ((str, int, float), "auto"),
        "eps": (_NUM, 1e-3),
        "xi": (_NUM, None),
        "dual_max_iter": ((int,), 500),
        "max_states": ((int,), 1_000_000),
    },
    "learner": {
        "agent": ((str,), "ucrl2"),
        "planner": ((str,), "vi"),
        "T": ((int,), 100_000),
        **{f.name: (_LEARNER_TYPES[type(f.default)], f.default)
           for f in fields(LearnerConfig) if f.name not in ("planner", "lam")},
    },
    "run": {
        "seeds": ((int,), 10),
        "master_seed": ((int,), 0),
        "horizon": ((int,), 100_000),
        "out": ((str,), None),
        "stride": ((int,), 1000),
        "burn_in": ((int,), 0),
        "policy": ((str,), "optimal"),
        "trajectory": ((str,), None),
    },
}

POLICIES = ("optimal", "whittle", "greedy", "round_robin", "idle")
AGENTS = ("ucrl2", "sarsa")


def _check_type(section: str, key: str, value, types: tuple):
    if isinstance(value, bool) or not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"[{section}] {key} must be {names}, got {value!r}")


def normalise(doc: dict) -> dict:
    """Validate keys and types and fill defaults; returns a fresh document."""
    unknown = set(doc) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    out: dict[str, dict] = {}
    for section, schema in SCHEMA.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        bad = set(given) - set(schema)
        if bad:
            raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(bad))}")
        sec = {}
        for key, (types, default) in schema.items():
            if key in given:
                _check_type(section, key, given[key], types)
                value = given[key]
                if types == _NUM or (float in types and isinstance(value, int)):
                    value = float(value)
                sec[key] = value
            elif default is not None:
                sec[key] = default
        out[section] = sec
    out["env"]["protocol"] = out["env"]["protocol"].upper()
    return out


@dataclass
class CliConfig:
    doc: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "CliConfig":
        cfg = cls(normalise(doc))
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "CliConfig":
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "CliConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def dumps(self) -> str:
        return tomli_w.dumps(self.doc)

    def __getitem__(self, section: str) -> dict:
        return self.doc[section]

    def validate(self):
        """Re-run every module-level validation at load time."""
        self.env_config()
        self.learner_config()
        run, solver, lrn = self["run"], self["solver"], self["learner"]
        if run["seeds"] < 1:
            raise ConfigError("[run] seeds must be >= 1")
        if run["horizon"] < 1 or lrn["T"] < 1:
            raise ConfigError("horizons must be >= 1")
        if run["policy"] not in POLICIES:
            raise ConfigError(f"[run] policy must be one of {POLICIES}")
        if lrn["agent"] not in AGENTS:
            raise ConfigError(f"[learner] agent must be one of {AGENTS}")
        if solver["tol"] <= 0 or solver["eps"] <= 0:
            raise ConfigError("[solver] tol and eps must be positive")
        eta0 = solver["eta0"]
        if isinstance(eta0, str) and eta0 != "auto":
            raise ConfigError('[solver] eta0 must be "auto" or a number')
        if not isinstance(eta0, str) and eta0 < 0:
            raise ConfigError("[solver] eta0 must be non-negative")

    def env_config(self) -> EnvConfig:
        env = self["env"]
        proto = env["protocol"]
        if proto not in (ARQ, HARQ):
            raise ConfigError(f"[env] protocol must be ARQ or HARQ, got {proto!r}")
        kw = dict(delta_max=env["delta_max"], lam=env["lambda"])
        weights = env.get("weights")
        if proto == ARQ:
            if "p" not in env:
                raise ConfigError("[env] ARQ needs the per-user error probabilities p")
            for key in ("g", "p0", "q"):
                if key in env:
                    raise ConfigError(f"[env] {key} only applies to HARQ")
            probs = _floats(env["p"], "p")
            curves = [(p,) for p in probs]
            if env.get("r_max", 0) != 0:
                raise ConfigError("[env] r_max must be 0 (or absent) for ARQ")
        else:
            curves = _harq_curves(env)
            kw["r_max"] = len(curves[0]) - 1
        M = len(curves)
        if weights is None:
            weights = [1.0] * M
        weights = _floats(weights, "weights")
        if len(weights) != M:
            raise ConfigError(f"[env] weights has {len(weights)} entries for {M} users")
        if "M" in env and env["M"] != M:
            raise ConfigError(f"[env] M={env['M']} but {M} users are described")
        chans = tuple(UserChannel(c, w) for c, w in zip(curves, weights))
        return EnvConfig(chans, proto, **kw)

    def learner_config(self) -> LearnerConfig:
        lrn = {k: v for k, v in self["learner"].items() if k not in ("agent", "T")}
        return LearnerConfig(lam=self["env"]["lambda"], **lrn)


def _floats(values, name: str) -> list[float]:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"[env] {name} must be a non-empty array")
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"[env] {name} entries must be numbers, got {v!r}")
    return [float(v) for v in values]


def _harq_curves(env: dict) -> list[list[float]]:
    if "p" in env:
        raise ConfigError("[env] HARQ takes g or (p0, q), not p")
    if "g" in env:
        if "p0" in env or "q" in env:
            raise ConfigError("[env] give either g or (p0, q), not both")
        curves = [_floats(c, "g") for c in env["g"]]
        if not curves:
            raise ConfigError("[env] g must list one curve per user")
        if "r_max" in env and any(len(c) != env["r_max"] + 1 for c in curves):
            raise ConfigError(f"[env] each g curve needs r_max + 1 = {env['r_max'] + 1} values")
        return curves
    if "p0" not in env or "q" not in env or "r_max" not in env:
        raise ConfigError("[env] HARQ needs g, or p0 and q together with r_max")
    p0, q = env["p0"], env["q"]
    lists = [len(x) for x in (p0, q) if isinstance(x, list)]
    if not lists and "M" not in env:
        raise ConfigError("[env] scalar p0 and q need M to fix the number of users")
    n = lists[0] if lists else env["M"]
    p0 = _floats(p0, "p0") if isinstance(p0, list) else [float(p0)] * n
    q = _floats(q, "q") if isinstance(q, list) else [float(q)] * n
    if len(p0) != len(q):
        raise ConfigError("[env] p0 and q must have the same length")
    return [list(UserChannel.geometric(a, b, env["r_max"]).error_curve) for a, b in zip(p0, q)]
