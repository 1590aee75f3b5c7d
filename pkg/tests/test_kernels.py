import os
import subprocess
import sys

import numpy as np
import pytest

from aoisched import kernels
from aoisched.env import EnvConfig
from aoisched.harness import RuleAgent, StationaryAgent, rollout
from aoisched.learn import LearnerConfig, SarsaAgent, Ucrl2Agent
from aoisched.solve import LagrangianProblem, rvi, solve_cmdp

compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="extension not built")


def _use(monkeypatch, backend):
    for name in ("bellman_sweep", "run_segment", "run_sarsa"):
        monkeypatch.setattr(kernels, name, getattr(backend, name))


def _both(monkeypatch, fn):
    _use(monkeypatch, kernels.compiled_backend)
    a = fn()
    _use(monkeypatch, kernels.python_backend)
    b = fn()
    return a, b


CASES = [EnvConfig.arq([0.5, 0.2, 0.1], delta_max=12, lam=0.5),
         EnvConfig.harq([[0.5, 0.25, 0.125], [0.4, 0.3, 0.1]], delta_max=10, lam=0.6)]


@compiled
@pytest.mark.parametrize("cfg", CASES)
def test_rvi_backends_agree(monkeypatch, cfg):
    a, b = _both(monkeypatch, lambda: rvi(LagrangianProblem(cfg, 4.0)))
    assert np.array_equal(a.policy.codes, b.policy.codes)
    assert a.gain == pytest.approx(b.gain, abs=1e-12)
    assert np.allclose(a.h, b.h, atol=1e-9)


@compiled
@pytest.mark.parametrize("rule", ["whittle", "greedy", "round_robin", "idle"])
def test_rule_rollouts_agree(monkeypatch, rule):
    cfg = CASES[0]
    a, b = _both(monkeypatch, lambda: rollout(RuleAgent(rule, eta=3.0), cfg, 3000, 5,
                                              keep_trajectory=True).trajectory)
    for f in ("cost", "action", "feedback", "state"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


@compiled
@pytest.mark.parametrize("cfg", CASES)
def test_mixture_rollouts_agree(monkeypatch, cfg):
    mix = solve_cmdp(cfg).mixture
    a, b = _both(monkeypatch, lambda: rollout(StationaryAgent(mix), cfg, 3000, 2,
                                              keep_trajectory=True).trajectory)
    assert np.array_equal(a.action, b.action)
    assert np.array_equal(a.cost, b.cost)


@compiled
@pytest.mark.parametrize("cfg, planner", [(CASES[0], "whittle"), (CASES[0], "vi"), (CASES[1], "vi")])
def test_ucrl_backends_agree(monkeypatch, cfg, planner):
    def go():
        agent = Ucrl2Agent(LearnerConfig(planner=planner))
        traj = agent.run(cfg, 3000, np.random.default_rng(1))
        return traj, agent.stats

    (ta, sa), (tb, sb) = _both(monkeypatch, go)
    assert np.array_equal(ta.action, tb.action)
    assert ta.episodes == tb.episodes
    assert np.array_equal(sa.N, sb.N) and np.array_equal(sa.E, sb.E)


@compiled
@pytest.mark.parametrize("cfg", CASES)
def test_sarsa_backends_agree(monkeypatch, cfg):
    def go():
        agent = SarsaAgent(LearnerConfig(eta_period=500))
        traj = agent.run(cfg, 3000, np.random.default_rng(3))
        return traj, agent.sarsa

    (ta, qa), (tb, qb) = _both(monkeypatch, go)
    assert np.array_equal(ta.action, tb.action)
    assert np.allclose(qa.Q, qb.Q, atol=1e-9)
    assert qa.rho == pytest.approx(qb.rho, abs=1e-9)
    assert qa.eta == pytest.approx(qb.eta, abs=1e-9)


def test_pure_python_switch():
    code = "from aoisched import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, AOISCHED_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if kernels.compiled_backend is not None:
        assert kernels.BACKEND == "cython"
