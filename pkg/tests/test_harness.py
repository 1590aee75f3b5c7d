import csv
import io

import numpy as np
import pytest

from aoisched.env import Action, EnvConfig, InfeasibleActionError
from aoisched.harness import (CSV_HEADER, CURVE_HEADER, AgentSpec, ExperimentPreset, RuleAgent,
                              RunMetrics, StationaryAgent, cell_seed, first_within, make_preset,
                              rollout, sweep)
from aoisched.env import ConfigError
from aoisched.learn import Trajectory
from aoisched.policy import WhittleContext, constant_table, whittle_table
from aoisched.solve import LagrangianProblem, evaluate_policy, rvi


def test_always_idle_three_slots():
    cfg = EnvConfig.arq([0.3], delta_max=2)
    m = rollout(RuleAgent("idle"), cfg, 3, seed=0)
    assert (m.J_emp, m.C_emp) == (2.0, 0.0)
    # same through the table path and the python path
    assert rollout(StationaryAgent(constant_table(cfg, Action.idle())), cfg, 3, 0).J_emp == 2.0
    assert rollout(lambda s, t: Action.idle(), cfg, 3, 0).J_emp == 2.0


def test_always_new_on_perfect_channel():
    cfg = EnvConfig.arq([0.0], delta_max=5)
    m = rollout(lambda s, t: Action.new(0), cfg, 100, seed=1)
    assert (m.J_emp, m.C_emp) == (1.0, 1.0)
    m2 = rollout(StationaryAgent(constant_table(cfg, Action.new(0))), cfg, 100, seed=1)
    assert (m2.J_emp, m2.C_emp) == (1.0, 1.0)


@pytest.mark.parametrize("M", [2, 3, 5])
def test_round_robin_closed_form(M):
    cfg = EnvConfig.arq([0.0] * M, delta_max=10)
    m = rollout(RuleAgent("round_robin"), cfg, 30_000, seed=0)
    assert m.J_emp == pytest.approx(M * (M + 1) / 2, rel=0.005)


def test_infeasible_action_names_slot_and_state():
    cfg = EnvConfig.harq([[0.5, 0.25]], delta_max=10)
    with pytest.raises(InfeasibleActionError, match="slot 1"):
        rollout(lambda s, t: Action.retx(0), cfg, 5, seed=0)
    codes = np.full(10 * 2, 2, dtype=np.int64)  # retx everywhere, including r=0 states
    from aoisched.solve import TablePolicy
    with pytest.raises(InfeasibleActionError, match=r"state \(1, 0\)"):
        rollout(StationaryAgent(TablePolicy(codes)), cfg, 5, seed=0)


def test_metric_invariants_and_curve():
    cfg = EnvConfig.arq([0.5, 0.2, 0.1], weights=[2.0, 1.0, 0.5], delta_max=20)
    m = rollout(RuleAgent("whittle"), cfg, 10_500, seed=3, stride=1000)
    assert m.J_emp >= 3.5
    assert 0.0 <= m.C_emp <= 1.0
    assert m.curve_t[-1] == 10_500 and m.curve_t[0] == 1000
    assert m.curve_J[-1] == pytest.approx(m.J_emp)


def test_burn_in_drops_the_transient():
    traj = Trajectory.empty(4, 1)
    traj.cost[:] = [10.0, 10.0, 1.0, 1.0]
    traj.action[:] = [0, 0, 1, 1]
    m = RunMetrics.from_trajectory(traj, stride=1, burn_in=2)
    assert (m.J_emp, m.C_emp) == (1.0, 1.0)
    assert m.curve_J[-1] == pytest.approx(5.5)
    with pytest.raises(ValueError):
        RunMetrics.from_trajectory(traj, burn_in=4)


def test_rollout_reproducible():
    cfg = EnvConfig.arq([0.5, 0.2, 0.1], delta_max=20)
    a = rollout(RuleAgent("greedy"), cfg, 5000, seed=9, keep_trajectory=True)
    b = rollout(RuleAgent("greedy"), cfg, 5000, seed=9, keep_trajectory=True)
    assert np.array_equal(a.trajectory.cost, b.trajectory.cost)
    c = rollout(RuleAgent("greedy"), cfg, 5000, seed=10)
    assert c.J_emp != a.J_emp


def test_seed_splitting():
    s1 = cell_seed(0, "vi", 0, 0)
    assert np.random.default_rng(s1).random() == np.random.default_rng(cell_seed(0, "vi", 0, 0)).random()
    keys = {tuple(np.random.default_rng(cell_seed(m, a, i, r)).integers(0, 2**62, 2))
            for m in (0, 1) for a in ("vi", "sarsa") for i in (0, 1) for r in (0, 1)}
    assert len(keys) == 16


def _stationary_cases():
    arq = EnvConfig.arq([0.5, 0.2, 0.1], delta_max=30, lam=0.6)
    harq = EnvConfig.harq([[0.5, 0.25, 0.125, 0.0625]] * 2, delta_max=30)
    return [
        (arq, StationaryAgent(whittle_table(arq, WhittleContext.from_config(arq, eta=8.0)))),
        (harq, StationaryAgent(rvi(LagrangianProblem(harq, 3.0)).policy)),
    ]


@pytest.mark.parametrize("case", range(2))
def test_simulation_matches_exact(case):
    cfg, agent = _stationary_cases()[case]
    ev = evaluate_policy(agent.policy, cfg)
    J, C = [], []
    for seed in range(10):
        m = rollout(agent, cfg, 10**6, seed)
        J.append(m.J_emp)
        C.append(m.C_emp)
    assert np.median(J) == pytest.approx(ev.J, rel=0.02)
    assert np.median(C) == pytest.approx(ev.C, rel=0.02)


def test_spread_shrinks_with_horizon():
    cfg = EnvConfig.arq([0.5, 0.2, 0.1], delta_max=30)
    spread = []
    for T in (1000, 10_000, 100_000):
        J = [rollout(RuleAgent("whittle"), cfg, T, seed).J_emp for seed in range(10)]
        spread.append(np.std(J, ddof=1))
    assert spread[0] > spread[1] > spread[2]


def _small_preset(**kw):
    p = make_preset("fig3", [2, 3]).with_(T=2000, seeds=3)
    return p.with_(**kw)


def test_sweep_rows_and_reproducibility():
    p = _small_preset()
    a, b = sweep(p, master_seed=7), sweep(p, master_seed=7)
    assert a.to_csv() == b.to_csv()
    assert a.curves_csv() == b.curves_csv()
    rows = list(csv.reader(io.StringIO(a.to_csv())))
    assert tuple(rows[0]) == CSV_HEADER
    body = rows[1:]
    assert [(r[2], r[3]) for r in body] == [(m, ag) for m in ("2", "3") for ag in
                                           ("ucrl2-whittle", "whittle", "greedy", "round_robin",
                                            "lower_bound")]
    for r in body:
        assert int(r[4]) == (0 if r[3] == "lower_bound" else 3)
    assert sweep(p, master_seed=8).to_csv() != a.to_csv()
    curves = list(csv.reader(io.StringIO(a.curves_csv())))
    assert tuple(curves[0]) == CURVE_HEADER
    assert curves[1][3] == "1000"


def test_parallel_matches_serial():
    p = _small_preset(seeds=2)
    assert sweep(p, master_seed=3, workers=2).to_csv() == sweep(p, master_seed=3).to_csv()


def test_failed_cell_becomes_a_row():
    def boom(cfg):
        raise RuntimeError("planner exploded")

    p = ExperimentPreset("custom", "lambda", (0.5, 1.0), lambda lam: EnvConfig.arq([0.3], lam=lam),
                         (AgentSpec("bad", boom), AgentSpec("idle", lambda cfg: RuleAgent("idle"))),
                         T=50, seeds=2)
    res = sweep(p)
    assert len(res.failures) == 2
    rows = res.rows()
    assert rows[0][3] == "bad" and rows[0][4:] == (0, "nan", "nan", "nan", "nan")
    assert rows[1][3] == "idle" and rows[1][4] == 2
    with pytest.raises(ConfigError):
        sweep(p, workers=2)


def test_preset_contents():
    assert [a.id for a in make_preset("fig2").agents] == ["ucrl2-vi", "ucrl2-whittle", "lower_bound"]
    f4 = make_preset("fig4")
    assert {a.id for a in f4.agents} >= {"ucrl2-whittle", "sarsa", "vi"}
    assert f4.make_config(1.0).M == 3
    f5 = make_preset("fig5").make_config(1.0)
    assert f5.M == 2 and f5.protocol == "HARQ"
    assert np.allclose(f5.fail_matrix[0], [0.5, 0.25, 0.125, 0.0625])
    assert make_preset("fig3").sweep_values == (2, 3, 4, 5, 6)
    with pytest.raises(ConfigError, match="fig2"):
        make_preset("fig9")
    with pytest.raises(ConfigError):
        ExperimentPreset("x", "lambda", (1.0,), lambda v: None, (), T=0)


def test_first_within():
    t = np.array([1, 2, 3, 4, 5])
    J = np.array([20.0, 9.0, 12.0, 10.4, 10.2])
    assert first_within(t, J, 10.0, 0.05) == 4
    assert first_within(t, J, 10.0, 0.001) is None
    assert first_within(t, np.full(5, 10.0), 10.0, 0.01) == 1
