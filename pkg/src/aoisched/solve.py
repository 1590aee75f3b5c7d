"""Exact planning on the truncated constrained MDP.

The constrained problem is handled through its Lagrangian: for a multiplier
``eta`` the per-slot cost is ``sum_j w_j delta_j + eta * 1[transmit]``.
:func:`rvi` solves that average-cost MDP, :func:`evaluate_policy` computes the
exact long-run averages of any tabular (possibly randomised or periodic)
policy from its stationary distribution, :func:`dual_ascent` searches the
multiplier, and :func:`build_mixture` randomises between the two bracketing
deterministic policies so that the transmission budget is met.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from . import kernels
from .env import Action, ConfigError, EnvConfig, SystemState, TruncatedSpace, success_probs

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


class NotUnichainError(SolverError):
    pass


class DualAscentError(SolverError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class LagrangianProblem:
    """Average-cost MDP with per-slot cost ``age + eta * 1[transmit]``.

    ``fail`` overrides the configured error probabilities with an
    ``(M, r_cap + 1)`` matrix; learners plan with optimistic estimates this way.
    """

    config: EnvConfig
    eta: float = 0.0
    fail: np.ndarray | None = None

    def __post_init__(self):
        if not self.eta >= 0:
            raise ConfigError(f"Lagrange multiplier must be >= 0, got {self.eta}")
        if self.fail is not None:
            fail = np.ascontiguousarray(self.fail, dtype=float)
            if fail.shape != (self.config.M, self.config.r_cap + 1):
                raise ConfigError(f"fail matrix shape {fail.shape} does not match the config")
            if np.any(fail < 0) or np.any(fail > 1):
                raise ConfigError("error probabilities must lie in [0, 1]")
            object.__setattr__(self, "fail", fail)

    @property
    def fail_matrix(self) -> np.ndarray:
        return self.config.fail_matrix if self.fail is None else self.fail


# -- tabular policies ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TablePolicy:
    """Deterministic stationary policy: one action code per truncated grid state."""

    codes: np.ndarray

    def phases(self):
        return [[(1.0, self.codes)]]

    def action(self, s: SystemState, config: EnvConfig) -> Action:
        return Action.from_code(self.codes[TruncatedSpace.of(config).encode(s)], config.M)

    def digest(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.codes, dtype=np.int64).tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """Per-slot randomisation: ``pi_low`` with probability ``mu``, else ``pi_high``.

    ``pi_low`` comes from the smaller multiplier and transmits at least as
    often as ``pi_high``.
    """

    pi_low: TablePolicy
    pi_high: TablePolicy
    mu: float
    eta_low: float = float("nan")
    eta_high: float = float("nan")
    c_low: float = float("nan")
    c_high: float = float("nan")
    mu_linear: float = float("nan")
    clamped: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mixture weight must lie in [0, 1], got {self.mu}")

    def phases(self):
        return [[(self.mu, self.pi_low.codes), (1.0 - self.mu, self.pi_high.codes)]]


@dataclass(frozen=True, eq=False)
class PeriodicPolicy:
    """Time-varying policy that applies ``tables[t mod K]`` in slot ``t``."""

    tables: tuple[np.ndarray, ...]

    def phases(self):
        return [[(1.0, codes)] for codes in self.tables]


# -- relative value iteration ---------------------------------------------------

@dataclass(eq=False)
class SolveResult:
    config: EnvConfig
    eta: float
    h: np.ndarray
    gain: float
    policy: TablePolicy
    iterations: int
    bellman_residual: float
    avg_tx: float = float("nan")
    avg_age: float = float("nan")

    def action(self, s: SystemState) -> Action:
        return self.policy.action(s, self.config)

    def to_dict(self, include_policy: bool = False) -> dict:
        out = {
            "eta": self.eta,
            "gain": self.gain,
            "avg_age": self.avg_age,
            "avg_tx": self.avg_tx,
            "bellman_residual": self.bellman_residual,
            "iterations": self.iterations,
        }
        if include_policy:
            space = TruncatedSpace.of(self.config)
            ages, retx = space.coords
            M = self.config.M
            out["policy"] = [
                {"state": [int(v) for pair in zip(ages[i], retx[i]) for v in pair],
                 "action": str(Action.from_code(self.policy.codes[i], M))}
                for i in np.flatnonzero(space.valid)
            ]
        return out


@dataclass(frozen=True)
class _Model:
    space: TruncatedSpace
    cost: np.ndarray
    p_new_fail: np.ndarray
    p_retx_fail: np.ndarray
    retx_mask_u8: np.ndarray


def _model(config: EnvConfig, fail: np.ndarray) -> _Model:
    space = TruncatedSpace.of(config)
    ker = space.kernel
    cost = np.ascontiguousarray(config.weights @ ker.ages, dtype=float)
    p_new, p_retx = success_probs(space, fail)
    return _Model(space, cost, np.ascontiguousarray(p_new), np.ascontiguousarray(p_retx),
                  np.ascontiguousarray(ker.retx_mask, dtype=np.uint8))


def bellman_backup(model: _Model, h: np.ndarray, eta: float, th: np.ndarray, act: np.ndarray):
    k = model.space.kernel
    kernels.bellman_sweep(h, model.cost, float(eta), k.idle_next, k.new_ok, k.new_bad,
                          model.p_new_fail, k.retx_ok, k.retx_bad, model.p_retx_fail,
                          model.retx_mask_u8, th, act)


def rvi(problem: LagrangianProblem, tol: float = 1e-6, max_iter: int = 100_000,
        h0: np.ndarray | None = None, evaluate: bool = True, damping: float = 0.8,
        strict: bool = True) -> SolveResult:
    """Relative value iteration on the truncated Lagrangian MDP.

    Iterates the damped update ``h <- h + damping * (T h - h)``, renormalised
    so that ``h(s_0) = 0``.  The damping is the usual aperiodicity transform;
    it leaves the gain and the greedy policy unchanged.  Stops once the span of
    ``T h - h`` over valid states is at most ``tol``; the returned gain is the
    midpoint of that range, so the Bellman residual is at most ``tol / 2``.
    With ``strict=False`` hitting ``max_iter`` returns the last iterate
    instead of raising (planners only need the greedy policy).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    config = problem.config
    model = _model(config, problem.fail_matrix)
    space = model.space
    n = space.size
    valid = space.valid
    ref = space.initial_index()
    h = np.zeros(n) if h0 is None else np.array(h0, dtype=float)
    h -= h[ref]
    th = np.empty(n)
    act = np.empty(n, dtype=np.int64)
    span = math.inf
    for it in range(1, max_iter + 1):
        bellman_backup(model, h, problem.eta, th, act)
        diff = th - h
        dv = diff[valid]
        lo, hi = dv.min(), dv.max()
        span = hi - lo
        if span <= tol:
            break
        h += damping * (diff - diff[ref])
    else:
        if not strict:
            return _finish(problem, config, h, th, act, lo, hi, max_iter, evaluate)
        raise ConvergenceError(f"RVI did not converge in {max_iter} sweeps (span {span:.3g})", span)
    return _finish(problem, config, h, th, act, lo, hi, it, evaluate)


def _finish(problem, config, h, th, act, lo, hi, it, evaluate) -> SolveResult:
    valid = TruncatedSpace.of(config).valid
    gain = 0.5 * (lo + hi)
    residual = float(np.max(np.abs(h[valid] + gain - th[valid])))
    result = SolveResult(config, float(problem.eta), h, float(gain), TablePolicy(act.copy()),
                         it, residual)
    if evaluate:
        ev = evaluate_policy(result.policy, config, fail=problem.fail)
        result.avg_tx, result.avg_age = ev.C, ev.J
    return result


def bellman_residual(result: SolveResult, fail: np.ndarray | None = None) -> float:
    """Recompute ``max_s |h(s) + gain - min_a Q(s, a)|`` over valid states."""
    config = result.config
    model = _model(config, config.fail_matrix if fail is None else fail)
    th = np.empty(model.space.size)
    act = np.empty(model.space.size, dtype=np.int64)
    bellman_backup(model, result.h, result.eta, th, act)
    v = model.space.valid
    return float(np.max(np.abs(result.h[v] + result.gain - th[v])))


def q_values(result: SolveResult) -> np.ndarray:
    """``(A, n)`` array of Lagrangian Q-values, ``inf`` where infeasible."""
    config = result.config
    model = _model(config, config.fail_matrix)
    k = model.space.kernel
    h, eta, c = result.h, result.eta, model.cost
    M = config.M
    q = np.full((2 * M + 1, model.space.size), np.inf)
    q[0] = c + h[k.idle_next]
    for j in range(M):
        pf = model.p_new_fail[j]
        q[1 + j] = c + eta + (1 - pf) * h[k.new_ok[j]] + pf * h[k.new_bad[j]]
        pr = model.p_retx_fail[j]
        qr = c + eta + (1 - pr) * h[k.retx_ok[j]] + pr * h[k.retx_bad[j]]
        q[1 + M + j] = np.where(k.retx_mask[j], qr, np.inf)
    return q


# -- exact policy evaluation ----------------------------------------------------

class Evaluation(NamedTuple):
    J: float
    C: float
    n_states: int = 0


def _outcome_tables(space: TruncatedSpace, fail: np.ndarray):
    """Successor/probability tables indexed by ``[action_code, state]``."""
    k = space.kernel
    M, n = space.M, space.size
    p_new, p_retx = success_probs(space, fail)
    A = 2 * M + 1
    ok = np.empty((A, n), dtype=np.int64)
    bad = np.empty((A, n), dtype=np.int64)
    pf = np.zeros((A, n))
    feas = np.ones((A, n), dtype=bool)
    ok[0] = bad[0] = k.idle_next
    for j in range(M):
        ok[1 + j], bad[1 + j], pf[1 + j] = k.new_ok[j], k.new_bad[j], p_new[j]
        ok[1 + M + j], bad[1 + M + j], pf[1 + M + j] = k.retx_ok[j], k.retx_bad[j], p_retx[j]
        feas[1 + M + j] = k.retx_mask[j]
    return ok, bad, pf, feas


def _stationary(P: sp.csr_matrix, direct_limit: int) -> np.ndarray:
    m = P.shape[0]
    if m == 1:
        return np.ones(1)
    if m <= direct_limit:
        A = (P.T - sp.identity(m, format="csr")).tolil()
        A[m - 1, :] = np.ones(m)
        b = np.zeros(m)
        b[m - 1] = 1.0
        pi = spsolve(A.tocsc(), b)
    else:
        lazy = (0.5 * (P + sp.identity(m, format="csr"))).T.tocsr()
        pi = np.full(m, 1.0 / m)
        for _ in range(1_000_000):
            nxt = lazy @ pi
            if np.abs(nxt - pi).sum() < 1e-13:
                pi = nxt
                break
            pi = nxt
    pi = np.where(np.abs(pi) < 1e-15, 0.0, pi)
    if np.any(pi < -1e-9):
        raise SolverError("stationary distribution has negative mass; chain is ill-conditioned")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def evaluate_policy(policy, config: EnvConfig, fail: np.ndarray | None = None,
                    direct_limit: int = 50_000) -> Evaluation:
    """Exact long-run average weighted age ``J`` and transmission rate ``C``.

    The induced chain is built on the states reachable from ``s_0`` (paired
    with the phase ``t mod K`` for periodic policies) and its stationary
    distribution is computed on the unique closed class.
    """
    space = TruncatedSpace.of(config)
    fail = config.fail_matrix if fail is None else np.asarray(fail, dtype=float)
    ok, bad, pf, feas = _outcome_tables(space, fail)
    phases = policy.phases()
    K = len(phases)
    n = space.size
    comps = [[(float(w), np.asarray(codes, dtype=np.int64)) for w, codes in ph if w > 0]
             for ph in phases]

    start = space.initial_index() * K
    seen = np.zeros(n * K, dtype=bool)
    seen[start] = True
    frontier = np.array([start], dtype=np.int64)
    rows, cols, vals = [], [], []
    while frontier.size:
        st, ph = np.divmod(frontier, K)
        nph = (ph + 1) % K
        succ = []
        for k in range(K):
            sel = ph == k
            if not sel.any():
                continue
            s_k = st[sel]
            src = frontier[sel]
            nxt_ph = nph[sel]
            for w, codes in comps[k]:
                a = codes[s_k]
                if not np.all(feas[a, s_k]):
                    bad_s = s_k[~feas[a, s_k]][0]
                    raise SolverError(
                        f"policy picks infeasible action {Action.from_code(codes[bad_s], config.M)} "
                        f"in state {space.decode(bad_s)}")
                p_bad = pf[a, s_k]
                for nxt, prob in ((ok[a, s_k], 1.0 - p_bad), (bad[a, s_k], p_bad)):
                    keep = prob > 0
                    dst = nxt[keep] * K + nxt_ph[keep]
                    rows.append(src[keep])
                    cols.append(dst)
                    vals.append(w * prob[keep])
                    succ.append(dst)
        succ = np.unique(np.concatenate(succ)) if succ else np.empty(0, dtype=np.int64)
        new = succ[~seen[succ]]
        seen[new] = True
        frontier = new

    reach = np.flatnonzero(seen)
    m = reach.size
    r = np.searchsorted(reach, np.concatenate(rows))
    c = np.searchsorted(reach, np.concatenate(cols))
    P = sp.csr_matrix((np.concatenate(vals), (r, c)), shape=(m, m))
    P.sum_duplicates()

    n_comp, labels = csgraph.connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    leaky = np.zeros(n_comp, dtype=bool)
    leaky[labels[coo.row[leaving]]] = True
    closed = np.flatnonzero(~leaky)
    if closed.size != 1:
        raise NotUnichainError(f"induced chain has {closed.size} closed classes reachable from s_0")
    members = np.flatnonzero(labels == closed[0])
    pi = _stationary(P[members][:, members].tocsr(), direct_limit)

    states = reach[members] // K
    phase = reach[members] % K
    age = config.weights @ space.kernel.ages[:, states]
    tx = np.zeros(members.size)
    for k in range(K):
        sel = phase == k
        for w, codes in comps[k]:
            tx[sel] += w * (codes[states[sel]] != 0)
    return Evaluation(float(pi @ age), float(pi @ tx), int(m))


# -- constrained problem --------------------------------------------------------

class TracePoint(NamedTuple):
    eta: float
    C: float
    gain: float
    J: float


@dataclass
class DualAscentResult:
    eta_star: float
    trace: list[TracePoint]
    solutions: dict = field(default_factory=dict, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.trace)


class _SolveCache:
    """Memoises ``rvi`` by multiplier and warm-starts from the nearest solved one."""

    def __init__(self, config: EnvConfig, tol: float, max_iter: int):
        self.config, self.tol, self.max_iter = config, tol, max_iter
        self.results: dict[float, SolveResult] = {}
        self._evals: dict[str, Evaluation] = {}

    def __call__(self, eta: float) -> SolveResult:
        eta = float(eta)
        if eta in self.results:
            return self.results[eta]
        h0 = None
        if self.results:
            near = min(self.results, key=lambda e: abs(e - eta))
            h0 = self.results[near].h
        res = rvi(LagrangianProblem(self.config, eta), self.tol, self.max_iter, h0=h0,
                  evaluate=False)
        key = res.policy.digest()
        if key not in self._evals:
            self._evals[key] = evaluate_policy(res.policy, self.config)
        ev = self._evals[key]
        res.avg_tx, res.avg_age = ev.C, ev.J
        self.results[eta] = res
        return res


def dual_ascent(config: EnvConfig, eta0: float = 0.0, eps: float = 1e-3, max_iter: int = 500,
                tol: float = 1e-6, rvi_max_iter: int = 100_000, step_scale: float = 1.0,
                cache: _SolveCache | None = None) -> DualAscentResult:
    """Multiplier search ``eta <- max(0, eta + (C_eta - lambda) / sqrt(m))``.

    ``C_eta`` is the exact transmission rate of the RVI policy at ``eta``.
    Stops when an update moves ``eta`` by less than ``eps``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    solve = cache or _SolveCache(config, tol, rvi_max_iter)
    eta = max(0.0, float(eta0))
    trace: list[TracePoint] = []
    for m in range(1, max_iter + 1):
        res = solve(eta)
        trace.append(TracePoint(eta, res.avg_tx, res.gain, res.avg_age))
        nxt = max(0.0, eta + step_scale * (res.avg_tx - config.lam) / math.sqrt(m))
        if abs(nxt - eta) < eps:
            return DualAscentResult(nxt, trace, solve.results)
        eta = nxt
    raise DualAscentError(f"dual ascent did not settle within {max_iter} iterations "
                          f"(last eta {eta:.6g})", trace)


def mixture_weight(c_low: float, c_high: float, lam: float) -> tuple[float, bool]:
    """Solve ``mu * c_low + (1 - mu) * c_high = lam``; returns ``(mu, clamped)``."""
    if c_low == c_high:
        return 1.0, False
    mu = (lam - c_high) / (c_low - c_high)
    clamped = not 0.0 <= mu <= 1.0
    return min(1.0, max(0.0, mu)), clamped


def default_xi(eta_star: float) -> float:
    return 0.05 * max(eta_star, 1.0)


def build_mixture(config: EnvConfig, eta_star: float, xi: float | None = None,
                  refine: bool = True, refine_tol: float = 1e-4,
                  solver=None) -> MixturePolicy:
    """Randomise between the RVI policies at ``eta_star -/+ xi``.

    The weight first solves the linear budget equation.  With ``refine`` it is
    then adjusted by bisection on the exact transmission rate of the
    randomised chain, which is not linear in the weight.
    """
    xi = default_xi(eta_star) if xi is None else xi
    if xi <= 0:
        raise ValueError("xi must be positive")
    solve = solver or _SolveCache(config, 1e-6, 100_000)
    eta_lo, eta_hi = max(0.0, eta_star - xi), eta_star + xi
    lo, hi = solve(eta_lo), solve(eta_hi)
    mu_lin, clamped = mixture_weight(lo.avg_tx, hi.avg_tx, config.lam)
    mu = mu_lin
    if refine and not clamped and lo.avg_tx != hi.avg_tx:
        mu = _refine_weight(config, lo.policy, hi.policy, mu_lin, refine_tol)
    return MixturePolicy(lo.policy, hi.policy, mu, eta_lo, eta_hi, lo.avg_tx, hi.avg_tx,
                         mu_lin, clamped)


def _refine_weight(config, low, high, mu0, tol, max_steps=40):
    lam = config.lam

    def rate(mu):
        return evaluate_policy(MixturePolicy(low, high, mu), config).C

    c0 = rate(mu0)
    if abs(c0 - lam) <= tol:
        return mu0
    a, b = (mu0, 1.0) if c0 < lam else (0.0, mu0)
    mid = mu0
    for _ in range(max_steps):
        mid = 0.5 * (a + b)
        c = rate(mid)
        if abs(c - lam) <= tol:
            break
        if c < lam:
            a = mid
        else:
            b = mid
    return mid


@dataclass
class CmdpSolution:
    eta_star: float
    mixture: MixturePolicy
    J: float
    C: float
    residual: float
    trace: list[TracePoint]
    eta0: float
    settled: bool = True

    def to_dict(self) -> dict:
        mx = self.mixture
        return {
            "eta_star": self.eta_star,
            "eta0": self.eta0,
            "mu": mx.mu,
            "mu_linear": mx.mu_linear,
            "eta_low": mx.eta_low,
            "eta_high": mx.eta_high,
            "C_low": mx.c_low,
            "C_high": mx.c_high,
            "clamped": mx.clamped,
            "J": self.J,
            "C": self.C,
            "bellman_residual": self.residual,
            "dual_iterations": len(self.trace),
            "dual_settled": self.settled,
        }


def eta_guess(config: EnvConfig) -> float:
    """Slope of the ARQ lower bound in the budget, ``(sum_j sqrt(w_j/(1-p_j)))^2 / (2 lambda^2)``.

    A cheap first guess of the multiplier; for HARQ ``p_j = g_j(0)`` is used.
    """
    p = np.minimum(config.fail_matrix[:, 0], 1 - 1e-9)
    total = np.sum(np.sqrt(config.weights / (1 - p)))
    return float(total**2 / (2 * config.lam**2))


def bracket_eta(config: EnvConfig, solve, tol: float = 0.05, eta_max: float = 1e7) -> float:
    """Locate the multiplier where ``C_eta`` crosses the budget by bisection.

    Relies on ``C_eta`` being non-increasing in ``eta``.  Used to pick the
    starting point of the dual ascent.
    """
    lam = config.lam
    if solve(0.0).avg_tx <= lam:
        return 0.0
    guess = max(eta_guess(config), 1.0)
    if solve(guess).avg_tx > lam:
        lo, hi = guess, guess * 1.5
        while solve(hi).avg_tx > lam:
            lo, hi = hi, hi * 1.5
            if hi > eta_max:
                raise SolverError("could not bracket the multiplier; budget may be infeasible")
    else:
        lo, hi = guess / 1.5, guess
        while lo > 1e-3 and solve(lo).avg_tx <= lam:
            lo, hi = lo / 1.5, lo
        if lo <= 1e-3:
            lo = 0.0
    while hi - lo > tol * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if solve(mid).avg_tx > lam:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_cmdp(config: EnvConfig, tol: float = 1e-6, max_iter: int = 100_000,
               eta0: float | str = "auto", eps: float = 1e-3, xi: float | None = None,
               dual_max_iter: int = 500, refine: bool = True) -> CmdpSolution:
    """Full pipeline: dual ascent, mixture construction, exact evaluation."""
    solve = _SolveCache(config, tol, max_iter)
    start = bracket_eta(config, solve) if eta0 == "auto" else float(eta0)
    settled = True
    try:
        da = dual_ascent(config, start, eps, dual_max_iter, tol, max_iter, cache=solve)
    except DualAscentError as exc:
        # C_eta jumps across lambda, so the iterates oscillate around the jump
        # with 1/sqrt(m) steps; a bracket narrower than xi still centres the mixture
        mid = trace_bracket(exc.trace, config.lam, xi)
        if mid is None:
            raise
        log.warning("%s; using the bracket midpoint %.6g", exc, mid)
        da, settled = DualAscentResult(mid, exc.trace, solve.results), False
    mixture = build_mixture(config, da.eta_star, xi, refine=refine, solver=solve)
    ev = evaluate_policy(mixture, config)
    residual = max(solve(mixture.eta_low).bellman_residual,
                   solve(mixture.eta_high).bellman_residual)
    return CmdpSolution(da.eta_star, mixture, ev.J, ev.C, residual, da.trace, start, settled)


def trace_bracket(trace: Sequence[TracePoint], lam: float, xi: float | None = None) -> float | None:
    """Midpoint of the tightest ``[eta_over, eta_under]`` pair in a trace, if narrower than ``xi``.

    ``eta_over`` is the largest multiplier with ``C > lam`` and ``eta_under``
    the smallest with ``C <= lam``.
    """
    over = [p.eta for p in trace if p.C > lam]
    under = [p.eta for p in trace if p.C <= lam]
    if not over or not under:
        return None
    lo, hi = max(over), min(under)
    if not lo < hi:
        return None
    mid = 0.5 * (lo + hi)
    width = default_xi(mid) if xi is None else xi
    return mid if hi - lo <= width else None


def policy_from_codes(codes: Sequence[int]) -> TablePolicy:
    return TablePolicy(np.asarray(codes, dtype=np.int64))
