"""Independent reference computations used by the tests.

Built only on ``env.transition_distribution`` and dense numpy linear algebra,
so they share no code with the solver's sparse chain construction.
"""
from fractions import Fraction

import numpy as np

from aoisched.env import Action, TruncatedSpace


def dense_chain(cfg, codes, eta):
    """Dense transition matrix and per-state cost ``w . delta + eta 1[a != idle]``."""
    space = TruncatedSpace.of(cfg)
    n = space.size
    P = np.zeros((n, n))
    cost = np.zeros(n)
    for idx in np.flatnonzero(space.valid):
        s = space.decode(idx)
        a = Action.from_code(int(codes[idx]), cfg.M)
        for nxt, p in _dist(s, a, cfg):
            P[idx, space.encode(nxt)] += p
        cost[idx] = float(np.dot(cfg.weights, s.ages)) + eta * a.transmits
    for idx in np.flatnonzero(~space.valid):
        P[idx, idx] = 1.0
    return P, cost


def _dist(s, a, cfg):
    from aoisched.env import transition_distribution
    return transition_distribution(s, a, cfg, cap=cfg.delta_max)


def cesaro_gain(P, cost, start, squarings=80):
    """Average cost from ``start`` via the limit of the lazy chain ``((I + P) / 2)^(2^k)``.

    The lazy chain has the same Cesaro limit as ``P`` and is aperiodic, so
    repeated squaring converges to the limiting matrix.
    """
    L = 0.5 * (np.eye(P.shape[0]) + P)
    for _ in range(squarings):
        L = L @ L
        L /= L.sum(axis=1, keepdims=True)  # keep rounding drift from compounding
    return float(L[start] @ cost)


def lower_bound_exact(p, w, lam):
    """Closed-form ARQ bound in exact rational arithmetic except for the square roots.

    Coded from the formula independently of ``aoisched.policy``: the argmin
    user is found with Fractions, the square-root sum with ``Fraction``
    inputs converted at the last moment.
    """
    p = [Fraction(x).limit_denominator(10**9) for x in p]
    w = [Fraction(x).limit_denominator(10**9) for x in w]
    lam = Fraction(lam).limit_denominator(10**9)
    pen = [wj * pj / (2 * (1 - pj)) for pj, wj in zip(p, w)]
    k = min(range(len(p)), key=lambda j: (pen[j], j))
    root_sum = sum(np.sqrt(float(wj / (1 - pj))) for pj, wj in zip(p, w))
    return root_sum**2 / (2 * float(lam)) + float(lam * pen[k]) + float(sum(w) / 2), k
