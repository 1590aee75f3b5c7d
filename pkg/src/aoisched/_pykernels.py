"""Pure-Python/numpy reference kernels.

Same signatures and semantics as the compiled ``_ckernels`` module.  Every
random decision consumes a pre-drawn uniform from ``u`` so both backends
produce identical trajectories for identical inputs.
"""
import numpy as np

TABLE, WHITTLE, GREEDY, ROUND_ROBIN, IDLE_RULE = 0, 1, 2, 3, 4

OK = 0
ERR_INFEASIBLE = 1

NO_FEEDBACK, ACK, NACK = -1, 0, 1

BACKEND = "python"


def bellman_sweep(h, cost, eta, idle_next, new_ok, new_bad, p_new_fail,
                  retx_ok, retx_bad, p_retx_fail, retx_mask, th_out, act_out):
    """One synchronous Bellman backup of the Lagrangian MDP.

    Writes ``min_a Q(s, a)`` into ``th_out`` and the first minimising action
    code into ``act_out``.
    """
    M = new_ok.shape[0]
    best = cost + h[idle_next]
    act = np.zeros(best.shape[0], dtype=np.int64)
    for j in range(M):
        pf = p_new_fail[j]
        q = cost + eta + (1.0 - pf) * h[new_ok[j]] + pf * h[new_bad[j]]
        better = q < best
        best = np.where(better, q, best)
        act[better] = 1 + j
    for j in range(M):
        mask = retx_mask[j].astype(bool)
        if not mask.any():
            continue
        pf = p_retx_fail[j]
        q = cost + eta + (1.0 - pf) * h[retx_ok[j]] + pf * h[retx_bad[j]]
        better = mask & (q < best)
        best = np.where(better, q, best)
        act[better] = 1 + M + j
    th_out[:] = best
    act_out[:] = act


def _digest(ages, retx, strides, D, R):
    idx = 0
    for j in range(len(ages)):
        a = ages[j] if ages[j] < D else D
        idx += ((a - 1) * (R + 1) + retx[j]) * strides[j]
    return idx


def _apply(ages, retx, a, u, fail, r_cap):
    """Advance the uncapped state in place; returns the feedback code."""
    M = len(ages)
    for i in range(M):
        ages[i] += 1
    if a == 0:
        return NO_FEEDBACK
    if a <= M:
        j = a - 1
        if u < fail[j, 0]:
            retx[j] = 1 if r_cap >= 1 else 0
            return NACK
        ages[j] = 1
        retx[j] = 0
        return ACK
    j = a - 1 - M
    r = retx[j]
    if u < fail[j, r]:
        retx[j] = r + 1 if r + 1 < r_cap else r_cap
        return NACK
    ages[j] = r
    retx[j] = 0
    return ACK


def _feasible(ages, retx, a, r_cap):
    M = len(ages)
    if a < 0 or a > 2 * M:
        return False
    if a <= M:
        return True
    r = retx[a - 1 - M]
    return 1 <= r < r_cap


def _rule_action(kind, ages, t, weights, index_p, eta):
    M = len(ages)
    if kind == IDLE_RULE:
        return 0
    if kind == ROUND_ROBIN:
        return 1 + t % M
    best_j, best_v = 0, -1.0
    for j in range(M):
        if kind == GREEDY:
            v = weights[j] * ages[j]
        else:
            p = index_p[j]
            d = ages[j]
            v = weights[j] * (1.0 - p) * d * (d + (1.0 + p) / (1.0 - p))
        if v > best_v:
            best_v, best_j = v, j
    if kind == WHITTLE and not best_v > eta:
        return 0
    return 1 + best_j


def run_segment(kind, ages, retx, t0, n_steps,
                fail, weights, r_cap, strides, D,
                table_a, table_b, mu, index_p, eta,
                N, E, V, N_start, stop_on_double,
                u, out_cost, out_action, out_feedback, out_state):
    """Roll the world forward for up to ``n_steps`` slots.

    ``ages``/``retx`` are updated in place.  Counters ``N``, ``E``, ``V`` have
    shape ``(M, r_cap + 1)`` and are updated when non-empty; with
    ``stop_on_double`` the segment ends right after the slot where some
    ``V[j, r]`` reaches ``max(1, N_start[j, r])``.

    Returns ``(steps, tx_count, cap_hit, status)``.
    """
    M = len(ages)
    R = r_cap
    track = N.shape[0] > 0
    log = out_cost.shape[0] > 0
    cap_hit = 0
    tx_count = 0
    steps = 0
    status = OK
    for k in range(n_steps):
        for j in range(M):
            if ages[j] > D:
                cap_hit = 1
        s = _digest(ages, retx, strides, D, R)
        if kind == TABLE:
            a = table_a[s] if (mu >= 1.0 or u[k, 1] < mu) else table_b[s]
        else:
            a = _rule_action(kind, ages, t0 + k, weights, index_p, eta)
        if not _feasible(ages, retx, a, R):
            status = ERR_INFEASIBLE
            if log:
                out_action[k] = a
                out_state[k] = s
            break
        cost = 0.0
        for j in range(M):
            cost += weights[j] * ages[j]
        level = 0
        user = -1
        if 1 <= a <= M:
            user = a - 1
        elif a > M:
            user = a - 1 - M
            level = retx[user]
        fb = _apply(ages, retx, a, u[k, 0], fail, R)
        if a != 0:
            tx_count += 1
        if log:
            out_cost[k] = cost
            out_action[k] = a
            out_feedback[k] = fb
            out_state[k] = s
        steps += 1
        if track and user >= 0:
            N[user, level] += 1
            V[user, level] += 1
            if fb == NACK:
                E[user, level] += 1
            if stop_on_double and V[user, level] >= max(1, N_start[user, level]):
                break
    return steps, tx_count, cap_hit, status


def _choose(Q, s, ages, retx, r_cap, eps, u1, u2):
    """Epsilon-greedy over feasible actions; returns (action, greedy_flag)."""
    M = len(ages)
    n_feas = 1 + M
    for j in range(M):
        if 1 <= retx[j] < r_cap:
            n_feas += 1
    best_a, best_q = 0, Q[s, 0]
    for a in range(1, 2 * M + 1):
        if a > M:
            r = retx[a - 1 - M]
            if not (1 <= r < r_cap):
                continue
        if Q[s, a] < best_q:
            best_q, best_a = Q[s, a], a
    if u1 < eps:
        pick = int(u2 * n_feas)
        if pick >= n_feas:
            pick = n_feas - 1
        if pick <= M:
            a = pick
        else:
            c = M
            a = 0
            for j in range(M):
                if 1 <= retx[j] < r_cap:
                    c += 1
                    if c == pick:
                        a = 1 + M + j
                        break
        return a, a == best_a
    return best_a, True


def run_sarsa(ages, retx, t0, n_steps, fail, weights, r_cap, strides, D,
              Q, visits, params, state, u, out_cost, out_action, out_feedback, out_state):
    """Differential (average-cost) SARSA with epsilon-greedy exploration.

    ``params`` = ``[beta0, beta_ref, gamma, eps_start, eps_end, eps_anneal,
    alpha, lam, eta_period]``.  ``state`` = ``[rho, eta, tx_total,
    pending_action, pending_greedy]`` is read and written back so runs can be
    resumed; ``pending_action < 0`` starts from the greedy action.  ``u`` has
    three columns: transition, explore test, random action.
    Returns ``(steps, tx_count, cap_hit)``.
    """
    beta0, beta_ref, gamma, eps_start, eps_end, eps_anneal, alpha, lam, eta_period = params
    rho, eta, tx_total, pending = state[0], state[1], state[2], state[3]
    M = len(ages)
    R = r_cap
    eta_period = int(eta_period)
    log = out_cost.shape[0] > 0
    cap_hit = 0
    tx_count = 0

    def eps_at(t):
        frac = 1.0 - t / eps_anneal if eps_anneal > 0 else 0.0
        return eps_end + (eps_start - eps_end) * (frac if frac > 0.0 else 0.0)

    s = _digest(ages, retx, strides, D, R)
    if pending < 0:
        a, greedy = _choose(Q, s, ages, retx, R, 0.0, 1.0, 0.0)
    else:
        a, greedy = int(pending), state[4] > 0.5
    for k in range(n_steps):
        t = t0 + k
        for j in range(M):
            if ages[j] > D:
                cap_hit = 1
        cost = 0.0
        for j in range(M):
            cost += weights[j] * ages[j]
        tx = 1 if a != 0 else 0
        total = cost + eta * tx
        fb = _apply(ages, retx, a, u[k, 0], fail, R)
        if log:
            out_cost[k] = cost
            out_action[k] = a
            out_feedback[k] = fb
            out_state[k] = s
        s2 = _digest(ages, retx, strides, D, R)
        a2, greedy2 = _choose(Q, s2, ages, retx, R, eps_at(t + 1), u[k, 1], u[k, 2])
        visits[s, a] += 1
        beta = beta0 * beta_ref / (beta_ref + visits[s, a])
        Q[s, a] += beta * (total - rho + Q[s2, a2] - Q[s, a])
        if greedy:
            rho += gamma * (total - rho)
        tx_count += tx
        tx_total += tx
        if eta_period > 0 and (t + 1) % eta_period == 0:
            eta = eta + alpha * (tx_total / (t + 1) - lam)
            if eta < 0.0:
                eta = 0.0
        s, a, greedy = s2, a2, greedy2
    state[0] = rho
    state[1] = eta
    state[2] = tx_total
    state[3] = a
    state[4] = 1.0 if greedy else 0.0
    return n_steps, tx_count, cap_hit
