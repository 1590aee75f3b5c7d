# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; must stay step-for-step identical to ``_pykernels``."""
import numpy as np

cdef enum:
    TABLE = 0
    WHITTLE = 1
    GREEDY = 2
    ROUND_ROBIN = 3
    IDLE_RULE = 4

cdef enum:
    NO_FEEDBACK = -1
    ACK = 0
    NACK = 1

BACKEND = "cython"


def bellman_sweep(const double[::1] h, const double[::1] cost, double eta,
                  const long long[::1] idle_next,
                  const long long[:, ::1] new_ok, const long long[:, ::1] new_bad,
                  const double[::1] p_new_fail,
                  const long long[:, ::1] retx_ok, const long long[:, ::1] retx_bad,
                  const double[:, ::1] p_retx_fail, const unsigned char[:, ::1] retx_mask,
                  double[::1] th_out, long long[::1] act_out):
    cdef Py_ssize_t n = h.shape[0]
    cdef Py_ssize_t M = new_ok.shape[0]
    cdef Py_ssize_t s, j
    cdef double best, q, pf, c
    cdef long long act
    with nogil:
        for s in range(n):
            c = cost[s]
            best = c + h[idle_next[s]]
            act = 0
            for j in range(M):
                pf = p_new_fail[j]
                q = c + eta + (1.0 - pf) * h[new_ok[j, s]] + pf * h[new_bad[j, s]]
                if q < best:
                    best = q
                    act = 1 + j
            for j in range(M):
                if retx_mask[j, s]:
                    pf = p_retx_fail[j, s]
                    q = c + eta + (1.0 - pf) * h[retx_ok[j, s]] + pf * h[retx_bad[j, s]]
                    if q < best:
                        best = q
                        act = 1 + M + j
            th_out[s] = best
            act_out[s] = act


cdef inline long long _digest(long long[::1] ages, long long[::1] retx,
                              const long long[::1] strides, long long D, long long R) noexcept nogil:
    cdef long long idx = 0
    cdef long long a
    cdef Py_ssize_t j
    for j in range(ages.shape[0]):
        a = ages[j] if ages[j] < D else D
        idx += ((a - 1) * (R + 1) + retx[j]) * strides[j]
    return idx


cdef inline int _apply(long long[::1] ages, long long[::1] retx, long long a, double u,
                       const double[:, ::1] fail, long long r_cap) noexcept nogil:
    cdef Py_ssize_t M = ages.shape[0]
    cdef Py_ssize_t i, j
    cdef long long r
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


cdef inline bint _feasible(long long[::1] retx, long long a, long long r_cap) noexcept nogil:
    cdef Py_ssize_t M = retx.shape[0]
    cdef long long r
    if a < 0 or a > 2 * M:
        return False
    if a <= M:
        return True
    r = retx[a - 1 - M]
    return 1 <= r < r_cap


cdef inline long long _rule_action(int kind, long long[::1] ages, long long t,
                                   const double[::1] weights, const double[::1] index_p,
                                   double eta) noexcept nogil:
    cdef Py_ssize_t M = ages.shape[0]
    cdef Py_ssize_t j
    cdef Py_ssize_t best_j = 0
    cdef double best_v = -1.0
    cdef double v, p, d
    if kind == IDLE_RULE:
        return 0
    if kind == ROUND_ROBIN:
        return 1 + t % M
    for j in range(M):
        if kind == GREEDY:
            v = weights[j] * ages[j]
        else:
            p = index_p[j]
            d = <double> ages[j]
            v = weights[j] * (1.0 - p) * d * (d + (1.0 + p) / (1.0 - p))
        if v > best_v:
            best_v = v
            best_j = j
    if kind == WHITTLE and not best_v > eta:
        return 0
    return 1 + best_j


def run_segment(int kind, long long[::1] ages, long long[::1] retx, long long t0, long long n_steps,
                const double[:, ::1] fail, const double[::1] weights, long long r_cap,
                const long long[::1] strides, long long D,
                const long long[::1] table_a, const long long[::1] table_b, double mu,
                const double[::1] index_p, double eta,
                long long[:, ::1] N, long long[:, ::1] E, long long[:, ::1] V,
                const long long[:, ::1] N_start, bint stop_on_double,
                const double[:, ::1] u, double[::1] out_cost, signed char[::1] out_action,
                signed char[::1] out_feedback, long long[::1] out_state):
    cdef Py_ssize_t M = ages.shape[0]
    cdef bint track = N.shape[0] > 0
    cdef bint log = out_cost.shape[0] > 0
    cdef int cap_hit = 0
    cdef long long tx_count = 0
    cdef long long steps = 0
    cdef int status = 0
    cdef Py_ssize_t k, j
    cdef long long s, a, level, user, lim
    cdef double cost
    cdef int fb
    with nogil:
        for k in range(n_steps):
            for j in range(M):
                if ages[j] > D:
                    cap_hit = 1
            s = _digest(ages, retx, strides, D, r_cap)
            if kind == TABLE:
                if mu >= 1.0 or u[k, 1] < mu:
                    a = table_a[s]
                else:
                    a = table_b[s]
            else:
                a = _rule_action(kind, ages, t0 + k, weights, index_p, eta)
            if not _feasible(retx, a, r_cap):
                status = 1
                if log:
                    out_action[k] = <signed char> a
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
            fb = _apply(ages, retx, a, u[k, 0], fail, r_cap)
            if a != 0:
                tx_count += 1
            if log:
                out_cost[k] = cost
                out_action[k] = <signed char> a
                out_feedback[k] = <signed char> fb
                out_state[k] = s
            steps += 1
            if track and user >= 0:
                N[user, level] += 1
                V[user, level] += 1
                if fb == NACK:
                    E[user, level] += 1
                if stop_on_double:
                    lim = N_start[user, level]
                    if lim < 1:
                        lim = 1
                    if V[user, level] >= lim:
                        break
    return steps, tx_count, cap_hit, status


cdef inline long long _choose(double[:, ::1] Q, long long s, long long[::1] retx, long long r_cap,
                              double eps, double u1, double u2, bint* greedy) noexcept nogil:
    cdef Py_ssize_t M = retx.shape[0]
    cdef long long n_feas = 1 + M
    cdef Py_ssize_t j
    cdef long long a, best_a, pick, c, r
    cdef double best_q
    for j in range(M):
        if 1 <= retx[j] < r_cap:
            n_feas += 1
    best_a = 0
    best_q = Q[s, 0]
    for a in range(1, 2 * M + 1):
        if a > M:
            r = retx[a - 1 - M]
            if not (1 <= r < r_cap):
                continue
        if Q[s, a] < best_q:
            best_q = Q[s, a]
            best_a = a
    if u1 < eps:
        pick = <long long> (u2 * n_feas)
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
        greedy[0] = a == best_a
        return a
    greedy[0] = True
    return best_a


cdef inline double _eps_at(double t, double eps_start, double eps_end, double eps_anneal) noexcept nogil:
    cdef double frac = 1.0 - t / eps_anneal if eps_anneal > 0 else 0.0
    return eps_end + (eps_start - eps_end) * (frac if frac > 0.0 else 0.0)


def run_sarsa(long long[::1] ages, long long[::1] retx, long long t0, long long n_steps,
              const double[:, ::1] fail, const double[::1] weights, long long r_cap,
              const long long[::1] strides, long long D,
              double[:, ::1] Q, long long[:, ::1] visits, const double[::1] params, double[::1] state,
              const double[:, ::1] u, double[::1] out_cost, signed char[::1] out_action,
              signed char[::1] out_feedback, long long[::1] out_state):
    cdef double beta0 = params[0], beta_ref = params[1], gamma = params[2]
    cdef double eps_start = params[3], eps_end = params[4], eps_anneal = params[5]
    cdef double alpha = params[6], lam = params[7]
    cdef long long eta_period = <long long> params[8]
    cdef double rho = state[0], eta = state[1], tx_total = state[2]
    cdef long long pending = <long long> state[3]
    cdef Py_ssize_t M = ages.shape[0]
    cdef bint log = out_cost.shape[0] > 0
    cdef int cap_hit = 0
    cdef long long tx_count = 0
    cdef Py_ssize_t k, j
    cdef long long t, s, s2, a, a2, tx
    cdef double cost, total, beta
    cdef bint greedy, greedy2
    cdef int fb
    with nogil:
        s = _digest(ages, retx, strides, D, r_cap)
        if pending < 0:
            a = _choose(Q, s, retx, r_cap, 0.0, 1.0, 0.0, &greedy)
        else:
            a = pending
            greedy = state[4] > 0.5
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
            fb = _apply(ages, retx, a, u[k, 0], fail, r_cap)
            if log:
                out_cost[k] = cost
                out_action[k] = <signed char> a
                out_feedback[k] = <signed char> fb
                out_state[k] = s
            s2 = _digest(ages, retx, strides, D, r_cap)
            a2 = _choose(Q, s2, retx, r_cap, _eps_at(<double> (t + 1), eps_start, eps_end, eps_anneal),
                         u[k, 1], u[k, 2], &greedy2)
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
            s = s2
            a = a2
            greedy = greedy2
    state[0] = rho
    state[1] = eta
    state[2] = tx_total
    state[3] = a
    state[4] = 1.0 if greedy else 0.0
    return n_steps, tx_count, cap_hit
