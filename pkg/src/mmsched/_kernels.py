"""Compiled event loops for the network simulator.

Both loops write into caller-owned output buffers and return early when
the buffers are full, so the Python driver can grow them and resume
from the saved state. Random numbers come from per-purpose numpy
Generators passed in a tuple.

Exact loop (time-change construction). Class ``i`` arrivals fire when the
internal clock ``int lambda_i(Y)`` reaches the next point of a unit-rate
Poisson process, services when ``int mu_i(Y) Tdot_i`` does. Between events
all rates are constant, so the next firing time of each clock is a
linear solve. Environment holding times come from their own stream.

Marginal loop (uniformisation). Candidate epochs arrive at a constant
rate ``B`` dominating every queue-event rate. At each candidate the
environment is drawn from the transition kernel over the elapsed time,
then the candidate is accepted as an arrival or service with the
corresponding rate over ``B``. Valid only for policies that ignore the
environment, because the environment path between candidates is never
realised.
"""
from __future__ import annotations

import numpy as np
from numba import njit

KIND_START = 0
KIND_ARRIVAL = 1
KIND_SERVICE = 2
KIND_ENV = 3
KIND_END = 4

# float state slots
F_TIME = 0
F_ENV_NEXT = 1
F_IDLE = 2
F_LAST_CAND = 3
# int state slots
I_ENV = 0
I_STARTED = 1
I_DONE = 2


@njit(cache=True, nogil=True)
def priority_decide(prio, q, y, t, out):
    """Full effort to the first nonempty class in row ``y`` of ``prio``."""
    for k in range(out.size):
        out[k] = 0.0
    for k in range(prio.shape[1]):
        c = prio[y, k]
        if q[c] > 0:
            out[c] = 1.0
            return


@njit(cache=True, nogil=True)
def _pick(cdf_row, u):
    n = cdf_row.size
    for j in range(n):
        if u < cdf_row[j]:
            return j
    return n - 1


@njit(cache=True, nogil=True)
def _write(pos, kind, which, t, y, q, alloc, busy, idle, ta, ts,
           o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts):
    o_time[pos] = t
    o_kind[pos] = kind
    o_cls[pos] = which
    o_env[pos] = y
    for i in range(q.size):
        o_q[pos, i] = q[i]
        o_alloc[pos, i] = alloc[i]
        o_busy[pos, i] = busy[i]
        if o_ta.shape[0] > 0:
            o_ta[pos, i] = ta[i]
            o_ts[pos, i] = ts[i]
    o_idle[pos] = idle


@njit(cache=True, nogil=True)
def exact_loop(decide, prio, lam, mu, env_rate, env_cdf, redecide_env, horizon, gens,
               fstate, istate, q, alloc, busy, ta, ts, pa, ps,
               o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts, pos):
    """Run the exact loop until the horizon or until the buffers fill.

    ``gens`` holds ``1 + 2K`` generators: environment, then one arrival
    and one service stream per class. ``env_rate[y]`` is the (already
    time-scaled) exit rate of state ``y``; ``env_cdf`` the cumulative
    jump-chain rows. Returns the next free buffer position.
    """
    K = q.size
    cap = o_time.size
    if istate[I_STARTED] == 0:
        y = istate[I_ENV]
        for i in range(K):
            pa[i] = gens[1 + i].standard_exponential()
            ps[i] = gens[1 + K + i].standard_exponential()
        if env_rate[y] > 0:
            fstate[F_ENV_NEXT] = gens[0].standard_exponential() / env_rate[y]
        else:
            fstate[F_ENV_NEXT] = np.inf
        decide(prio, q, y, 0.0, alloc)
        if pos >= cap:
            return pos
        _write(pos, KIND_START, -1, 0.0, y, q, alloc, busy, fstate[F_IDLE], ta, ts,
               o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts)
        pos += 1
        istate[I_STARTED] = 1
    while istate[I_DONE] == 0:
        if pos >= cap:
            return pos
        t = fstate[F_TIME]
        y = istate[I_ENV]
        best = fstate[F_ENV_NEXT]
        kind = KIND_ENV
        which = -1
        for i in range(K):
            r = lam[y, i]
            if r > 0.0:
                cand = t + (pa[i] - ta[i]) / r
                if cand < best:
                    best = cand
                    kind = KIND_ARRIVAL
                    which = i
        for i in range(K):
            r = mu[y, i] * alloc[i]
            if r > 0.0:
                cand = t + (ps[i] - ts[i]) / r
                if cand < best:
                    best = cand
                    kind = KIND_SERVICE
                    which = i
        if best > horizon:
            best = horizon
            kind = KIND_END
            which = -1
        dt = best - t
        used = 0.0
        for i in range(K):
            ta[i] += lam[y, i] * dt
            ts[i] += mu[y, i] * alloc[i] * dt
            busy[i] += alloc[i] * dt
            used += alloc[i]
        fstate[F_IDLE] += (1.0 - used) * dt
        fstate[F_TIME] = best
        if kind == KIND_ARRIVAL:
            ta[which] = pa[which]
            pa[which] += gens[1 + which].standard_exponential()
            q[which] += 1
        elif kind == KIND_SERVICE:
            ts[which] = ps[which]
            ps[which] += gens[1 + K + which].standard_exponential()
            q[which] -= 1
        elif kind == KIND_ENV:
            y = _pick(env_cdf[y], gens[0].random())
            istate[I_ENV] = y
            if env_rate[y] > 0:
                fstate[F_ENV_NEXT] = best + gens[0].standard_exponential() / env_rate[y]
            else:
                fstate[F_ENV_NEXT] = np.inf
        else:
            istate[I_DONE] = 1
        if kind == KIND_ARRIVAL or kind == KIND_SERVICE or (kind == KIND_ENV and redecide_env):
            decide(prio, q, y, best, alloc)
        _write(pos, kind, which, best, y, q, alloc, busy, fstate[F_IDLE], ta, ts,
               o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts)
        pos += 1
    return pos


@njit(cache=True, nogil=True)
def _transition_row(vecs, vals, inv, y, s, out):
    # row y of expm(G s) = V diag(exp(vals s)) V^{-1}, clipped to a distribution
    L = out.size
    total = 0.0
    for j in range(L):
        acc = 0.0 + 0.0j
        for k in range(L):
            acc += vecs[y, k] * np.exp(vals[k] * s) * inv[k, j]
        v = acc.real
        if v < 0.0:
            v = 0.0
        out[j] = v
        total += v
    for j in range(L):
        out[j] /= total


@njit(cache=True, nogil=True)
def marginal_loop(decide, prio, lam, mu, vecs, vals, inv, bound, horizon, gens,
                  fstate, istate, q, alloc, busy, row,
                  o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts, pos):
    """Uniformised loop; ``gens`` = (candidates, environment, selection).

    ``vals``, ``vecs``, ``inv`` diagonalise the time-scaled generator.
    Only accepted queue events are written; ``o_ta``/``o_ts`` must be
    zero-length.
    """
    K = q.size
    L = row.size
    cap = o_time.size
    if istate[I_STARTED] == 0:
        decide(prio, q, istate[I_ENV], 0.0, alloc)
        if pos >= cap:
            return pos
        _write(pos, KIND_START, -1, 0.0, istate[I_ENV], q, alloc, busy, fstate[F_IDLE], alloc, alloc,
               o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts)
        pos += 1
        istate[I_STARTED] = 1
    while istate[I_DONE] == 0:
        if pos >= cap:
            return pos
        # fstate[F_TIME] is the last accepted event, F_LAST_CAND the last candidate
        t_acc = fstate[F_TIME]
        tc = fstate[F_LAST_CAND] + gens[0].standard_exponential() / bound
        if tc > horizon:
            tc = horizon
        dt = tc - t_acc
        if L > 1:
            _transition_row(vecs, vals, inv, istate[I_ENV], tc - fstate[F_LAST_CAND], row)
            istate[I_ENV] = _pick(np.cumsum(row), gens[1].random())
        fstate[F_LAST_CAND] = tc
        y = istate[I_ENV]
        if tc >= horizon:
            kind = KIND_END
            which = -1
        else:
            u = gens[2].random() * bound
            kind = -1
            which = -1
            acc = 0.0
            for i in range(K):
                acc += lam[y, i]
                if u < acc:
                    kind = KIND_ARRIVAL
                    which = i
                    break
            if kind < 0:
                for i in range(K):
                    acc += mu[y, i] * alloc[i]
                    if u < acc:
                        kind = KIND_SERVICE
                        which = i
                        break
            if kind < 0:
                continue
        used = 0.0
        for i in range(K):
            busy[i] += alloc[i] * dt
            used += alloc[i]
        fstate[F_IDLE] += (1.0 - used) * dt
        fstate[F_TIME] = tc
        if kind == KIND_ARRIVAL:
            q[which] += 1
        elif kind == KIND_SERVICE:
            q[which] -= 1
        else:
            istate[I_DONE] = 1
        if kind != KIND_END:
            decide(prio, q, y, tc, alloc)
        _write(pos, kind, which, tc, y, q, alloc, busy, fstate[F_IDLE], alloc, alloc,
               o_time, o_kind, o_cls, o_env, o_q, o_alloc, o_busy, o_idle, o_ta, o_ts)
        pos += 1
    return pos
