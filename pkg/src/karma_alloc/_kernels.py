"""Simulation hot loop: numba-compiled kernel with a pure-numpy fallback.

Backend selection at import time via ``KARMA_ALLOC_NUMBA``:

* ``"0"``/``"false"``/``"no"``   -- force the numpy path;
* ``"1"``/``"true"``/``"require"`` -- require numba (ImportError otherwise);
* unset or ``"auto"``           -- numba when importable, numpy otherwise.

``KARMA_ALLOC_THREADS`` caps numba's thread pool when positive (0 = auto).
Both backends consume identical pre-drawn uniforms and make identical
comparisons, so they produce the same allocation decisions; floating-point
reductions may differ in the last ulp between backends.

Uniform layout per agent and step (columns of ``uniforms``):
exclusive mode: [urgency, resource pick, tie key];
independent mode: [urgency, m bid draws..., m tie keys...].
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("KARMA_ALLOC_NUMBA", "auto").strip().lower()
if _env in ("0", "false", "no"):
    NUMBA_ENABLED = False
elif _env in ("1", "true", "require"):
    import numba  # noqa: F401  (hard requirement requested)
    NUMBA_ENABLED = True
else:
    try:
        import numba  # noqa: F401
        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    import numba

    _threads = os.environ.get("KARMA_ALLOC_THREADS", "0")
    try:
        _cap = int(_threads)
    except ValueError:
        _cap = 0
    if _cap > 0:
        numba.set_num_threads(min(_cap, numba.config.NUMBA_NUM_THREADS))


def _run_chunk_py(karma, type_idx, share, sigma_cum, pick_cum, chi, bstar,
                  cap, me_flag, skip_flag, uniforms, record_flags,
                  kbar_target, alloc_count, intent_count, urgency_count,
                  clearing_out, paytot_out, pay_by_type, redist_by_type,
                  counters):
    """Numpy reference implementation; one auction round per step."""
    steps, n, _ = uniforms.shape
    m = bstar.shape[0]
    for s in range(steps):
        u_all = uniforms[s]
        rec = bool(record_flags[s])
        u_idx = (sigma_cum[type_idx] <= u_all[:, 0:1]).sum(axis=1)
        if rec:
            np.add.at(urgency_count, (type_idx, u_idx), 1)

        pay = np.zeros(n)
        nm_on = np.zeros((n, m), dtype=bool)
        nm_val = np.zeros((n, m))
        if me_flag:
            pc = pick_cum[type_idx, u_idx]
            j_pick = (pc <= u_all[:, 1:2]).sum(axis=1)
            wa = np.nonzero(j_pick < m)[0]
            j_a = j_pick[wa]
            want = bstar[j_a]
            k_a = karma[wa]
            if rec:
                np.add.at(intent_count, (type_idx[wa], j_a, u_idx[wa]), 1)
            short = want > k_a
            counters[0] += int(short.sum())
            if skip_flag:
                placing = ~short
                val = want
            else:
                placing = ~short | (k_a > 0.0)
                val = np.where(short, k_a, want)
            placing = placing & ((val > 0.0) | (want <= 0.0))
            nm_on[wa[placing], j_a[placing]] = True
            nm_val[wa[placing], j_a[placing]] = val[placing]
        else:
            intend = u_all[:, 1:1 + m] < chi[type_idx, :, u_idx]
            left = karma.copy()
            fell = np.zeros(n, dtype=bool)
            for j in range(m):
                mask = intend[:, j]
                if rec and mask.any():
                    np.add.at(intent_count,
                              (type_idx[mask], j, u_idx[mask]), 1)
                want = bstar[j]
                short = mask & (want > left)
                fell |= short
                placing = mask & ~short if skip_flag else mask
                val = np.where(short, left, want)
                enter = placing & ((val > 0.0) | (want <= 0.0))
                nm_on[:, j] = enter
                nm_val[:, j] = np.where(enter, val, 0.0)
                left = left - np.where(placing, val, 0.0)
            counters[0] += int(fell.sum())

        p_tot = 0.0
        for j in range(m):
            entered = np.nonzero(nm_on[:, j])[0]
            K = len(entered)
            cj = int(cap[j])
            if K == 0:
                clearing_out[s, j] = 0.0
                continue
            vals = nm_val[entered, j]
            if K <= cj:
                b_clear = float(vals.min()) if K == cj else 0.0
                winners = entered
            else:
                b_clear = float(np.sort(vals)[K - cj])
                sure = entered[vals > b_clear]
                ties = entered[vals == b_clear]
                r = cj - len(sure)
                col = 2 if me_flag else 1 + m + j
                keys = uniforms[s, ties, col]
                sel = ties[np.argsort(keys, kind="stable")[:r]]
                winners = np.concatenate([sure, sel])
            clearing_out[s, j] = b_clear
            pay[winners] += b_clear
            p_tot += b_clear * len(winners)
            if rec:
                np.add.at(alloc_count, (type_idx[winners], j, u_idx[winners]), 1)

        paytot_out[s] = p_tot
        gains = share * p_tot
        karma += gains - pay
        if rec:
            np.add.at(pay_by_type, type_idx, pay)
            np.add.at(redist_by_type, type_idx, gains)
        if abs(karma.sum() - kbar_target) > 1e-9 * kbar_target:
            return s
    return -1


if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True, nogil=True)
    def _run_chunk_nb(karma, type_idx, share, sigma_cum, pick_cum, chi, bstar,
                      cap, me_flag, skip_flag, uniforms, record_flags,
                      kbar_target, alloc_count, intent_count, urgency_count,
                      clearing_out, paytot_out, pay_by_type, redist_by_type,
                      counters):
        steps, n, _ = uniforms.shape
        m = bstar.shape[0]
        qmax = sigma_cum.shape[1]
        pay = np.zeros(n)
        u_idx = np.zeros(n, dtype=np.int64)
        bid_val = np.zeros(n)
        bid_res = np.zeros(n, dtype=np.int64)
        entered = np.zeros(n, dtype=np.int64)
        vals = np.zeros(n)
        nm_val = np.zeros((n, m))
        nm_on = np.zeros((n, m), dtype=np.uint8)
        for s in range(steps):
            rec = record_flags[s] != 0
            for a in range(n):
                i = type_idx[a]
                r0 = uniforms[s, a, 0]
                u = 0
                while u < qmax - 1 and sigma_cum[i, u] <= r0:
                    u += 1
                u_idx[a] = u
                if rec:
                    urgency_count[i, u] += 1
                pay[a] = 0.0
                bid_res[a] = -1
                bid_val[a] = 0.0

            if me_flag:
                for a in range(n):
                    i = type_idx[a]
                    u = u_idx[a]
                    r1 = uniforms[s, a, 1]
                    j = 0
                    while j < m and pick_cum[i, u, j] <= r1:
                        j += 1
                    if j >= m:
                        continue
                    if rec:
                        intent_count[i, j, u] += 1
                    want = bstar[j]
                    if want <= 0.0:
                        bid_res[a] = j
                        bid_val[a] = 0.0
                        continue
                    if want > karma[a]:
                        counters[0] += 1
                        if skip_flag or karma[a] <= 0.0:
                            continue
                        bid_res[a] = j
                        bid_val[a] = karma[a]
                    else:
                        bid_res[a] = j
                        bid_val[a] = want
            else:
                for a in range(n):
                    i = type_idx[a]
                    u = u_idx[a]
                    left = karma[a]
                    fell_short = False
                    for j in range(m):
                        nm_on[a, j] = 0
                        if uniforms[s, a, 1 + j] < chi[i, j, u]:
                            if rec:
                                intent_count[i, j, u] += 1
                            want = bstar[j]
                            if want > left:
                                fell_short = True
                                if skip_flag:
                                    continue
                                val = left
                            else:
                                val = want
                            if val > 0.0 or want <= 0.0:
                                nm_on[a, j] = 1
                                nm_val[a, j] = val
                            left -= val
                    if fell_short:
                        counters[0] += 1

            p_tot = 0.0
            for j in range(m):
                kcount = 0
                if me_flag:
                    for a in range(n):
                        if bid_res[a] == j and (bid_val[a] > 0.0 or bstar[j] <= 0.0):
                            entered[kcount] = a
                            vals[kcount] = bid_val[a]
                            kcount += 1
                else:
                    for a in range(n):
                        if nm_on[a, j] != 0:
                            entered[kcount] = a
                            vals[kcount] = nm_val[a, j]
                            kcount += 1
                cj = cap[j]
                if kcount == 0:
                    clearing_out[s, j] = 0.0
                    continue
                if kcount <= cj:
                    if kcount == cj:
                        b_clear = vals[0]
                        for k in range(1, kcount):
                            if vals[k] < b_clear:
                                b_clear = vals[k]
                    else:
                        b_clear = 0.0
                    clearing_out[s, j] = b_clear
                    for k in range(kcount):
                        a = entered[k]
                        pay[a] += b_clear
                        p_tot += b_clear
                        if rec:
                            alloc_count[type_idx[a], j, u_idx[a]] += 1
                else:
                    vsort = np.sort(vals[:kcount].copy())
                    b_clear = vsort[kcount - cj]
                    clearing_out[s, j] = b_clear
                    n_sure = 0
                    n_tie = 0
                    tie_idx = np.zeros(kcount, dtype=np.int64)
                    for k in range(kcount):
                        if vals[k] > b_clear:
                            a = entered[k]
                            pay[a] += b_clear
                            p_tot += b_clear
                            if rec:
                                alloc_count[type_idx[a], j, u_idx[a]] += 1
                            n_sure += 1
                        elif vals[k] == b_clear:
                            tie_idx[n_tie] = entered[k]
                            n_tie += 1
                    resid = cj - n_sure
                    if resid > 0 and n_tie > 0:
                        keys = np.zeros(n_tie)
                        col = 2 if me_flag else 1 + m + j
                        for k in range(n_tie):
                            keys[k] = uniforms[s, tie_idx[k], col]
                        order = np.argsort(keys)
                        take = resid if resid < n_tie else n_tie
                        for k in range(take):
                            a = tie_idx[order[k]]
                            pay[a] += b_clear
                            p_tot += b_clear
                            if rec:
                                alloc_count[type_idx[a], j, u_idx[a]] += 1

            paytot_out[s] = p_tot
            total = 0.0
            for a in range(n):
                gain = share[a] * p_tot
                karma[a] += gain - pay[a]
                total += karma[a]
                if rec:
                    pay_by_type[type_idx[a]] += pay[a]
                    redist_by_type[type_idx[a]] += gain
            if abs(total - kbar_target) > 1e-9 * kbar_target:
                return s
        return -1

    run_chunk = _run_chunk_nb
else:
    run_chunk = _run_chunk_py


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
