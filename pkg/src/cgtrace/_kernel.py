"""JIT-compiled interpreter core and batched fuzzing loops.

The pure-Python interpreter in ``vm.py`` defines the same semantics and is
used to cross-check this kernel. Everything here works on numpy arrays so a
whole havoc stage can run without returning to Python.
"""

import numpy as np
from numba import njit

from . import isa

EXIT, TRAPPED, FAULT, TIMEOUT = 0, 1, 2, 3
SEGFAULT, ILLEGAL, STACKERR = 0, 1, 2
STACK_DEPTH = 64
OUT_CAP = 4096

M32 = 0xFFFFFFFF

_len = np.zeros(256, dtype=np.int64)
for _op, _n in isa.LENGTHS.items():
    _len[_op] = _n
OPLEN = _len

# result vector layout
R_OUTCOME, R_CYCLES, R_PC, R_KIND, R_ADDR, R_EXIT, R_NTRACE, R_NLEAD, R_NOUT, R_NSTACK = range(10)
RES_SIZE = 10


@njit(cache=True, inline="always")
def _u32(code, off):
    return (np.int64(code[off]) | (np.int64(code[off + 1]) << 8)
            | (np.int64(code[off + 2]) << 16) | (np.int64(code[off + 3]) << 24))


@njit(cache=True, inline="always")
def _s32(code, off):
    v = _u32(code, off)
    if v >= 0x80000000:
        v -= 0x100000000
    return v


@njit(cache=True, inline="always")
def _signed(v):
    return v - 0x100000000 if v >= 0x80000000 else v


@njit(cache=True)
def run(code, code_base, data_init, data_base, entry, inp, n_inp, budget, logid_cost,
        shadow, data, stack, seen, trace, leaders, ltrace, out, res):
    """Execute one input. Scratch arrays are caller-owned; results land in ``res``."""
    code_len = code.shape[0]
    data_len = data_init.shape[0]
    for i in range(data_len):
        data[i] = data_init[i]
    for i in range(shadow.shape[0]):
        shadow[i] = 0
    n_seen = seen.shape[0]
    trace_cap = trace.shape[0]
    lead_cap = ltrace.shape[0]
    track = leaders.shape[0] == code_len
    out_cap = out.shape[0]
    r = np.zeros(8, dtype=np.int64)
    fa = np.int64(0)
    fb = np.int64(0)
    sp = 0
    ntrace = 0
    nlead = 0
    nout = 0
    ipos = 0
    cycles = np.int64(0)
    pc = np.int64(entry)
    outcome = EXIT
    kind = 0
    faddr = np.int64(0)
    while True:
        off = pc - code_base
        if off < 0 or off >= code_len:
            outcome = FAULT
            kind = SEGFAULT
            faddr = pc
            break
        op = code[off]
        cost = logid_cost if op == 0x70 else 1
        if cycles + cost > budget:
            outcome = TIMEOUT
            break
        cycles += cost
        if track and leaders[off] != 0:
            if nlead < lead_cap:
                ltrace[nlead] = pc
            nlead += 1
        n = OPLEN[op]
        if n == 0:
            outcome = FAULT
            kind = ILLEGAL
            faddr = pc
            break
        if off + n > code_len:
            outcome = FAULT
            kind = SEGFAULT
            faddr = code_base + code_len
            break
        nxt = pc + n
        if op == 0x00:
            pc = nxt
        elif op == 0x01:
            break
        elif op == 0xCC:
            outcome = TRAPPED
            break
        elif op == 0x10:
            rd = code[off + 1]
            if rd >= 8:
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            r[rd] = _u32(code, off + 2)
            pc = nxt
        elif op == 0x11 or op == 0x30 or (op >= 0x20 and op < 0x28):
            a = code[off + 1]
            b = code[off + 2]
            if a >= 8 or b >= 8:
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            if op == 0x11:
                r[a] = r[b]
            elif op == 0x30:
                fa = r[a]
                fb = r[b]
            else:
                x = r[a]
                y = r[b]
                if op == 0x20:
                    v = x + y
                elif op == 0x21:
                    v = x - y
                elif op == 0x22:
                    v = x & y
                elif op == 0x23:
                    v = x | y
                elif op == 0x24:
                    v = x ^ y
                elif op == 0x25:
                    v = (x * y) & M32
                elif op == 0x26:
                    v = x << (y & 31)
                else:
                    v = x >> (y & 31)
                r[a] = v & M32
            pc = nxt
        elif op == 0x31 or (op >= 0x28 and op < 0x30):
            a = code[off + 1]
            if a >= 8:
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            y = _u32(code, off + 2)
            if op == 0x31:
                fa = r[a]
                fb = y
            else:
                x = r[a]
                if op == 0x28:
                    v = x + y
                elif op == 0x29:
                    v = x - y
                elif op == 0x2A:
                    v = x & y
                elif op == 0x2B:
                    v = x | y
                elif op == 0x2C:
                    v = x ^ y
                elif op == 0x2D:
                    v = (x * y) & M32
                elif op == 0x2E:
                    v = x << (y & 31)
                else:
                    v = x >> (y & 31)
                r[a] = v & M32
            pc = nxt
        elif op >= 0x40 and op < 0x44:
            a = code[off + 1]
            base = code[off + 2]
            if a >= 8 or (base >= 8 and base != 0xFF):
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            addr = _u32(code, off + 3)
            if base != 0xFF:
                addr = (addr + r[base]) & M32
            width = 1 if (op == 0x40 or op == 0x42) else 4
            doff = addr - data_base
            if doff < 0 or doff + width > data_len:
                outcome = FAULT
                kind = SEGFAULT
                faddr = addr
                break
            if op == 0x40:
                r[a] = data[doff]
            elif op == 0x41:
                r[a] = _u32(data, doff)
            elif op == 0x42:
                data[doff] = r[a] & 0xFF
            else:
                v = r[a]
                data[doff] = v & 0xFF
                data[doff + 1] = (v >> 8) & 0xFF
                data[doff + 2] = (v >> 16) & 0xFF
                data[doff + 3] = (v >> 24) & 0xFF
            pc = nxt
        elif op == 0x50 or op == 0x51:
            a = code[off + 1]
            if a >= 8:
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            if op == 0x50:
                if ipos < n_inp:
                    r[a] = inp[ipos]
                    ipos += 1
                else:
                    r[a] = 0
            else:
                if nout < out_cap:
                    out[nout] = r[a] & 0xFF
                nout += 1
            pc = nxt
        elif op == 0x60:
            cond = code[off + 1]
            if cond > 7:
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            if cond == 0:
                taken = fa == fb
            elif cond == 1:
                taken = fa != fb
            elif cond == 2:
                taken = _signed(fa) < _signed(fb)
            elif cond == 3:
                taken = _signed(fa) <= _signed(fb)
            elif cond == 4:
                taken = _signed(fa) > _signed(fb)
            elif cond == 5:
                taken = _signed(fa) >= _signed(fb)
            elif cond == 6:
                taken = fa < fb
            else:
                taken = fa >= fb
            if taken:
                tgt = (nxt + _s32(code, off + 2)) & M32
                if tgt < code_base or tgt >= code_base + code_len:
                    outcome = FAULT
                    kind = SEGFAULT
                    faddr = tgt
                    break
                pc = tgt
            else:
                pc = nxt
        elif op == 0x61 or op == 0x62 or op == 0x64 or op == 0x65:
            if op == 0x61 or op == 0x62:
                tgt = (nxt + _s32(code, off + 1)) & M32
            else:
                a = code[off + 1]
                if a >= 8:
                    outcome = FAULT
                    kind = ILLEGAL
                    faddr = pc
                    break
                tgt = r[a]
            if op == 0x62 or op == 0x65:
                if sp >= STACK_DEPTH:
                    outcome = FAULT
                    kind = STACKERR
                    faddr = pc
                    break
                stack[sp] = nxt
                sp += 1
            if tgt < code_base or tgt >= code_base + code_len:
                outcome = FAULT
                kind = SEGFAULT
                faddr = tgt
                break
            pc = tgt
        elif op == 0x63:
            if sp == 0:
                outcome = FAULT
                kind = STACKERR
                faddr = pc
                break
            sp -= 1
            tgt = stack[sp]
            if tgt < code_base or tgt >= code_base + code_len:
                outcome = FAULT
                kind = SEGFAULT
                faddr = tgt
                break
            pc = tgt
        elif op == 0x70:
            sid = _u32(code, off + 1)
            if sid < n_seen:
                if seen[sid] == 0:
                    seen[sid] = 1
                    if ntrace < trace_cap:
                        trace[ntrace] = sid
                    ntrace += 1
            else:
                if ntrace < trace_cap:
                    trace[ntrace] = sid
                ntrace += 1
            pc = nxt
        elif op == 0x71 or op == 0x72:
            slot = np.int64(code[off + 1]) | (np.int64(code[off + 2]) << 8)
            if slot >= shadow.shape[0]:
                outcome = FAULT
                kind = ILLEGAL
                faddr = pc
                break
            if op == 0x71:
                shadow[slot] += 1
                pc = nxt
            else:
                thr = _u32(code, off + 3)
                if shadow[slot] <= thr:
                    tgt = (nxt + _s32(code, off + 7)) & M32
                    if tgt < code_base or tgt >= code_base + code_len:
                        outcome = FAULT
                        kind = SEGFAULT
                        faddr = tgt
                        break
                    pc = tgt
                else:
                    pc = nxt
        else:
            outcome = FAULT
            kind = ILLEGAL
            faddr = pc
            break
    # seen is shared scratch: clear only what this run touched
    for i in range(min(ntrace, trace_cap)):
        if trace[i] < n_seen:
            seen[trace[i]] = 0
    res[R_OUTCOME] = outcome
    res[R_CYCLES] = cycles
    res[R_PC] = pc
    res[R_KIND] = kind
    res[R_ADDR] = faddr
    res[R_EXIT] = r[0]
    res[R_NTRACE] = ntrace
    res[R_NLEAD] = nlead
    res[R_NOUT] = nout
    res[R_NSTACK] = sp


# --- deterministic mutation ------------------------------------------------

@njit(cache=True, inline="always")
def _next(state):
    # splitmix64 step
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _below(state, n):
    return np.int64(_next(state) % np.uint64(n))


@njit(cache=True)
def bitflip(src, n, idx, buf):
    """Copy ``src`` into ``buf`` with bit ``idx`` flipped (MSB-first within a byte)."""
    for i in range(n):
        buf[i] = src[i]
    buf[idx >> 3] ^= np.uint8(128 >> (idx & 7))
    return n


@njit(cache=True)
def havoc(src, n, max_len, state, buf, tmp):
    """Stacked random edits of ``src`` into ``buf``; returns the new length (<= max_len)."""
    n = min(n, max_len)
    for i in range(n):
        buf[i] = src[i]
    ops = 1 << (1 + _below(state, 4))
    for _ in range(ops):
        k = _below(state, 5)
        if n == 0:
            k = 2
        if k == 0:
            pos = _below(state, n * 8)
            buf[pos >> 3] ^= np.uint8(128 >> (pos & 7))
        elif k == 1:
            buf[_below(state, n)] = np.uint8(_below(state, 256))
        elif k == 2:
            ln = min(1 + _below(state, 8), max_len - n)
            if ln <= 0:
                continue
            pos = _below(state, n + 1)
            for i in range(n - 1, pos - 1, -1):
                buf[i + ln] = buf[i]
            same = _below(state, 2) == 0
            v = np.uint8(_below(state, 256))
            for i in range(ln):
                buf[pos + i] = v if same else np.uint8(_below(state, 256))
            n += ln
        elif k == 3:
            if n < 2:
                continue
            ln = 1 + _below(state, n - 1)
            pos = _below(state, n - ln + 1)
            for i in range(pos, n - ln):
                buf[i] = buf[i + ln]
            n -= ln
        else:
            ln = min(1 + _below(state, n), max_len - n)
            if ln <= 0:
                continue
            frm = _below(state, n - ln + 1)
            pos = _below(state, n + 1)
            for i in range(ln):
                tmp[i] = buf[frm + i]
            for i in range(n - 1, pos - 1, -1):
                buf[i + ln] = buf[i]
            for i in range(ln):
                buf[pos + i] = tmp[i]
            n += ln
    return n


# batch modes
STOP_ON_SIGNAL, STOP_ON_NEW_TRACE, STOP_ON_FAULT = 0, 1, 2
HIT, EXHAUSTED, BUDGET = 0, 1, 2


@njit(cache=True)
def fuzz_batch(stage, parent, n_parent, start, count, state, max_len, mode, covered, wall_left,
               code, code_base, data_init, data_base, entry, budget, logid_cost,
               shadow, data, stack, seen, trace, leaders, ltrace, out, res, buf, tmp, stats):
    """Run mutants of ``parent`` until one is interesting or the batch/budget ends.

    stage 0 flips bit ``start + i``; stage 1 is havoc. ``stats`` receives
    (next index, executions, cycles, timeouts, mutant length).
    """
    execs = 0
    cycles = np.int64(0)
    timeouts = 0
    status = EXHAUSTED
    i = start
    n = 0
    end = start + count
    while i < end:
        if cycles >= wall_left:
            status = BUDGET
            break
        if stage == 0:
            n = bitflip(parent, n_parent, i, buf)
        else:
            n = havoc(parent, n_parent, max_len, state, buf, tmp)
        i += 1
        run(code, code_base, data_init, data_base, entry, buf, n, budget, logid_cost,
            shadow, data, stack, seen, trace, leaders, ltrace, out, res)
        execs += 1
        cycles += res[R_CYCLES]
        oc = res[R_OUTCOME]
        if oc == TIMEOUT:
            timeouts += 1
            continue
        if mode == STOP_ON_SIGNAL:
            if oc == TRAPPED or oc == FAULT:
                status = HIT
                break
        elif mode == STOP_ON_NEW_TRACE:
            if oc == FAULT:
                status = HIT
                break
            fresh = False
            for j in range(min(res[R_NTRACE], trace.shape[0])):
                sid = trace[j]
                if sid >= covered.shape[0] or covered[sid] == 0:
                    fresh = True
                    break
            if fresh:
                status = HIT
                break
        else:
            if oc == FAULT:
                status = HIT
                break
    stats[0] = i
    stats[1] = execs
    stats[2] = cycles
    stats[3] = timeouts
    stats[4] = n
    return status
