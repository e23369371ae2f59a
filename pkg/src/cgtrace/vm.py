"""Executing images.

``execute`` runs on the JIT kernel. ``interpret`` is a straightforward
pure-Python interpreter with identical semantics; it is slow and exists so the
kernel has something independent to be checked against.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from . import isa
from .isa import MASK32

FAULT_KINDS = ("segfault", "illegal", "stack")


@dataclass(frozen=True)
class Exit:
    code: int


@dataclass(frozen=True)
class Trap:
    pc: int


@dataclass(frozen=True)
class Fault:
    kind: str
    addr: int
    pc: int


@dataclass(frozen=True)
class Timeout:
    pass


@dataclass(frozen=True)
class ExecConfig:
    cycle_budget: int = 50_000
    logid_cost: int = 20
    shadow_slots: int = 256

    def __post_init__(self):
        if self.cycle_budget <= 0:
            raise ValueError("cycle_budget must be positive")
        if self.logid_cost < 1:
            raise ValueError("logid_cost must be >= 1")

    def with_budget(self, budget):
        return ExecConfig(budget, self.logid_cost, self.shadow_slots)


@dataclass(frozen=True)
class ExecResult:
    outcome: object
    cycles: int
    trace: tuple = None
    call_stack: tuple = ()
    output: bytes = b""
    blocks: tuple = field(default=None, compare=False, repr=False)

    @property
    def crashed(self):
        return isinstance(self.outcome, Fault)


class Machine:
    """Reusable execution context for one image (holds the kernel's scratch buffers).

    ``code`` is a private mutable copy of the image's code so callers such as
    the fuzzer can restore patches in place between runs.
    """

    def __init__(self, image, cfg=None, n_sites=0, trace_cap=1 << 16):
        self.image = image
        self.cfg = cfg or ExecConfig()
        self.code = np.frombuffer(image.code, dtype=np.uint8).copy()
        self.data_init = np.frombuffer(image.data, dtype=np.uint8).copy()
        self.shadow = np.zeros(self.cfg.shadow_slots, dtype=np.int64)
        self.data = np.zeros_like(self.data_init)
        self.stack = np.zeros(K.STACK_DEPTH, dtype=np.int64)
        self.seen = np.zeros(max(n_sites, 1), dtype=np.uint8)
        self.trace = np.zeros(trace_cap, dtype=np.int64)
        self.out = np.zeros(K.OUT_CAP, dtype=np.uint8)
        self.res = np.zeros(K.RES_SIZE, dtype=np.int64)
        self.no_leaders = np.zeros(0, dtype=np.uint8)
        self.no_ltrace = np.zeros(0, dtype=np.int64)
        self.ltrace = self.no_ltrace

    def write(self, addr, patch):
        off = addr - self.image.code_base
        self.code[off:off + len(patch)] = np.frombuffer(bytes(patch), dtype=np.uint8)

    def current_code(self):
        return self.code.tobytes()

    def run(self, data, budget=None, leaders=None):
        inp = np.frombuffer(bytes(data), dtype=np.uint8)
        if leaders is None:
            lead, ltrace = self.no_leaders, self.no_ltrace
        else:
            lead = leaders
            need = (budget or self.cfg.cycle_budget) + 1
            if self.ltrace.shape[0] < need:
                self.ltrace = np.zeros(need, dtype=np.int64)
            ltrace = self.ltrace
        img = self.image
        K.run(self.code, img.code_base, self.data_init, img.data_base, img.entry, inp, len(inp),
              budget or self.cfg.cycle_budget, self.cfg.logid_cost, self.shadow, self.data,
              self.stack, self.seen, self.trace, lead, ltrace, self.out, self.res)
        return self._result(ltrace if leaders is not None else None)

    def _result(self, ltrace=None):
        res = self.res
        oc = res[K.R_OUTCOME]
        if oc == K.EXIT:
            outcome = Exit(int(res[K.R_EXIT]))
        elif oc == K.TRAPPED:
            outcome = Trap(int(res[K.R_PC]))
        elif oc == K.FAULT:
            outcome = Fault(FAULT_KINDS[res[K.R_KIND]], int(res[K.R_ADDR]), int(res[K.R_PC]))
        else:
            outcome = Timeout()
        ntrace = int(min(res[K.R_NTRACE], self.trace.shape[0]))
        trace = tuple(int(x) for x in self.trace[:ntrace]) if res[K.R_NTRACE] else None
        stack = tuple(int(x) for x in self.stack[:res[K.R_NSTACK]])
        output = self.out[:min(res[K.R_NOUT], K.OUT_CAP)].tobytes()
        blocks = None
        if ltrace is not None:
            blocks = tuple(int(x) for x in ltrace[:min(res[K.R_NLEAD], ltrace.shape[0])])
        return ExecResult(outcome, int(res[K.R_CYCLES]), trace, stack, output, blocks)


def execute(image, data, cfg=None):
    """Run ``image`` on input ``data``. Deterministic; never raises for target misbehaviour."""
    return Machine(image, cfg, n_sites=1 << 16).run(data)


def trace_blocks(image, data, block_starts, cfg=None):
    """Execute and also record the sequence of block start addresses entered."""
    leaders = np.zeros(len(image.code), dtype=np.uint8)
    for a in block_starts:
        if image.in_code(a):
            leaders[a - image.code_base] = 1
    return Machine(image, cfg, n_sites=1 << 16).run(data, leaders=leaders)


def _signed(v):
    return v - (1 << 32) if v & 0x80000000 else v


def interpret(image, data, cfg=None):
    """Reference interpreter: same contract as ``execute``, written for clarity."""
    cfg = cfg or ExecConfig()
    data = bytes(data)
    mem = bytearray(image.data)
    regs = [0] * isa.NUM_REGS
    flags = (0, 0)
    stack = []
    shadow = [0] * cfg.shadow_slots
    trace, seen, out = [], set(), bytearray()
    pos = 0
    cycles = 0
    pc = image.entry

    def in_code(a):
        return image.code_base <= a < image.code_end

    def mem_range(addr, width):
        return image.data_base <= addr and addr + width <= image.data_end

    def finish(outcome):
        return ExecResult(outcome, cycles, tuple(trace) if trace else None, tuple(stack), bytes(out[:K.OUT_CAP]))

    while True:
        if not in_code(pc):
            return finish(Fault("segfault", pc, pc))
        op = image.code[pc - image.code_base]
        cost = cfg.logid_cost if op == isa.LOGID else 1
        if cycles + cost > cfg.cycle_budget:
            return finish(Timeout())
        cycles += cost
        if op not in isa.LENGTHS:
            return finish(Fault("illegal", pc, pc))
        if not image.in_code(pc, isa.LENGTHS[op]):
            return finish(Fault("segfault", image.code_end, pc))
        try:
            ins = isa.decode(image.code, pc - image.code_base, image.code_base)
        except isa.DecodeError:
            return finish(Fault("illegal", pc, pc))
        a = ins.args
        nxt = ins.end
        if op == isa.HALT:
            return finish(Exit(regs[0]))
        if op == isa.TRAP:
            return finish(Trap(pc))
        if op == isa.NOP:
            pc = nxt
        elif op == isa.MOVI:
            regs[a[0]] = a[1]
            pc = nxt
        elif op == isa.MOV:
            regs[a[0]] = regs[a[1]]
            pc = nxt
        elif op in isa.ALU_RR or op in isa.ALU_RI:
            x = regs[a[0]]
            y = regs[a[1]] if op in isa.ALU_RR else a[1]
            name = isa.MNEMONICS[op].rstrip("i") if op in isa.ALU_RI else isa.MNEMONICS[op]
            if name == "shl":
                v = x << (y & 31)
            elif name == "shr":
                v = x >> (y & 31)
            else:
                v = {"add": x + y, "sub": x - y, "and": x & y, "or": x | y,
                     "xor": x ^ y, "mul": x * y}[name]
            regs[a[0]] = v & MASK32
            pc = nxt
        elif op in (isa.CMP, isa.CMPI):
            flags = (regs[a[0]], regs[a[1]] if op == isa.CMP else a[1])
            pc = nxt
        elif op in isa.MEM_OPS:
            addr = a[2] if a[1] == isa.NO_BASE else (a[2] + regs[a[1]]) & MASK32
            width = 1 if op in (isa.LDB, isa.STB) else 4
            if not mem_range(addr, width):
                return finish(Fault("segfault", addr, pc))
            off = addr - image.data_base
            if op == isa.LDB:
                regs[a[0]] = mem[off]
            elif op == isa.LDW:
                regs[a[0]] = int.from_bytes(mem[off:off + 4], "little")
            elif op == isa.STB:
                mem[off] = regs[a[0]] & 0xFF
            else:
                mem[off:off + 4] = regs[a[0]].to_bytes(4, "little")
            pc = nxt
        elif op == isa.IN:
            if pos < len(data):
                regs[a[0]] = data[pos]
                pos += 1
            else:
                regs[a[0]] = 0
            pc = nxt
        elif op == isa.OUT:
            out.append(regs[a[0]] & 0xFF)
            pc = nxt
        elif op == isa.JCC:
            x, y = flags
            taken = [x == y, x != y, _signed(x) < _signed(y), _signed(x) <= _signed(y),
                     _signed(x) > _signed(y), _signed(x) >= _signed(y), x < y, x >= y][a[0]]
            if taken:
                tgt = ins.target()
                if not in_code(tgt):
                    return finish(Fault("segfault", tgt, pc))
                pc = tgt
            else:
                pc = nxt
        elif op in (isa.JMP, isa.CALL, isa.JMPR, isa.CALLR):
            tgt = ins.target() if op in (isa.JMP, isa.CALL) else regs[a[0]]
            if op in (isa.CALL, isa.CALLR):
                if len(stack) >= K.STACK_DEPTH:
                    return finish(Fault("stack", pc, pc))
                stack.append(nxt)
            if not in_code(tgt):
                return finish(Fault("segfault", tgt, pc))
            pc = tgt
        elif op == isa.RET:
            if not stack:
                return finish(Fault("stack", pc, pc))
            tgt = stack.pop()
            if not in_code(tgt):
                return finish(Fault("segfault", tgt, pc))
            pc = tgt
        elif op == isa.LOGID:
            if a[0] not in seen:
                seen.add(a[0])
                trace.append(a[0])
            pc = nxt
        elif op in (isa.CINC, isa.CHK):
            slot = a[0]
            if slot >= cfg.shadow_slots:
                return finish(Fault("illegal", pc, pc))
            if op == isa.CINC:
                shadow[slot] += 1
                pc = nxt
            elif shadow[slot] <= a[1]:
                tgt = ins.target()
                if not in_code(tgt):
                    return finish(Fault("segfault", tgt, pc))
                pc = tgt
            else:
                pc = nxt


def behaviour(result):
    """What a run did, independent of where its code sits: outcome class, exit code or fault kind, output."""
    oc = result.outcome
    if isinstance(oc, Exit):
        return ("exit", oc.code, result.output)
    if isinstance(oc, Fault):
        return ("fault", oc.kind, result.output)
    return (type(oc).__name__.lower(), None, result.output)
