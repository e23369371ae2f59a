"""Random structured programs and random flow graphs for property tests.

Programs are built from a handful of statement templates (diamonds,
triangles, critical fall-throughs, counted loops, direct and indirect calls,
jump tables, planted null dereferences), so they are reducible, recursion
free and terminate. Each template also reports a cycle bound, which lets
tests pick a per-run budget that can never time out.
"""

import random
from dataclasses import dataclass

from .asm import assemble
from .isa import COND_NAMES

TEMPLATES = ("arith", "if", "triangle", "fallcrit", "loop", "call", "indirect", "switch", "crash")


@dataclass
class GenParams:
    n_stmts: int = 6            # top-level statements in main
    max_depth: int = 2          # statement nesting depth
    n_funcs: int = 2
    loop_mask: int = 15         # a loop runs (input byte & loop_mask) times
    loops: int = None           # exact number of loops; None draws them at random
    weights: dict = None        # template -> relative weight
    crash: bool = True          # allow planted null dereferences

    def weight_table(self):
        w = {"arith": 2, "if": 3, "triangle": 3, "fallcrit": 2, "loop": 2, "call": 1,
             "indirect": 1, "switch": 1, "crash": 1}
        w.update(self.weights or {})
        if not self.crash:
            w["crash"] = 0
        if self.loops is not None:
            w["loop"] = 0
        return w


@dataclass
class GenProgram:
    source: str
    image: object
    meta: object
    cycle_bound: int            # no input can make a run take more cycles than this
    n_loops: int
    seed: int


class _Gen:
    def __init__(self, rng, params):
        self.rng = rng
        self.p = params
        self.n_label = 0
        self.data = []
        self.funcs = []         # (name, bound)
        self.n_loops = 0
        self.weights = params.weight_table()

    def label(self, stem):
        self.n_label += 1
        return f"{stem}{self.n_label}"

    def cond(self):
        return self.rng.choice(COND_NAMES)

    def imm(self):
        return self.rng.randrange(256)

    def pick(self, depth, allow_calls):
        names = [t for t in TEMPLATES if self.weights.get(t, 0) > 0]
        if depth >= self.p.max_depth:
            names = [t for t in names if t in ("arith", "triangle", "call", "crash")]
        if not allow_calls or not self.funcs:
            names = [t for t in names if t not in ("call", "indirect")]
        return self.rng.choices(names, [self.weights[t] for t in names])[0]

    def block(self, n, depth, allow_calls=True):
        stmts = self.stmts(n, depth, allow_calls)
        return [ln for body, _ in stmts for ln in body], sum(b for _, b in stmts)

    def stmts(self, n, depth, allow_calls=True):
        return [self.stmt(self.pick(depth, allow_calls), depth, allow_calls) for _ in range(n)]

    def inner(self, depth, allow_calls):
        return self.block(self.rng.randint(1, 2), depth + 1, allow_calls)

    def stmt(self, kind, depth, allow_calls=True):
        r = self.rng
        if kind == "arith":
            return [" in r1", f" addi r3, {self.imm()}", " xor r3, r1", " out r3"], 4
        if kind == "if":
            els, end = self.label("else"), self.label("join")
            a, ba = self.inner(depth, allow_calls)
            b, bb = self.inner(depth, allow_calls)
            return ([" in r1", f" cmpi r1, {self.imm()}", f" {self.cond()} {els}"] + a
                    + [f" jmp {end}", f"{els}:"] + b + [f"{end}:"]), 4 + max(ba, bb)
        if kind == "triangle":
            end = self.label("tri")
            a, ba = self.inner(depth, allow_calls)
            return [" in r1", f" cmpi r1, {self.imm()}", f" {self.cond()} {end}"] + a + [f"{end}:"], 3 + ba
        if kind == "fallcrit":
            other, join, end = self.label("other"), self.label("fjoin"), self.label("fend")
            a, ba = self.inner(depth, allow_calls)
            b, bb = self.inner(depth, allow_calls)
            return ([" in r1", f" cmpi r1, {self.imm()}", f" {self.cond()} {other}", f"{join}:",
                     f" movi r3, {self.imm()}"] + a + [f" jmp {end}", f"{other}:"] + b
                    + [f" jmp {join}", f"{end}:"]), 6 + ba + bb
        if kind == "loop":
            return self.loop(depth, allow_calls)
        if kind == "call":
            name, fb = r.choice(self.funcs)
            return [f" call {name}", f" movi r3, {self.imm()}"], 3 + fb
        if kind == "indirect":
            (fa, ba), (fb, bb) = r.choice(self.funcs), r.choice(self.funcs)
            sel = self.label("sel")
            return ([" in r1", f" movi r4, {fa}", f" cmpi r1, {self.imm()}", f" jl {sel}",
                     f" movi r4, {fb}", f"{sel}:", f" callr r4 [{fa}, {fb}]", f" movi r3, {self.imm()}"],
                    8 + max(ba, bb))
        if kind == "switch":
            table, end = self.label("table"), self.label("swend")
            cases = [self.label("case") for _ in range(4)]
            self.data.append(f"{table}: .word {', '.join(cases)}")
            lines = [" in r1", " andi r1, 3", " shli r1, 2", f" ldw r4, [r1+{table}]",
                     f" jmpr r4 [{', '.join(cases)}]"]
            bound = 5
            for i, c in enumerate(cases):
                body, b = self.inner(depth, allow_calls)
                lines += [f"{c}:", f" movi r3, {self.imm()}"] + body
                bound += b + 1
                if i == len(cases) - 1 or r.random() < 0.6:
                    lines.append(f" jmp {end}")
                    bound += 1
            return lines + [f"{end}:"], bound
        if kind == "crash":
            ok = self.label("ok")
            return ([" in r1", f" cmpi r1, {self.imm()}", f" jne {ok}", " in r1", f" cmpi r1, {self.imm()}",
                     f" jne {ok}", " movi r5, 0", " ldb r0, [r5+0]", " halt", f"{ok}:"]), 9
        raise ValueError(kind)

    def loop(self, depth, allow_calls, body=None):
        self.n_loops += 1
        cnt, head, done = self.label("cnt"), self.label("head"), self.label("done")
        self.data.append(f"{cnt}: .word 0")
        if body is None:
            body, bb = self.inner(depth, allow_calls)
        else:
            body, bb = body
        trips = self.p.loop_mask + 1
        lines = [" in r2", f" andi r2, {self.p.loop_mask}", f" stw [{cnt}], r2", f"{head}:",
                 f" ldw r2, [{cnt}]", " cmpi r2, 0", f" je {done}", " subi r2, 1", f" stw [{cnt}], r2"]
        lines += body + [f" jmp {head}", f"{done}:"]
        return lines, 3 + (trips + 1) * (6 + bb) + 3

    def program(self):
        out = [".code", ".entry main"]
        fbodies = []
        for i in range(self.p.n_funcs):
            name = f"fn{i}"
            body, b = self.block(self.rng.randint(1, 3), 1, allow_calls=True)
            fbodies.append([f"{name}:", f" movi r3, {self.imm()}"] + body + [" ret"])
            self.funcs.append((name, b + 2))
        stmts = self.stmts(self.p.n_stmts, 0)
        for _ in range(self.p.loops or 0):
            body = self.block(1, self.p.max_depth, allow_calls=False)
            stmts.insert(self.rng.randint(0, len(stmts)), self.loop(self.p.max_depth, False, body))
        main = [ln for body, _ in stmts for ln in body]
        bound = sum(b for _, b in stmts)
        out += ["main:", " movi r3, 0"] + main + [" mov r0, r3", " halt"]
        for f in fbodies:
            out += f
        out += [".data"] + (self.data or ["pad: .word 0"])
        return "\n".join(out) + "\n", bound + 4


def gen_program(seed, params=None):
    """Deterministic random program for ``seed``."""
    params = params or GenParams()
    g = _Gen(random.Random(seed), params)
    source, bound = g.program()
    image, meta = assemble(source)
    return GenProgram(source, image, meta, bound, g.n_loops, seed)


def random_inputs(rng, n, max_len=24):
    """``n`` random byte strings; biased towards short inputs and small byte values."""
    out = []
    for _ in range(n):
        ln = rng.randint(0, max_len)
        alphabet = rng.choice((256, 16, 4))
        out.append(bytes(rng.randrange(alphabet) for _ in range(ln)))
    return out


def random_digraph(rng, n_nodes, density=0.3):
    """Random graph on ``0..n-1`` whose every node is reachable from node 0."""
    succ = {i: set() for i in range(n_nodes)}
    for i in range(1, n_nodes):
        succ[rng.randrange(i)].add(i)
    for a in range(n_nodes):
        for b in range(n_nodes):
            if rng.random() < density / max(1, n_nodes / 3):
                succ[a].add(b)
    return {a: sorted(bs) for a, bs in succ.items()}
