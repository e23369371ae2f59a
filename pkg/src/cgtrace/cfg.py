"""Control-flow recovery and the static facts the rewriter needs.

Blocks are recovered by recursive descent from the entry and every pinned
target; indirect edges come from the assembler's declared target sets, never
from heuristics. Dominators and loops are computed on the intraprocedural
view of the graph (calls summarised by their fall-through edge), rooted at
the program entry and every function entry.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass, field

from . import isa

COND_TARGET = "CondTarget"
COND_FALL = "CondFall"
UNCOND = "UncondDirect"
IND_JMP = "IndJmp"
IND_CALL = "IndCall"
RETURN = "Return"
CALL_DIRECT = "CallDirect"
CALL_FALL = "CallFall"
EDGE_KINDS = (COND_TARGET, COND_FALL, UNCOND, IND_JMP, IND_CALL, RETURN, CALL_DIRECT, CALL_FALL)
INDIRECT_KINDS = frozenset({IND_JMP, IND_CALL, RETURN})
# call edges never count as critical-edge candidates
NON_CANDIDATE = frozenset({CALL_DIRECT, CALL_FALL})
# edges followed inside one function
INTRA_KINDS = frozenset({COND_TARGET, COND_FALL, UNCOND, IND_JMP, CALL_FALL})


class CfgError(ValueError):
    def __init__(self, message, addr=None):
        super().__init__(message if addr is None else f"{message} at {addr:#x}")
        self.addr = addr


@dataclass(frozen=True)
class BasicBlock:
    id: int
    start: int
    length: int
    terminator: str

    @property
    def end(self):
        return self.start + self.length


@dataclass(frozen=True, order=True)
class Edge:
    src: int
    dst: int
    kind: str


@dataclass
class ControlFlowGraph:
    blocks: tuple
    edges: tuple
    entry: int
    function_entries: tuple = ()
    _succ: dict = field(default=None, repr=False, compare=False)
    _pred: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.edges = tuple(sorted(set(self.edges)))
        succ, pred = defaultdict(list), defaultdict(list)
        for e in self.edges:
            succ[e.src].append(e)
            pred[e.dst].append(e)
        self._succ, self._pred = dict(succ), dict(pred)
        self.by_start = {b.start: b.id for b in self.blocks}

    def out_edges(self, b):
        return self._succ.get(b, [])

    def in_edges(self, b):
        return self._pred.get(b, [])

    def outdegree(self, b):
        return len(self._succ.get(b, ()))

    def indegree(self, b):
        return len(self._pred.get(b, ()))

    def block_at(self, addr):
        return self.by_start.get(addr)

    def addr_pair(self, e):
        return self.blocks[e.src].start, self.blocks[e.dst].start

    def intra_succ(self):
        succ = {b.id: [] for b in self.blocks}
        for e in self.edges:
            if e.kind in INTRA_KINDS:
                succ[e.src].append(e.dst)
        return succ

    def roots(self):
        return (self.entry,) + tuple(f for f in self.function_entries if f != self.entry)


@dataclass(frozen=True)
class Loop:
    header: int
    body: frozenset
    back_edges: frozenset


@dataclass
class DomTree:
    idom: dict  # block -> immediate dominator; roots map to themselves

    def dominates(self, a, b):
        if a not in self.idom or b not in self.idom:
            return False
        while True:
            if b == a:
                return True
            up = self.idom[b]
            if up == b:
                return False
            b = up


@dataclass
class CriticalEdgeReport:
    total_edges: int
    critical_edges: int
    proportion: float
    per_type_static: dict
    per_type_dynamic: dict


def _decode_all(image, roots, meta):
    insns = {}
    work = [r for r in roots]
    direct_targets = set()
    fall_leaders = set()
    while work:
        addr = work.pop()
        while addr not in insns:
            if not image.in_code(addr):
                raise CfgError("reachable address outside code", addr)
            try:
                ins = isa.decode(image.code, addr - image.code_base, image.code_base)
            except isa.DecodeError as exc:
                raise CfgError(f"undecodable instruction ({exc})", addr) from None
            insns[addr] = ins
            op = ins.op
            if op in isa.DIRECT:
                t = ins.target()
                if not image.in_code(t):
                    raise CfgError(f"branch target {t:#x} outside code", addr)
                direct_targets.add(t)
                work.append(t)
            if op in (isa.JMPR, isa.CALLR):
                for t in meta.targets_of(addr):
                    work.append(t)
            if op in (isa.JCC, isa.CHK, isa.CALL, isa.CALLR):
                fall_leaders.add(ins.end)
            if ins.is_terminator and op not in (isa.JCC, isa.CALL, isa.CALLR):
                break
            addr = ins.end
    return insns, direct_targets, fall_leaders


def _ends_block(ins):
    return ins.is_terminator or ins.op == isa.CHK


def build_cfg(image, meta):
    """Recover the control-flow graph of ``image`` using ``meta``'s pinning facts."""
    roots = {image.entry, *meta.pinned_targets}
    for addr, tgts in meta.indirect_targets.items():
        if tgts:
            roots.update(tgts)
    insns, direct_targets, fall_leaders = _decode_all(image, sorted(roots), meta)
    addrs = sorted(insns)
    covered_end = 0
    for a in addrs:
        if a < covered_end:
            raise CfgError("overlapping instructions", a)
        covered_end = insns[a].end
    leaders = roots | direct_targets | fall_leaders
    for a in addrs:
        if _ends_block(insns[a]) and insns[a].end in insns:
            leaders.add(insns[a].end)

    blocks, block_insns = [], []
    cur = []
    for a in addrs:
        if cur and (a in leaders or cur[-1].end != a or _ends_block(cur[-1])):
            block_insns.append(cur)
            cur = []
        cur.append(insns[a])
    if cur:
        block_insns.append(cur)
    for i, run in enumerate(block_insns):
        last = run[-1]
        term = last.mnemonic() if _ends_block(last) else "fall"
        blocks.append(BasicBlock(i, run[0].addr, last.end - run[0].addr, term))
    by_start = {b.start: b.id for b in blocks}
    facts = []
    for b, run in zip(blocks, block_insns):
        last = run[-1]
        fall = by_start.get(last.end)
        op = last.op
        if op in (isa.JCC, isa.CHK):
            facts.append((b.id, "jcc", by_start[last.target()], fall, ()))
        elif op == isa.JMP:
            facts.append((b.id, "jmp", by_start[last.target()], None, ()))
        elif op == isa.CALL:
            facts.append((b.id, "call", by_start[last.target()], fall, ()))
        elif op == isa.CALLR:
            facts.append((b.id, "callr", None, fall, tuple(by_start[t] for t in meta.targets_of(last.addr))))
        elif op == isa.JMPR:
            facts.append((b.id, "jmpr", None, None, tuple(by_start[t] for t in meta.targets_of(last.addr))))
        elif op == isa.RET:
            facts.append((b.id, "ret", None, None, ()))
        elif op in (isa.HALT, isa.TRAP):
            facts.append((b.id, "stop", None, None, ()))
        else:
            if fall is None:
                raise CfgError("execution runs off decoded code", last.end)
            facts.append((b.id, "fall", None, fall, ()))
    edges, fentries = edges_from_facts(facts)
    return ControlFlowGraph(tuple(blocks), tuple(edges), by_start[image.entry], fentries)


def edges_from_facts(facts):
    """Typed edges from per-block terminator facts.

    ``facts`` rows are ``(block, kind, direct_target, fall_block, indirect_targets)``
    with kind in jcc/jmp/call/callr/jmpr/ret/stop/fall. Return edges link each
    ``ret`` block to the return sites of every function it can belong to.
    """
    edges = set()
    rets = []
    for b, kind, tgt, fall, ind in facts:
        if kind == "jcc":
            edges.add(Edge(b, tgt, COND_TARGET))
            edges.add(Edge(b, fall, COND_FALL))
        elif kind == "jmp":
            edges.add(Edge(b, tgt, UNCOND))
        elif kind == "fall":
            edges.add(Edge(b, fall, UNCOND))
        elif kind == "call":
            edges.add(Edge(b, tgt, CALL_DIRECT))
            if fall is not None:
                edges.add(Edge(b, fall, CALL_FALL))
        elif kind == "callr":
            edges.update(Edge(b, t, IND_CALL) for t in ind)
            if fall is not None:
                edges.add(Edge(b, fall, CALL_FALL))
        elif kind == "jmpr":
            edges.update(Edge(b, t, IND_JMP) for t in ind)
        elif kind == "ret":
            rets.append(b)
    callers = defaultdict(set)
    for e in edges:
        if e.kind in (CALL_DIRECT, IND_CALL):
            callers[e.dst].add(e.src)
    fall_of = {e.src: e.dst for e in edges if e.kind == CALL_FALL}
    intra = defaultdict(list)
    for e in edges:
        if e.kind in INTRA_KINDS:
            intra[e.src].append(e.dst)
    retset = set(rets)
    for f in sorted(callers):
        seen, stack = {f}, [f]
        while stack:
            x = stack.pop()
            for y in intra[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        sites = [fall_of[c] for c in callers[f] if c in fall_of]
        for r in seen & retset:
            edges.update(Edge(r, s, RETURN) for s in sites)
    return edges, tuple(sorted(callers))


def find_critical_edges(cfg):
    """Edges whose source has >= 2 successors and whose destination has >= 2 predecessors."""
    return {e for e in cfg.edges
            if e.kind not in NON_CANDIDATE and cfg.outdegree(e.src) >= 2 and cfg.indegree(e.dst) >= 2}


def dominators(succ, roots):
    """Immediate dominators over ``succ`` (node -> successors) from a set of roots.

    Iterative Cooper/Harvey/Kennedy. Roots, and nodes only dominated by the
    implicit super-root joining several roots, map to themselves.
    """
    top = object()
    graph = {top: list(roots)}
    graph.update(succ)
    order, seen = [], {top}
    stack = [(top, iter(graph[top]))]
    while stack:
        node, it = stack[-1]
        for nxt in it:
            if nxt not in seen:
                seen.add(nxt)
                stack.append((nxt, iter(graph.get(nxt, ()))))
                break
        else:
            stack.pop()
            order.append(node)
    rpo = order[::-1]
    index = {n: i for i, n in enumerate(rpo)}
    preds = defaultdict(list)
    for n in rpo:
        for m in graph.get(n, ()):
            if m in index:
                preds[m].append(n)
    idom = {top: top}

    def intersect(a, b):
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for n in rpo[1:]:
            new = None
            for p in preds[n]:
                if p in idom:
                    new = p if new is None else intersect(p, new)
            if idom.get(n) != new:
                idom[n] = new
                changed = True
    return {n: (n if d is top else d) for n, d in idom.items() if n is not top}


def compute_dominators(cfg):
    return DomTree(dominators(cfg.intra_succ(), cfg.roots()))


def natural_loops(succ, dom):
    preds = defaultdict(list)
    for a, outs in succ.items():
        for b in outs:
            preds[b].append(a)
    backs = defaultdict(set)
    for a, outs in succ.items():
        if a not in dom.idom:
            continue
        for h in outs:
            if dom.dominates(h, a):
                backs[h].add((a, h))
    loops = set()
    for h, edges in backs.items():
        body = {h}
        stack = [a for a, _ in edges if a != h]
        body.update(stack)
        while stack:
            x = stack.pop()
            for p in preds[x]:
                if p not in body and p in dom.idom:
                    body.add(p)
                    stack.append(p)
        loops.add(Loop(h, frozenset(body), frozenset(edges)))
    return loops


def detect_loops(cfg, dom=None):
    """One natural loop per header; multiple back edges to a header are merged."""
    dom = dom or compute_dominators(cfg)
    return natural_loops(cfg.intra_succ(), dom)


def critical_edge_stats(cfg, trace=None):
    """Static critical-edge counts, plus per-kind shares of critical edges taken by ``trace``."""
    crit = find_critical_edges(cfg)
    static = Counter(e.kind for e in crit)
    dynamic = {}
    if trace:
        pairs = defaultdict(list)
        for e in cfg.edges:
            pairs[(e.src, e.dst)].append(e)
        counts = Counter()
        for a, b in zip(trace, trace[1:]):
            cands = pairs.get((a, b))
            if not cands:
                raise CfgError(f"trace transition {a}->{b} is not a CFG edge")
            hit = [e for e in cands if e in crit]
            if hit:
                counts[min(hit, key=lambda e: EDGE_KINDS.index(e.kind)).kind] += 1
        total = sum(counts.values())
        if total:
            dynamic = {k: v / total for k, v in counts.items()}
    n = len(cfg.edges)
    return CriticalEdgeReport(n, len(crit), len(crit) / n if n else 0.0,
                              {k: static.get(k, 0) for k in EDGE_KINDS if k not in NON_CANDIDATE},
                              dynamic)


def blocks_of_trace(cfg, addrs):
    """Map a sequence of executed block start addresses to block ids."""
    return [cfg.by_start[a] for a in addrs]


def cfg_to_json(cfg, dom=None, loops=None):
    dom = dom or compute_dominators(cfg)
    loops = loops if loops is not None else detect_loops(cfg, dom)
    crit = find_critical_edges(cfg)
    start = {b.id: b.start for b in cfg.blocks}
    return {
        "entry": start[cfg.entry],
        "blocks": [{"id": b.id, "start": b.start, "length": b.length, "terminator": b.terminator}
                   for b in cfg.blocks],
        "edges": [{"src": start[e.src], "dst": start[e.dst], "kind": e.kind, "critical": e in crit}
                  for e in sorted(cfg.edges, key=lambda e: (start[e.src], start[e.dst], e.kind))],
        "functionEntries": [start[f] for f in cfg.function_entries],
        "dominators": {str(start[b]): start[d] for b, d in sorted(dom.idom.items())},
        "loops": [{"header": start[l.header], "body": sorted(start[x] for x in l.body),
                   "backEdges": sorted([start[a], start[b]] for a, b in l.back_edges)}
                  for l in sorted(loops, key=lambda l: start[l.header])],
    }
