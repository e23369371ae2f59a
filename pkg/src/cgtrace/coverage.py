"""Reference coverage and edge inference.

``Reference`` runs the *original* program with block-entry recording and says
which sites of a build an input ought to reach: the block heads entered, the
split or mistargeted edges taken, and the loop buckets crossed. It shares no
code with the oracle/tracer pair beyond the VM, so it is the yardstick the
pair is checked against.

``infer_edges`` turns a covered-site set back into covered CFG edges.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .cfg import CALL_FALL
from .transform import (BLOCK_HEAD, BUCKET_CHECK, DUMMY_BLOCK, MISTARGETED_EDGE,
                        bucket_index)
from .vm import ExecConfig, Machine


@dataclass(frozen=True)
class Observation:
    result: object              # ExecResult of the original program
    blocks: tuple               # block start addresses in execution order
    sites: frozenset            # site ids the input reaches
    edges: frozenset            # CFG edges traversed
    counts: dict                # loop header -> header executions in this run


class SiteIndex:
    """Lookups from original-program facts to site ids of one build."""

    def __init__(self, sites):
        self.head, self.edge, self.bucket = {}, {}, {}
        for sid, k in enumerate(sites):
            if k.name == BLOCK_HEAD:
                self.head[k.addr] = sid
            elif k.name in (DUMMY_BLOCK, MISTARGETED_EDGE):
                self.edge[(k.addr, k.dst)] = sid
            elif k.name == BUCKET_CHECK:
                self.bucket[(k.addr, k.bucket)] = sid
        self.headers = sorted({h for h, _ in self.bucket})


class Reference:
    def __init__(self, build, exec_cfg=None):
        self.build = build
        self.cfg = build.cfg
        self.index = SiteIndex(build.sites)
        self.machine = Machine(build.image, exec_cfg or ExecConfig(cycle_budget=1_000_000))
        img = build.image
        self.leaders = np.zeros(len(img.code), dtype=np.uint8)
        for b in self.cfg.blocks:
            self.leaders[b.start - img.code_base] = 1
        self.pair_edges = {}
        for e in self.cfg.edges:
            if e.kind != CALL_FALL:
                self.pair_edges.setdefault(self.cfg.addr_pair(e), []).append(e)

    def observe(self, data):
        res = self.machine.run(data, leaders=self.leaders)
        blocks = res.blocks
        ix = self.index
        sites = {ix.head[a] for a in set(blocks) if a in ix.head}
        edges = set()
        for pair in set(zip(blocks, blocks[1:])):
            edges.update(self.pair_edges.get(pair, ()))
            if pair in ix.edge:
                sites.add(ix.edge[pair])
        hits = Counter(blocks)
        counts = {h: hits.get(h, 0) for h in ix.headers}
        for h, n in counts.items():
            for k in range(1, bucket_index(n) + 1):
                sites.add(ix.bucket[(h, k)])
        return Observation(res, tuple(blocks), frozenset(sites), frozenset(edges), counts)


def dynamic_degrees(cfg):
    """Out/in degrees over edges that are real transfers (call fall-through excluded).

    The program entry gets one extra incoming edge standing for the start of execution.
    """
    out, inn = Counter(), Counter()
    for e in cfg.edges:
        if e.kind != CALL_FALL:
            out[e.src] += 1
            inn[e.dst] += 1
    inn[cfg.entry] += 1
    return out, inn


def infer_edges(build, covered):
    """Covered CFG edges implied by ``covered`` site ids.

    Returns ``(covered_edges, unknown_edges)``. An edge with its own site is
    covered iff that site is. Otherwise a sole successor or sole predecessor
    edge is covered iff its covered block is. The rest cannot be decided.
    """
    cfg = build.cfg
    ix = SiteIndex(build.sites)
    out, inn = dynamic_degrees(cfg)
    start = {b.id: b.start for b in cfg.blocks}

    def block_covered(b):
        sid = ix.head.get(start[b])
        return sid is not None and sid in covered

    got, unknown = set(), set()
    for e in cfg.edges:
        if e.kind == CALL_FALL:
            continue
        pair = (start[e.src], start[e.dst])
        if pair in ix.edge:
            hit = ix.edge[pair] in covered
        elif out[e.src] == 1:
            hit = block_covered(e.src)
        elif inn[e.dst] == 1:
            hit = block_covered(e.dst)
        else:
            unknown.add(e)
            continue
        if hit:
            got.add(e)
    return got, unknown


def loop_progress(sites, covered):
    """Loop header -> highest bucket whose check site is covered (0 if none)."""
    prog = {}
    for sid, k in enumerate(sites):
        if k.name == BUCKET_CHECK:
            prog.setdefault(k.addr, 0)
            if sid in covered:
                prog[k.addr] = max(prog[k.addr], k.bucket)
    return prog


__all__ = ["Observation", "SiteIndex", "Reference", "dynamic_degrees", "infer_edges",
           "loop_progress"]
