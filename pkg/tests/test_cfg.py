import random
from collections import Counter

import pytest

from cgtrace.asm import assemble
from cgtrace.bench import load_corpus
from cgtrace.cfg import (COND_FALL, COND_TARGET, INDIRECT_KINDS, RETURN, UNCOND, BasicBlock, ControlFlowGraph,
                         Edge, build_cfg, cfg_to_json, compute_dominators, critical_edge_stats, detect_loops,
                         find_critical_edges)
from cgtrace.gen import GenParams, gen_program, random_inputs
from cgtrace.vm import ExecConfig, trace_blocks


def cfg_of(src):
    img, meta = assemble(src)
    return build_cfg(img, meta), meta


def blk(cfg, meta, label):
    return cfg.block_at(meta.labels[label])


def test_straight_line():
    cfg, _ = cfg_of("main: movi r1, 1\n addi r1, 2\n halt")
    assert len(cfg.blocks) == 1 and cfg.edges == ()


DIAMOND = """
a:  in r1
    cmpi r1, 5
    je c
b:  movi r2, 1
    jmp d
c:  movi r2, 2
    jmp d
d:  halt
"""

TRIANGLE = """
a:  in r1
    cmpi r1, 5
    je c
b:  movi r2, 1
c:  halt
"""


def test_diamond_shape():
    cfg, _ = cfg_of(DIAMOND)
    assert len(cfg.blocks) == 4 and len(cfg.edges) == 4
    assert Counter(e.kind for e in cfg.edges) == {COND_TARGET: 1, COND_FALL: 1, UNCOND: 2}
    assert find_critical_edges(cfg) == set()


def test_triangle_taken_edge_is_critical():
    cfg, meta = cfg_of(TRIANGLE)
    a, b, c = (blk(cfg, meta, x) for x in "abc")
    assert find_critical_edges(cfg) == {Edge(a, c, COND_TARGET)}
    assert {(e.src, e.dst) for e in cfg.edges} == {(a, b), (a, c), (b, c)}


def test_dominators_chain_and_diamond():
    cfg, meta = cfg_of("a: in r1\n jmp b\nb: in r2\n jmp c\nc: halt")
    dom = compute_dominators(cfg)
    a, b, c = (blk(cfg, meta, x) for x in "abc")
    assert dom.idom[b] == a and dom.idom[c] == b
    cfg, meta = cfg_of(DIAMOND)
    dom = compute_dominators(cfg)
    assert dom.idom[blk(cfg, meta, "d")] == blk(cfg, meta, "a")


def test_while_loop():
    cfg, meta = cfg_of("main: movi r1, 3\nh: cmpi r1, 0\n je out\nb: subi r1, 1\n jmp h\nout: halt")
    (loop,) = detect_loops(cfg)
    h, b = blk(cfg, meta, "h"), blk(cfg, meta, "b")
    assert loop.header == h and loop.body == {h, b}
    assert loop.back_edges == {(b, h)}


def test_nested_loops_are_contained():
    t = load_corpus(["nested_loops"])[0]
    cfg = build_cfg(t.image, t.meta)
    loops = {cfg.blocks[l.header].start: l for l in detect_loops(cfg)}
    outer, inner = loops[t.label("outer_head")], loops[t.label("inner_head")]
    assert inner.body < outer.body


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_generated_loop_count_is_detected(k):
    for seed in range(10):
        prog = gen_program(seed, GenParams(loops=k))
        assert len(detect_loops(build_cfg(prog.image, prog.meta))) == k == prog.n_loops


def test_no_indirect_edges_without_indirect_templates():
    params = GenParams(n_funcs=0, weights={"indirect": 0, "switch": 0, "call": 0})
    for seed in range(20):
        prog = gen_program(seed, params)
        cfg = build_cfg(prog.image, prog.meta)
        assert not [e for e in cfg.edges if e.kind in INDIRECT_KINDS]


@pytest.mark.parametrize("seed", range(30))
def test_every_dynamic_transition_is_an_edge(seed):
    prog = gen_program(seed)
    cfg = build_cfg(prog.image, prog.meta)
    pairs = {cfg.addr_pair(e) for e in cfg.edges}
    starts = [b.start for b in cfg.blocks]
    for data in random_inputs(random.Random(seed), 30):
        res = trace_blocks(prog.image, data, starts, ExecConfig(4 * prog.cycle_bound))
        assert set(zip(res.blocks, res.blocks[1:])) <= pairs


def synthetic_cfg():
    # 0 -CondTarget-> 2 is critical (0 also falls to 1, 1 joins 2);
    # 3 -Return-> 4 is critical (3 also returns to 5, 6 joins 4).
    edges = [Edge(0, 2, COND_TARGET), Edge(0, 1, COND_FALL), Edge(1, 2, UNCOND), Edge(2, 0, UNCOND),
             Edge(2, 3, UNCOND), Edge(3, 4, RETURN), Edge(3, 5, RETURN), Edge(6, 4, UNCOND)]
    blocks = tuple(BasicBlock(i, 0x1000 + 8 * i, 8, "jmp") for i in range(7))
    return ControlFlowGraph(blocks, tuple(edges), 0)


def test_critical_stats_on_trace():
    cfg = synthetic_cfg()
    rep = critical_edge_stats(cfg, [0, 2, 0, 2, 0, 2, 3, 4])
    assert rep.per_type_dynamic == {COND_TARGET: 0.75, RETURN: 0.25}
    assert rep.critical_edges == 2 and rep.total_edges == 8


def test_critical_stats_empty_trace():
    rep = critical_edge_stats(synthetic_cfg(), [])
    assert rep.per_type_dynamic == {}
    assert rep.per_type_static[COND_TARGET] == 1 and rep.per_type_static[RETURN] == 1


def test_corpus_critical_edges_are_mostly_cond_target():
    total = Counter()
    for t in load_corpus():
        total.update(e.kind for e in find_critical_edges(build_cfg(t.image, t.meta)))
    assert total[COND_TARGET] > sum(total.values()) / 2


def test_cfg_json_shape():
    cfg, meta = cfg_of(TRIANGLE)
    out = cfg_to_json(cfg)
    assert out["entry"] == meta.labels["a"]
    assert sum(e["critical"] for e in out["edges"]) == 1
    assert out["loops"] == []
