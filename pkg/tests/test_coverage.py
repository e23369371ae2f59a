import random

import pytest

from cgtrace.asm import assemble
from cgtrace.bench import load_corpus
from cgtrace.cfg import CALL_FALL, COND_TARGET, INDIRECT_KINDS
from cgtrace.coverage import Reference, dynamic_degrees, infer_edges, loop_progress
from cgtrace.gen import random_inputs
from cgtrace.transform import build_pair

TRIANGLE = """
a:  in r1
    cmpi r1, 5
    je c
b:  movi r2, 1
c:  mov r0, r2
    halt
"""


def triangle():
    img, meta = assemble(TRIANGLE)
    return build_pair(img, meta, "full"), meta


def test_reference_on_triangle():
    b, meta = triangle()
    ref = Reference(b)
    fall, taken = ref.observe(b"\x04"), ref.observe(b"\x05")
    assert fall.blocks == (meta.labels["a"], meta.labels["b"], meta.labels["c"])
    assert len(fall.edges) == 2 and len(taken.edges) == 1
    (e,) = taken.edges
    assert e.kind == COND_TARGET
    assert len(fall.sites) == 3 and len(taken.sites) == 3      # two heads plus the mistargeted edge


def test_inferred_edges_match_exact_on_triangle():
    b, _ = triangle()
    ref = Reference(b)
    for inputs in ([b"\x04"], [b"\x05"], [b"\x04", b"\x05"]):
        obs = [ref.observe(d) for d in inputs]
        got, unknown = infer_edges(b, set().union(*(o.sites for o in obs)))
        assert not unknown and got == set().union(*(o.edges for o in obs))


def test_block_policy_leaves_critical_edge_undecided():
    img, meta = assemble(TRIANGLE)
    b = build_pair(img, meta, "block")
    ref = Reference(b)
    _, unknown = infer_edges(b, ref.observe(b"\x04").sites)
    assert [e.kind for e in unknown] == [COND_TARGET]


@pytest.mark.parametrize("name", ["checksum", "diamonds", "fallcrit", "nested_loops", "parser",
                                  "triangles"])
def test_full_policy_infers_exact_edges_on_corpus(name):
    t = load_corpus([name])[0]
    b = t.build("full")
    ref = Reference(b)
    sites, edges = set(), set()
    for data in list(t.seeds) + random_inputs(random.Random(1), 60, 16):
        o = ref.observe(data)
        sites |= o.sites
        edges |= o.edges
    got, unknown = infer_edges(b, sites)
    assert not unknown and got == edges


def test_indirect_critical_edges_stay_undecided():
    t = load_corpus(["calls"])[0]
    b = t.build("full")
    ref = Reference(b)
    sites, edges = set(), set()
    for data in list(t.seeds) + random_inputs(random.Random(1), 60, 16):
        o = ref.observe(data)
        sites |= o.sites
        edges |= o.edges
    got, unknown = infer_edges(b, sites)
    assert unknown and all(e.kind in INDIRECT_KINDS for e in unknown)
    assert got <= edges <= got | unknown


def test_entry_gets_an_extra_incoming_edge():
    b, _ = triangle()
    _, inn = dynamic_degrees(b.cfg)
    assert inn[b.cfg.entry] == 1


def test_call_fall_edges_are_never_inferred():
    t = load_corpus(["calls"])[0]
    b = t.build("full")
    got, unknown = infer_edges(b, set(range(b.n_sites)))
    assert not [e for e in got | unknown if e.kind == CALL_FALL]


def test_loop_progress_and_counts():
    t = load_corpus(["checksum"])[0]
    b = t.build("full")
    ref = Reference(b)
    head = t.label("next")
    # the header runs once per byte read, the terminating zero included
    for n, want in ((0, 0), (1, 1), (4, 3), (10, 4)):
        o = ref.observe(b"x" * n + b"\x00")
        assert loop_progress(b.sites, o.sites)[head] == want, (n, o.counts)
