import random

import pytest
from hypothesis import given, strategies as st

from cgtrace import isa
from cgtrace.asm import assemble
from cgtrace.gen import GenParams, gen_program, random_inputs
from cgtrace.image import Image
from cgtrace.vm import (ExecConfig, Exit, Fault, Machine, Timeout, Trap, behaviour, execute, interpret,
                        trace_blocks)


def run_src(src, data=b"", **kw):
    img, meta = assemble(src)
    return execute(img, data, ExecConfig(**kw) if kw else None), img, meta


def test_single_halt():
    res, _, _ = run_src("halt")
    assert res.outcome == Exit(0) and res.cycles == 1


def test_single_trap():
    res, img, _ = run_src("trap")
    assert res.outcome == Trap(img.entry)


def test_jump_to_zero_faults_at_entry():
    img = Image(0x1000, 0x1000, isa.encode(isa.JMP, (-0x1005,)))
    res = execute(img, b"")
    assert res.outcome == Fault("segfault", 0, 0x1000)


def test_budget_of_one_times_out():
    res, _, _ = run_src("nop\nhalt", cycle_budget=1)
    assert res.outcome == Timeout() and res.cycles == 1


def test_zero_page_data_access_faults():
    res, _, _ = run_src("main: movi r5, 0\n ldb r0, [r5+16]\n halt")
    assert isinstance(res.outcome, Fault) and res.outcome.addr == 16 and res.outcome.kind == "segfault"


def test_input_past_end_reads_zero():
    res, _, _ = run_src("main: in r1\n in r2\n out r1\n out r2\n halt", b"Z")
    assert res.output == b"Z\x00"


def test_exit_code_is_r0():
    res, _, _ = run_src("main: movi r0, 42\n halt")
    assert res.outcome == Exit(42)


def test_logid_costs_and_dedups():
    src = "main: logid 7\n logid 7\n logid 3\n halt"
    res, _, _ = run_src(src, cycle_budget=1000, logid_cost=20)
    assert res.trace == (7, 3)
    assert res.cycles == 3 * 20 + 1


def test_counter_check_chain():
    # CINC then CHK jumps while the counter is <= the threshold.
    src = """
main:
    movi r1, 0
loop:
    cinc 0
    chk 0, 2, low
    addi r1, 100
low:
    addi r1, 1
    cmpi r1, 5
    jb loop
    mov r0, r1
    halt
"""
    res, _, _ = run_src(src)
    # iterations 1 and 2 take the low path (+1 each), iteration 3 adds 101
    assert res.outcome == Exit(103)


def test_shadow_counters_reset_between_runs():
    img, _ = assemble("main: cinc 0\n chk 0, 1, ok\n movi r0, 9\n halt\nok: halt")
    m = Machine(img)
    assert m.run(b"").outcome == Exit(0)
    assert m.run(b"").outcome == Exit(0)


def test_call_stack_in_results():
    src = "main: call f\n halt\nf: call g\n ret\ng: movi r5, 0\n stb [r5+0], r5\n ret"
    res, img, meta = run_src(src)
    assert isinstance(res.outcome, Fault)
    assert res.call_stack == (meta.labels["main"] + 5, meta.labels["f"] + 5)


def test_trace_blocks_records_leaders():
    src = "main: in r1\n cmpi r1, 1\n je one\n halt\none: halt"
    img, meta = assemble(src)
    res = trace_blocks(img, b"\x01", [meta.labels["main"], meta.labels["one"]])
    assert res.blocks == (meta.labels["main"], meta.labels["one"])


def test_behaviour_ignores_fault_pc():
    a = execute(Image(0x1000, 0x1000, b"\x72"), b"")      # truncated CHK: illegal
    b = execute(Image(0x2000, 0x2000, b"\x72"), b"")
    assert a.outcome != b.outcome and behaviour(a) == behaviour(b)


def results_equal(a, b):
    return (a.outcome, a.cycles, a.trace, a.call_stack, a.output) == (b.outcome, b.cycles, b.trace,
                                                                       b.call_stack, b.output)


@pytest.mark.parametrize("seed", range(25))
def test_kernel_matches_reference_interpreter(seed):
    prog = gen_program(seed, GenParams(n_stmts=5))
    cfg = ExecConfig(4 * prog.cycle_bound + 100)
    m = Machine(prog.image, cfg)
    for data in random_inputs(random.Random(seed), 40, 20):
        assert results_equal(m.run(data), interpret(prog.image, data, cfg))


@given(st.binary(min_size=1, max_size=40), st.binary(max_size=8), st.integers(1, 200))
def test_kernel_matches_interpreter_on_arbitrary_bytes(code, data, budget):
    img = Image(0x1000, 0x1000, code, 0x8000, bytes(16))
    cfg = ExecConfig(budget, logid_cost=3)
    assert results_equal(Machine(img, cfg, n_sites=64).run(data), interpret(img, data, cfg))


def test_exec_config_validation():
    with pytest.raises(ValueError):
        ExecConfig(0)
    with pytest.raises(ValueError):
        ExecConfig(10, logid_cost=0)
