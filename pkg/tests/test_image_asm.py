import struct

import pytest
from hypothesis import given, strategies as st

from cgtrace import isa
from cgtrace.asm import AsmError, assemble, disassemble, mnemonics
from cgtrace.bench import CORPUS_DIR
from cgtrace.gen import gen_program
from cgtrace.image import (Image, ImageFormatError, PatchRangeError, apply_patch, load_image,
                           serialize)
from cgtrace.vm import Exit, execute

images = st.builds(
    lambda code, off, data, gap: Image(0x1000 + off % len(code), 0x1000, code,
                                       (0x1000 + len(code) + gap) if data else 0, data),
    st.binary(min_size=1, max_size=64), st.integers(0, 1000), st.binary(max_size=32), st.integers(0, 4096))


# -- image -----------------------------------------------------------------

@given(images)
def test_serialize_round_trip(img):
    assert load_image(serialize(img)) == img


def test_header_layout_is_little_endian():
    img = Image(0x1002, 0x1000, b"\x00\x00\x01", 0x2000, b"ab")
    raw = serialize(img)
    assert raw[:4] == b"HXCI"
    assert struct.unpack_from("<HIH", raw, 4) == (1, 0x1002, 2)
    assert struct.unpack_from("<IIB", raw, 12) == (0x1000, 3, 0)
    assert raw.endswith(b"\x00\x00\x01ab")


def test_entry_in_zero_page_is_rejected():
    raw = bytearray(serialize(Image(0x1000, 0x1000, b"\x01")))
    struct.pack_into("<I", raw, 6, 0)
    with pytest.raises(ImageFormatError, match="entry in unmapped page"):
        load_image(bytes(raw))


def test_truncated_section_table_reports_offset():
    raw = serialize(Image(0x1000, 0x1000, b"\x01"))
    with pytest.raises(ImageFormatError) as exc:
        load_image(raw[:14])
    assert exc.value.offset == 12


@pytest.mark.parametrize("raw, msg", [(b"XXXX" + bytes(8), "bad magic"), (b"HX", "truncated header")])
def test_malformed_headers(raw, msg):
    with pytest.raises(ImageFormatError, match=msg):
        load_image(raw)


def test_patch_restore_identity():
    img = Image(0x1000, 0x1000, bytes(range(16)))
    patched, saved = apply_patch(img, 0x1004, b"\xcc")
    assert patched.code[4] == 0xCC and saved == b"\x04"
    assert apply_patch(patched, 0x1004, saved)[0] == img


def test_patch_range_boundary():
    img = Image(0x1000, 0x1000, bytes(8))
    apply_patch(img, img.code_end - 1, b"\xcc")
    with pytest.raises(PatchRangeError):
        apply_patch(img, img.code_end - 1, b"\xcc\xcc")


@given(st.integers(0, 15), st.integers(0, 15), st.binary(min_size=1, max_size=1), st.binary(min_size=1, max_size=1))
def test_disjoint_patches_commute(a, b, pa, pb):
    if a == b:
        return
    img = Image(0x1000, 0x1000, bytes(16))
    one = apply_patch(apply_patch(img, 0x1000 + a, pa)[0], 0x1000 + b, pb)[0]
    two = apply_patch(apply_patch(img, 0x1000 + b, pb)[0], 0x1000 + a, pa)[0]
    assert one == two


# -- isa -------------------------------------------------------------------

insns = st.one_of(
    st.tuples(st.just(isa.MOVI), st.tuples(st.integers(0, 7), st.integers(0, isa.MASK32))),
    st.tuples(st.sampled_from(sorted(isa.ALU_RR)), st.tuples(st.integers(0, 7), st.integers(0, 7))),
    st.tuples(st.sampled_from(sorted(isa.MEM_OPS)),
              st.tuples(st.integers(0, 7), st.sampled_from([0, 3, isa.NO_BASE]), st.integers(0, isa.MASK32))),
    st.tuples(st.just(isa.JCC), st.tuples(st.integers(0, 7), st.integers(-2 ** 31, 2 ** 31 - 1))),
    st.tuples(st.just(isa.CHK), st.tuples(st.integers(0, 255), st.integers(0, isa.MASK32),
                                          st.integers(-2 ** 31, 2 ** 31 - 1))),
    st.tuples(st.just(isa.LOGID), st.tuples(st.integers(0, isa.MASK32))),
)


@given(insns)
def test_encode_decode_round_trip(insn):
    op, args = insn
    raw = isa.encode(op, args)
    assert len(raw) == isa.LENGTHS[op]
    d = isa.decode(raw, 0, 0x1000)
    assert (d.op, d.args, d.length) == (op, args, len(raw))


def test_illegal_opcode():
    with pytest.raises(isa.DecodeError):
        isa.decode(b"\xff", 0, 0x1000)


# -- assembler -------------------------------------------------------------

def test_halt_only_program():
    img, _ = assemble("halt")
    assert img.code == bytes([isa.HALT])
    res = execute(img, b"")
    assert res.outcome == Exit(0) and res.cycles == 1


def test_forward_branch_displacement():
    img, meta = assemble(".code\n.entry main\nmain:\n cmpi r1, 2\n jle L\n nop\n nop\nL: halt\n")
    jcc_addr = meta.labels["main"] + 6
    ins = isa.decode(img.code, jcc_addr - img.code_base, img.code_base)
    d = ins.args[1]
    assert ins.op == isa.JCC and meta.labels["L"] == jcc_addr + 6 + d


def test_undefined_label_is_named():
    with pytest.raises(AsmError, match="nowhere"):
        assemble("main:\n jmp nowhere\n")


def test_literals_and_comments():
    img, _ = assemble("main: movi r1, 'A' ; a char\n # a full-line comment\n out r1\n halt\n")
    assert execute(img, b"").output == b"A"


def test_garbage_byte_disassembles_as_byte_directive():
    img = Image(0x1000, 0x1000, b"\x01\xff")
    assert ".byte 0xff" in disassemble(img).lower()


def corpus_sources():
    return [p.read_text() for p in sorted(CORPUS_DIR.glob("*.s"))]


@pytest.mark.parametrize("src", corpus_sources() + [gen_program(s).source for s in range(20)])
def test_disassembly_round_trips(src):
    img, meta = assemble(src)
    listing = disassemble(img, meta)
    assert mnemonics(listing) == mnemonics(src)
    again, _ = assemble(listing)
    assert again.code == img.code and again.entry == img.entry


def test_metadata_pins_address_taken_labels():
    src = ".code\n.entry main\nmain:\n movi r4, f\n callr r4 [f]\n halt\nf: ret\n"
    _, meta = assemble(src)
    f = meta.labels["f"]
    assert f in meta.pinned_targets
    assert meta.labels["main"] + 6 + 2 in meta.pinned_targets     # the call's return site
