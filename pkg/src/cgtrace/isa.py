"""Instruction set of the target machine.

All multi-byte operands are little-endian. Direct branches are PC-relative:
the resolved target is ``pc + length + disp`` with ``disp`` a signed 32-bit
value. Opcode 0xCC is TRAP wherever it appears.
"""

import struct
from dataclasses import dataclass

ZERO_PAGE_END = 0x1000
MASK32 = 0xFFFFFFFF
NO_BASE = 0xFF  # base-register byte meaning "absolute address"
NUM_REGS = 8

NOP = 0x00
HALT = 0x01
MOVI = 0x10
MOV = 0x11
ADD, SUB, AND, OR, XOR, MUL, SHL, SHR = range(0x20, 0x28)
ADDI, SUBI, ANDI, ORI, XORI, MULI, SHLI, SHRI = range(0x28, 0x30)
CMP = 0x30
CMPI = 0x31
LDB, LDW, STB, STW = range(0x40, 0x44)
IN = 0x50
OUT = 0x51
JCC = 0x60
JMP = 0x61
CALL = 0x62
RET = 0x63
JMPR = 0x64
CALLR = 0x65
LOGID = 0x70
CINC = 0x71
CHK = 0x72
TRAP = 0xCC

JCC_LEN = 6
JMP_LEN = 5
CALL_LEN = 5
CHK_LEN = 11
LOGID_LEN = 5

# condition codes for JCC
EQ, NE, LT, LE, GT, GE, B, AE = range(8)
COND_NAMES = ["je", "jne", "jl", "jle", "jg", "jge", "jb", "jae"]

ALU_RR = {ADD: "add", SUB: "sub", AND: "and", OR: "or", XOR: "xor",
          MUL: "mul", SHL: "shl", SHR: "shr"}
ALU_RI = {ADDI: "addi", SUBI: "subi", ANDI: "andi", ORI: "ori", XORI: "xori",
          MULI: "muli", SHLI: "shli", SHRI: "shri"}
MEM_OPS = {LDB: "ldb", LDW: "ldw", STB: "stb", STW: "stw"}

# opcode -> encoded length
LENGTHS = {
    NOP: 1, HALT: 1, TRAP: 1, RET: 1,
    MOVI: 6, MOV: 3, CMP: 3, CMPI: 6,
    IN: 2, OUT: 2, JMPR: 2, CALLR: 2,
    JCC: JCC_LEN, JMP: JMP_LEN, CALL: CALL_LEN,
    LOGID: LOGID_LEN, CINC: 3, CHK: CHK_LEN,
}
LENGTHS.update({op: 3 for op in ALU_RR})
LENGTHS.update({op: 6 for op in ALU_RI})
LENGTHS.update({op: 7 for op in MEM_OPS})

# block terminators
BRANCHES = {JCC, JMP, CALL, RET, JMPR, CALLR, HALT, TRAP}
DIRECT = {JCC, JMP, CALL, CHK}


@dataclass(frozen=True)
class Insn:
    """A decoded instruction. ``args`` holds raw operand fields in encoding order."""

    addr: int
    op: int
    args: tuple
    length: int

    @property
    def end(self):
        return self.addr + self.length

    def target(self):
        """Resolved direct branch target, or None."""
        if self.op in (JCC, JMP, CALL, CHK):
            return (self.end + self.args[-1]) & MASK32
        return None

    @property
    def is_terminator(self):
        return self.op in BRANCHES

    def mnemonic(self):
        if self.op == JCC:
            return COND_NAMES[self.args[0]]
        return MNEMONICS.get(self.op, "?")


MNEMONICS = {NOP: "nop", HALT: "halt", TRAP: "trap", RET: "ret", MOVI: "movi",
             MOV: "mov", CMP: "cmp", CMPI: "cmpi", IN: "in", OUT: "out",
             JMPR: "jmpr", CALLR: "callr", JMP: "jmp", CALL: "call",
             LOGID: "logid", CINC: "cinc", CHK: "chk"}
MNEMONICS.update(ALU_RR)
MNEMONICS.update(ALU_RI)
MNEMONICS.update(MEM_OPS)


class DecodeError(ValueError):
    def __init__(self, addr, message):
        super().__init__(f"{message} at {addr:#x}")
        self.addr = addr


def decode(code, offset, base):
    """Decode one instruction from ``code[offset:]`` located at ``base + offset``."""
    addr = base + offset
    if offset < 0 or offset >= len(code):
        raise DecodeError(addr, "address outside code")
    op = code[offset]
    n = LENGTHS.get(op)
    if n is None:
        raise DecodeError(addr, f"illegal opcode {op:#04x}")
    if offset + n > len(code):
        raise DecodeError(addr, "truncated instruction")
    raw = bytes(code[offset + 1:offset + n])
    if op in (NOP, HALT, TRAP, RET):
        args = ()
    elif op in (MOVI, CMPI) or op in ALU_RI:
        args = (raw[0], struct.unpack_from("<I", raw, 1)[0])
    elif op in (MOV, CMP) or op in ALU_RR:
        args = (raw[0], raw[1])
    elif op in MEM_OPS:
        # loads: (rd, base, imm)   stores: (rs, base, imm)
        args = (raw[0], raw[1], struct.unpack_from("<I", raw, 2)[0])
    elif op in (IN, OUT, JMPR, CALLR):
        args = (raw[0],)
    elif op == JCC:
        args = (raw[0], struct.unpack_from("<i", raw, 1)[0])
    elif op in (JMP, CALL):
        args = (struct.unpack_from("<i", raw, 0)[0],)
    elif op == LOGID:
        args = (struct.unpack_from("<I", raw, 0)[0],)
    elif op == CINC:
        args = (struct.unpack_from("<H", raw, 0)[0],)
    elif op == CHK:
        slot, thr, disp = struct.unpack_from("<HIi", raw, 0)
        args = (slot, thr, disp)
    else:  # pragma: no cover - LENGTHS and this table agree
        raise DecodeError(addr, f"illegal opcode {op:#04x}")
    if op in (MOVI, CMPI, MOV, CMP, IN, OUT, JMPR, CALLR) or op in ALU_RI or op in ALU_RR:
        regs = args if op in (MOV, CMP) or op in ALU_RR else args[:1]
        if any(r >= NUM_REGS for r in regs):
            raise DecodeError(addr, "bad register")
    if op in MEM_OPS and (args[0] >= NUM_REGS or (args[1] >= NUM_REGS and args[1] != NO_BASE)):
        raise DecodeError(addr, "bad register")
    if op == JCC and args[0] >= len(COND_NAMES):
        raise DecodeError(addr, "bad condition")
    return Insn(addr, op, args, n)


def encode(op, args):
    """Encode an instruction from its opcode and raw operand fields."""
    if op in (NOP, HALT, TRAP, RET):
        return bytes([op])
    if op in (MOVI, CMPI) or op in ALU_RI:
        return struct.pack("<BBI", op, args[0], args[1] & MASK32)
    if op in (MOV, CMP) or op in ALU_RR:
        return bytes([op, args[0], args[1]])
    if op in MEM_OPS:
        return struct.pack("<BBBI", op, args[0], args[1], args[2] & MASK32)
    if op in (IN, OUT, JMPR, CALLR):
        return bytes([op, args[0]])
    if op == JCC:
        return struct.pack("<BBi", op, args[0], args[1])
    if op in (JMP, CALL):
        return struct.pack("<Bi", op, args[0])
    if op == LOGID:
        return struct.pack("<BI", op, args[0])
    if op == CINC:
        return struct.pack("<BH", op, args[0])
    if op == CHK:
        return struct.pack("<BHIi", op, args[0], args[1], args[2])
    raise ValueError(f"unknown opcode {op:#x}")


def rel32(disp):
    """Wrap an integer displacement into the signed 32-bit range."""
    disp &= MASK32
    return disp - (1 << 32) if disp & 0x80000000 else disp
