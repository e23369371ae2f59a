"""Text assembly <-> images.

Syntax, one statement per line (``;`` starts a comment)::

    .code 0x1000          section switch, optional base
    .data 0x80000
    .entry main           entry label (default: first code address)
    .pin label            extra indirect-reachable address
    main:  in r1
           cmpi r1, 'A'
           jne done
           ldb r2, [r1+buf]
           jmpr r3 [case0, case1]     declared indirect targets ([] or none = all pinned)
    buf:   .zero 16       data: .byte / .word / .zero / .ascii

Addresses that indirect control flow can reach are collected as pinned
targets: call targets, post-call sites, declared indirect targets and any
code label whose address is taken.
"""

import ast
import re
from dataclasses import dataclass, field

from . import isa
from .image import Image

DEFAULT_CODE_BASE = 0x1000
DEFAULT_DATA_BASE = 0x80000

_REG = re.compile(r"^r([0-7])$")
_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*)\s*:(.*)$")
_NAME = re.compile(r"^[A-Za-z_.$][\w.$]*$")

_ALU_RR = {v: k for k, v in isa.ALU_RR.items()}
_ALU_RI = {v: k for k, v in isa.ALU_RI.items()}
_MEM = {v: k for k, v in isa.MEM_OPS.items()}
_COND = {name: i for i, name in enumerate(isa.COND_NAMES)}
_PLAIN = {"nop": isa.NOP, "halt": isa.HALT, "trap": isa.TRAP, "ret": isa.RET}


class AsmError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class AsmModule:
    source: str
    labels: dict
    pinned_targets: frozenset
    # address of each jmpr/callr -> declared target addresses (None = all pinned)
    indirect_targets: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "labels": {k: v for k, v in sorted(self.labels.items(), key=lambda kv: kv[1])},
            "pinnedTargets": sorted(self.pinned_targets),
            "indirectTargets": {str(a): (None if t is None else sorted(t))
                                for a, t in sorted(self.indirect_targets.items())},
        }

    @classmethod
    def from_json(cls, obj, source=""):
        ind = {int(a): (None if t is None else tuple(t))
               for a, t in obj.get("indirectTargets", {}).items()}
        return cls(source, dict(obj.get("labels", {})), frozenset(obj["pinnedTargets"]), ind)

    def targets_of(self, addr):
        t = self.indirect_targets.get(addr)
        return tuple(sorted(self.pinned_targets)) if t is None or not t else tuple(t)


@dataclass
class _Stmt:
    line: int
    kind: str          # "insn" or "data"
    name: str
    ops: list
    extra: list = None  # declared indirect targets
    addr: int = 0
    size: int = 0


def _split_ops(text):
    out, depth, cur = [], 0, ""
    quote = None
    for ch in text:
        if quote:
            cur += ch
            if ch == quote and not cur.endswith("\\" + quote):
                quote = None
            continue
        if ch in "'\"":
            quote = ch
        elif ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _strip_comment(line):
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == ";" or ch == "#":
            return line[:i]
    return line


_SIZES = {}
for _name, _op in list(_PLAIN.items()):
    _SIZES[_name] = isa.LENGTHS[_op]
_SIZES.update({n: 3 for n in _ALU_RR})
_SIZES.update({n: 6 for n in _ALU_RI})
_SIZES.update({n: 7 for n in _MEM})
_SIZES.update({n: isa.JCC_LEN for n in _COND})
_SIZES.update({"movi": 6, "mov": 3, "cmp": 3, "cmpi": 6, "in": 2, "out": 2, "jmp": 5,
               "call": 5, "jmpr": 2, "callr": 2, "logid": 5, "cinc": 3, "chk": isa.CHK_LEN})


def _data_size(stmt):
    if stmt.name == ".byte":
        return len(stmt.ops)
    if stmt.name == ".word":
        return 4 * len(stmt.ops)
    if stmt.name == ".zero":
        return _literal(stmt.ops[0], stmt.line)
    if stmt.name == ".ascii":
        return len(_string(stmt.ops[0], stmt.line))
    raise AsmError(f"unknown directive {stmt.name}", stmt.line)


def _literal(tok, line):
    try:
        return int(tok, 0)
    except ValueError:
        pass
    if len(tok) >= 3 and tok[0] == tok[-1] == "'":
        s = ast.literal_eval(tok)
        if len(s) == 1:
            return ord(s)
    raise AsmError(f"bad number {tok!r}", line)


def _string(tok, line):
    try:
        s = ast.literal_eval(tok)
    except (ValueError, SyntaxError):
        raise AsmError(f"bad string {tok!r}", line) from None
    if not isinstance(s, str):
        raise AsmError(f"bad string {tok!r}", line)
    return s.encode("latin-1")


class _Assembler:
    def __init__(self, source):
        self.source = source
        self.code = []
        self.data = []
        self.labels = {}
        self.label_section = {}
        self.code_base = None
        self.data_base = None
        self.entry = None
        self.pins = []
        self.taken = set()

    def parse(self):
        section = "code"
        for no, raw in enumerate(self.source.splitlines(), 1):
            text = _strip_comment(raw).strip()
            while text:
                m = _LABEL.match(text)
                if not m or text.startswith("."):
                    break
                name = m.group(1)
                if name in self.label_section:
                    raise AsmError(f"duplicate label {name!r}", no)
                self.label_section[name] = (section, len(self.code if section == "code" else self.data), no)
                text = m.group(2).strip()
            if not text:
                continue
            head, _, rest = text.partition(" ")
            head = head.strip().lower()
            rest = rest.strip()
            if head in (".code", ".data"):
                section = head[1:]
                if rest:
                    base = _literal(rest, no)
                    if section == "code":
                        self.code_base = base
                    else:
                        self.data_base = base
                continue
            if head == ".entry":
                self.entry = (rest, no)
                continue
            if head == ".pin":
                self.pins.extend((p.strip(), no) for p in rest.split(","))
                continue
            if head.startswith("."):
                stmt = _Stmt(no, "data", head, _split_ops(rest))
                (self.code if section == "code" else self.data).append(stmt)
                continue
            if section != "code":
                raise AsmError("instruction outside .code", no)
            extra = None
            if head in ("jmpr", "callr") and "[" in rest:
                reg, _, tail = rest.partition("[")
                rest = reg.strip()
                tail = tail.rstrip().rstrip("]")
                extra = [t.strip() for t in tail.split(",") if t.strip()]
            if head not in _SIZES:
                raise AsmError(f"unknown mnemonic {head!r}", no)
            self.code.append(_Stmt(no, "insn", head, _split_ops(rest), extra))

    def layout(self):
        addr = DEFAULT_CODE_BASE if self.code_base is None else self.code_base
        self.code_base = addr
        for st in self.code:
            st.addr = addr
            st.size = _SIZES[st.name] if st.kind == "insn" else _data_size(st)
            addr += st.size
        code_end = addr
        if self.data_base is None:
            self.data_base = max(DEFAULT_DATA_BASE, (code_end * 5 + 0xFFFF) & ~0xFFFF)
        addr = self.data_base
        for st in self.data:
            st.addr = addr
            st.size = _data_size(st)
            addr += st.size
        data_end = addr
        for name, (section, idx, _) in self.label_section.items():
            stmts = self.code if section == "code" else self.data
            if idx < len(stmts):
                self.labels[name] = stmts[idx].addr
            else:
                self.labels[name] = code_end if section == "code" else data_end
        self.code_end = code_end

    def value(self, tok, line):
        tok = tok.strip()
        m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*([+-])\s*(.+)$", tok)
        if m and m.group(1) in self.labels:
            off = _literal(m.group(3), line)
            base = self.labels[m.group(1)]
            self._note_taken(base)
            return (base + off if m.group(2) == "+" else base - off) & isa.MASK32
        if _NAME.match(tok) and not _REG.match(tok):
            if tok not in self.labels:
                raise AsmError(f"undefined label {tok!r}", line)
            self._note_taken(self.labels[tok])
            return self.labels[tok]
        return _literal(tok, line) & isa.MASK32

    def _note_taken(self, addr):
        if self.code_base <= addr < self.code_end:
            self.taken.add(addr)

    def target(self, tok, line):
        tok = tok.strip()
        if _NAME.match(tok):
            if tok not in self.labels:
                raise AsmError(f"undefined label {tok!r}", line)
            return self.labels[tok]
        return _literal(tok, line)

    def reg(self, tok, line):
        m = _REG.match(tok.strip().lower())
        if not m:
            raise AsmError(f"expected register, got {tok!r}", line)
        return int(m.group(1))

    def mem(self, tok, line):
        tok = tok.strip()
        if not (tok.startswith("[") and tok.endswith("]")):
            raise AsmError(f"expected memory operand, got {tok!r}", line)
        inner = tok[1:-1].strip()
        m = re.match(r"^(r[0-7])\s*(?:([+-])\s*(.+))?$", inner)
        if m:
            base = int(m.group(1)[1])
            off = 0
            if m.group(3):
                off = self.value(m.group(3), line)
                if m.group(2) == "-":
                    off = -off & isa.MASK32
            return base, off
        return isa.NO_BASE, self.value(inner, line)

    def disp(self, target, end, line):
        d = target - end
        if not -(1 << 31) <= d < (1 << 31):
            raise AsmError("displacement overflow", line)
        return d

    def encode_insn(self, st):
        n, ops, line = st.name, st.ops, st.line

        def need(k):
            if len(ops) != k:
                raise AsmError(f"{n} expects {k} operand(s)", line)

        end = st.addr + st.size
        if n in _PLAIN:
            need(0)
            return isa.encode(_PLAIN[n], ())
        if n in ("movi", "cmpi") or n in _ALU_RI:
            need(2)
            op = {"movi": isa.MOVI, "cmpi": isa.CMPI}.get(n) or _ALU_RI[n]
            return isa.encode(op, (self.reg(ops[0], line), self.value(ops[1], line)))
        if n in ("mov", "cmp") or n in _ALU_RR:
            need(2)
            op = {"mov": isa.MOV, "cmp": isa.CMP}.get(n) or _ALU_RR[n]
            return isa.encode(op, (self.reg(ops[0], line), self.reg(ops[1], line)))
        if n in _MEM:
            need(2)
            if n.startswith("ld"):
                r, (b, off) = self.reg(ops[0], line), self.mem(ops[1], line)
            else:
                (b, off), r = self.mem(ops[0], line), self.reg(ops[1], line)
            return isa.encode(_MEM[n], (r, b, off))
        if n in ("in", "out", "jmpr", "callr"):
            need(1)
            op = {"in": isa.IN, "out": isa.OUT, "jmpr": isa.JMPR, "callr": isa.CALLR}[n]
            return isa.encode(op, (self.reg(ops[0], line),))
        if n in _COND:
            need(1)
            return isa.encode(isa.JCC, (_COND[n], self.disp(self.target(ops[0], line), end, line)))
        if n in ("jmp", "call"):
            need(1)
            op = isa.JMP if n == "jmp" else isa.CALL
            return isa.encode(op, (self.disp(self.target(ops[0], line), end, line),))
        if n == "logid":
            need(1)
            return isa.encode(isa.LOGID, (self.value(ops[0], line),))
        if n == "cinc":
            need(1)
            return isa.encode(isa.CINC, (_literal(ops[0], line),))
        if n == "chk":
            need(3)
            return isa.encode(isa.CHK, (_literal(ops[0], line), self.value(ops[1], line),
                                        self.disp(self.target(ops[2], line), end, line)))
        raise AsmError(f"unknown mnemonic {n!r}", line)  # pragma: no cover

    def encode_data(self, st):
        if st.name == ".byte":
            return bytes(self.value(t, st.line) & 0xFF for t in st.ops)
        if st.name == ".word":
            return b"".join(self.value(t, st.line).to_bytes(4, "little") for t in st.ops)
        if st.name == ".zero":
            return bytes(st.size)
        return _string(st.ops[0], st.line)

    def build(self):
        self.parse()
        self.layout()
        code = bytearray()
        pinned = set()
        indirect = {}
        for st in self.code:
            blob = self.encode_insn(st) if st.kind == "insn" else self.encode_data(st)
            assert len(blob) == st.size
            code += blob
            if st.kind != "insn":
                continue
            if st.name in ("call", "callr"):
                pinned.add(st.addr + st.size)
            if st.name == "call":
                pinned.add(self.target(st.ops[0], st.line))
            if st.name in ("jmpr", "callr"):
                if st.extra:
                    tgts = tuple(sorted({self.target(t, st.line) for t in st.extra}))
                    pinned.update(tgts)
                    indirect[st.addr] = tgts
                else:
                    indirect[st.addr] = None
        data = bytearray()
        for st in self.data:
            data += self.encode_data(st)
        for name, line in self.pins:
            pinned.add(self.target(name, line))
        pinned |= self.taken
        if self.entry is not None:
            entry = self.target(*self.entry)
        else:
            entry = self.code_base
        pinned = {p for p in pinned if self.code_base <= p < self.code_end}
        img = Image(entry, self.code_base, bytes(code), self.data_base, bytes(data))
        return img, AsmModule(self.source, dict(self.labels), frozenset(pinned), indirect)


def assemble(source):
    """Assemble ``source``; returns ``(Image, AsmModule)``."""
    return _Assembler(source).build()


def render(ins):
    """One instruction in assembler syntax, with absolute branch targets."""
    m = ins.mnemonic()
    a = ins.args
    op = ins.op
    if op in (isa.NOP, isa.HALT, isa.TRAP, isa.RET):
        return m
    if op in (isa.MOVI, isa.CMPI) or op in isa.ALU_RI:
        return f"{m} r{a[0]}, {a[1]:#x}"
    if op in (isa.MOV, isa.CMP) or op in isa.ALU_RR:
        return f"{m} r{a[0]}, r{a[1]}"
    if op in isa.MEM_OPS:
        memop = f"[{a[2]:#x}]" if a[1] == isa.NO_BASE else f"[r{a[1]}+{a[2]:#x}]"
        return f"{m} r{a[0]}, {memop}" if op in (isa.LDB, isa.LDW) else f"{m} {memop}, r{a[0]}"
    if op in (isa.IN, isa.OUT, isa.JMPR, isa.CALLR):
        return f"{m} r{a[0]}"
    if op in (isa.JCC, isa.JMP, isa.CALL):
        return f"{m} {ins.target():#x}"
    if op == isa.LOGID:
        return f"{m} {a[0]}"
    if op == isa.CINC:
        return f"{m} {a[0]}"
    if op == isa.CHK:
        return f"{m} {a[0]}, {a[1]}, {ins.target():#x}"
    return m


def disassemble(image, meta=None, starts=()):
    """Listing of ``image`` that reassembles to the same bytes.

    Decoding is a linear sweep that re-synchronises at the entry, every pinned
    target and any extra ``starts``. Undecodable bytes become ``.byte`` lines.
    """
    anchors = {image.entry, *starts}
    if meta is not None:
        anchors |= set(meta.pinned_targets)
    anchors = sorted(a for a in anchors if image.in_code(a))
    lines = [f".code {image.code_base:#x}", f".entry {image.entry:#x}"]
    pos = image.code_base
    i = 0
    while pos < image.code_end:
        while i < len(anchors) and anchors[i] < pos:
            i += 1
        nxt_anchor = anchors[i] if i < len(anchors) else None
        try:
            ins = isa.decode(image.code, pos - image.code_base, image.code_base)
        except isa.DecodeError:
            ins = None
        if ins is not None and nxt_anchor is not None and pos < nxt_anchor < ins.end:
            ins = None
        if ins is None:
            lines.append(f"    .byte {image.code[pos - image.code_base]:#04x}    ; {pos:#x}")
            pos += 1
            continue
        text = render(ins)
        if meta is not None and ins.op in (isa.JMPR, isa.CALLR) and meta.indirect_targets.get(ins.addr):
            text += " [" + ", ".join(f"{t:#x}" for t in meta.indirect_targets[ins.addr]) + "]"
        lines.append(f"    {text:<32}; {pos:#x}")
        pos = ins.end
    if image.data:
        lines.append(f".data {image.data_base:#x}")
        for off in range(0, len(image.data), 16):
            chunk = image.data[off:off + 16]
            lines.append("    .byte " + ", ".join(f"{b:#04x}" for b in chunk))
    return "\n".join(lines) + "\n"


def mnemonics(listing):
    """Instruction mnemonics of a source or listing, in order (labels/directives skipped)."""
    out = []
    for raw in listing.splitlines():
        text = _strip_comment(raw).strip()
        while True:
            m = _LABEL.match(text)
            if not m or text.startswith("."):
                break
            text = m.group(2).strip()
        if text and not text.startswith("."):
            out.append(text.split()[0].lower())
    return out
