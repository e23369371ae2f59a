"""Block-level IR and the relocating emitter.

A lifted program is an ordered list of IR blocks whose direct branches name
their targets symbolically. Emission lays the blocks out in a fresh region
after the original code and leaves a jump at every pinned address, so
indirect transfers through original addresses keep working. A pinned block
with less than a jump's worth of room before the next pinned address cannot
host a trampoline; it is kept verbatim at its original address ("frozen")
and cannot be instrumented.
"""

from dataclasses import dataclass, field

from . import isa
from .cfg import ControlFlowGraph, BasicBlock, edges_from_facts
from .image import Image

FILL = 0xFF


class LayoutError(ValueError):
    pass


@dataclass
class IrInsn:
    op: int
    args: tuple                 # operand fields; a direct branch's displacement is filled at emission
    target: object = None       # key of the direct-branch target block
    origin: int = None          # original address this instruction stands for
    site: int = None            # site whose signal sits at this instruction's head
    mistarget: int = None       # site id when this jcc's taken edge is mistargeted

    def copy(self, **kw):
        d = dict(op=self.op, args=self.args, target=self.target, origin=self.origin,
                 site=self.site, mistarget=self.mistarget)
        d.update(kw)
        return IrInsn(**d)


@dataclass
class IrBlock:
    key: tuple
    insns: list
    fall: tuple = None
    origin: int = None
    pinned: bool = False
    frozen: bool = False


@dataclass
class LayoutPlan:
    placements: dict            # block key -> address
    trampolines: dict           # pinned address -> relocated target address
    inserted_jumps: list        # (after block key, fall-through key) explicit jumps added
    pinned: frozenset
    frozen: frozenset           # pinned addresses kept verbatim


@dataclass
class Emission:
    image: Image
    plan: LayoutPlan
    site_addrs: dict            # site id -> address of its signal instruction
    origin: dict = field(repr=False)  # emitted instruction address -> original address


@dataclass
class Program:
    image: Image
    meta: object
    cfg: ControlFlowGraph
    order: list
    blocks: dict
    indirect: dict              # original jmpr/callr address -> declared target addresses

    def copy(self):
        blocks = {k: IrBlock(b.key, [i.copy() for i in b.insns], b.fall, b.origin, b.pinned, b.frozen)
                  for k, b in self.blocks.items()}
        return Program(self.image, self.meta, self.cfg, list(self.order), blocks, dict(self.indirect))

    def insert_after(self, key, new_key):
        self.order.insert(self.order.index(key) + 1, new_key)


def block_key(addr):
    return ("b", addr)


def lift(image, meta, cfg):
    """Lift ``image`` into IR blocks following ``cfg``'s block boundaries."""
    pinned = sorted(a for a in meta.pinned_targets if a in cfg.by_start)
    gaps = {}
    for i, a in enumerate(pinned):
        nxt = pinned[i + 1] if i + 1 < len(pinned) else image.code_end
        gaps[a] = nxt - a
    blocks, order = {}, []
    for b in cfg.blocks:
        insns = []
        addr = b.start
        while addr < b.end:
            ins = isa.decode(image.code, addr - image.code_base, image.code_base)
            target = None
            args = ins.args
            if ins.op in (isa.JCC, isa.JMP, isa.CALL, isa.CHK):
                target = block_key(ins.target())
                args = args[:-1] + (0,)
            insns.append(IrInsn(ins.op, args, target, ins.addr))
            addr = ins.end
        last = insns[-1]
        fall = None
        if last.op in (isa.JCC, isa.CALL, isa.CALLR, isa.CHK) or last.op not in isa.BRANCHES:
            if b.end in cfg.by_start:
                fall = block_key(b.end)
        is_pinned = b.start in meta.pinned_targets
        key = block_key(b.start)
        blk = IrBlock(key, insns, fall, b.start, is_pinned)
        if is_pinned and gaps[b.start] < isa.JMP_LEN:
            _check_freezable(blk, b, meta)
            blk.frozen = True
        blocks[key] = blk
        order.append(key)
    indirect = {a: meta.targets_of(a) for a in meta.indirect_targets}
    return Program(image, meta, cfg, order, blocks, indirect)


def _check_freezable(blk, b, meta):
    for ins in blk.insns:
        if ins.target is not None:
            raise LayoutError(f"pinned block at {b.start:#x} too small to relocate and not position independent")
    if blk.fall is not None and not (blk.fall[1] == b.end and b.end in meta.pinned_targets):
        raise LayoutError(f"pinned block at {b.start:#x} too small to relocate and falls into movable code")


def _ir_size(ins):
    return isa.LENGTHS[ins.op]


def emit(prog, tracer=False):
    """Lay out and encode ``prog``. With ``tracer`` every site gets a LOGID."""
    image = prog.image
    anchor_end = image.code_end
    reloc_base = (anchor_end + 15) & ~15
    units = []                 # (key, [IrInsn])
    inserted = []
    extra = []
    order = [k for k in prog.order if not prog.blocks[k].frozen]
    for i, key in enumerate(order):
        blk = prog.blocks[key]
        seq = []
        for ins in blk.insns:
            if tracer and ins.site is not None:
                seq.append(IrInsn(isa.LOGID, (ins.site,), origin=ins.origin, site=ins.site))
            if tracer and ins.mistarget is not None:
                dkey = ("t", ins.mistarget)
                dst_origin = prog.blocks[ins.target].origin
                extra.append((dkey, [IrInsn(isa.LOGID, (ins.mistarget,), origin=dst_origin, site=ins.mistarget),
                                     IrInsn(isa.JMP, (0,), ins.target, dst_origin)]))
                ins = ins.copy(target=dkey, mistarget=None)
            seq.append(ins.copy(site=None) if tracer else ins)
        nxt = order[i + 1] if i + 1 < len(order) else None
        if blk.fall is not None and blk.fall != nxt:
            seq.append(IrInsn(isa.JMP, (0,), blk.fall, prog.blocks[blk.fall].origin))
            inserted.append((key, blk.fall))
        units.append((key, seq))
    units.extend(extra)

    placements = {}
    addr = reloc_base
    for key, seq in units:
        placements[key] = addr
        addr += sum(_ir_size(i) for i in seq)
    reloc_end = addr
    if image.data and image.data_base >= anchor_end and reloc_end > image.data_base:
        raise LayoutError("no room for relocated code below the data section")
    for key in prog.order:
        blk = prog.blocks[key]
        if blk.frozen:
            placements[key] = blk.origin

    code = bytearray([FILL]) * (reloc_end - image.code_base)
    origin = {}
    site_addrs = {}

    def put(at, blob):
        off = at - image.code_base
        code[off:off + len(blob)] = blob

    def encode_at(at, ins):
        args = ins.args
        if ins.target is not None:
            n = isa.LENGTHS[ins.op]
            disp = placements[ins.target] - (at + n)
            args = args[:-1] + (disp,)
        return isa.encode(ins.op, args)

    for key, seq in units:
        at = placements[key]
        for ins in seq:
            blob = encode_at(at, ins)
            put(at, blob)
            if ins.origin is not None:
                origin[at] = ins.origin
            if ins.site is not None:
                site_addrs[ins.site] = at
            if ins.mistarget is not None:
                site_addrs[ins.mistarget] = at
            at += len(blob)

    trampolines = {}
    frozen = set()
    for key in prog.order:
        blk = prog.blocks[key]
        if blk.frozen:
            at = blk.origin
            for ins in blk.insns:
                blob = encode_at(at, ins)
                put(at, blob)
                origin[at] = ins.origin
                at += len(blob)
            frozen.add(blk.origin)
        elif blk.pinned:
            tgt = placements[key]
            put(blk.origin, isa.encode(isa.JMP, (tgt - (blk.origin + isa.JMP_LEN),)))
            origin[blk.origin] = blk.origin
            trampolines[blk.origin] = tgt

    entry = placements[block_key(image.entry)]
    out = Image(entry, image.code_base, bytes(code), image.data_base, image.data, image.version)
    plan = LayoutPlan(placements, trampolines, inserted,
                      frozenset(b.origin for b in prog.blocks.values() if b.pinned), frozenset(frozen))
    return Emission(out, plan, site_addrs, origin)


def program_cfg(prog, placements):
    """CFG of the IR itself, with blocks at their emitted addresses."""
    keys = list(prog.order)
    ids = {k: i for i, k in enumerate(keys)}
    blocks, facts = [], []
    for k in keys:
        blk = prog.blocks[k]
        size = sum(_ir_size(i) for i in blk.insns)
        last = blk.insns[-1]
        term = isa.MNEMONICS.get(last.op, "fall") if last.op in isa.BRANCHES or last.op == isa.CHK else "fall"
        if last.op == isa.JCC:
            term = isa.COND_NAMES[last.args[0]]
        blocks.append(BasicBlock(ids[k], placements[k], size, term))
        fall = ids.get(blk.fall) if blk.fall is not None else None
        op = last.op
        if op in (isa.JCC, isa.CHK):
            facts.append((ids[k], "jcc", ids[last.target], fall, ()))
        elif op == isa.JMP:
            facts.append((ids[k], "jmp", ids[last.target], None, ()))
        elif op == isa.CALL:
            facts.append((ids[k], "call", ids[last.target], fall, ()))
        elif op in (isa.CALLR, isa.JMPR):
            tg = tuple(ids[block_key(t)] for t in prog.indirect.get(last.origin, ()))
            facts.append((ids[k], "callr" if op == isa.CALLR else "jmpr", None,
                          fall if op == isa.CALLR else None, tg))
        elif op == isa.RET:
            facts.append((ids[k], "ret", None, None, ()))
        elif op in (isa.HALT, isa.TRAP):
            facts.append((ids[k], "stop", None, None, ()))
        else:
            facts.append((ids[k], "fall", None, fall, ()))
    edges, fentries = edges_from_facts(facts)
    entry = ids[block_key(prog.image.entry)]
    return ControlFlowGraph(tuple(blocks), tuple(edges), entry, fentries)
