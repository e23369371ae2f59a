"""Coverage-preserving rewrites and the oracle/tracer pair.

Three structural changes make block-level interrupts report everything the
fuzzer needs:

* critical conditional fall-through edges get a dummy block of their own;
* critical conditional taken edges are "mistargeted" in the oracle: the jump
  displacement is patched so the branch lands on address 0 and faults,
  and the fault itself is the coverage signal;
* every natural loop header gets a chain of hit-count checks so that reaching
  a new power-of-two iteration bucket hits a fresh block.

The oracle is the transformed program with a one-shot signal at every site.
The tracer is the same program with a LOGID at every site and no patches.
"""

import json
import re
from dataclasses import dataclass, field

from . import isa
from .cfg import (COND_FALL, COND_TARGET, INDIRECT_KINDS, build_cfg, detect_loops,
                  find_critical_edges)
from .image import Image, apply_patch
from .rewrite import IrBlock, IrInsn, LayoutError, block_key, emit, lift, program_cfg

BUCKET_THRESHOLDS = (1, 2, 3, 7, 15, 31, 127)
N_BUCKETS = 7
POLICIES = ("full", "block")

BLOCK_HEAD = "BlockHead"
DUMMY_BLOCK = "DummyBlock"
MISTARGETED_EDGE = "MistargetedEdge"
BUCKET_CHECK = "BucketCheck"

__all__ = ["LayoutError", "TransformError", "SiteKind", "MappingRecord", "CgtBuild",
           "bucket_index", "mistarget_displacement", "split_edges", "unroll_buckets",
           "build_pair", "build_oracle", "build_tracer", "write_mapping", "read_mapping"]


class TransformError(ValueError):
    pass


def bucket_index(n):
    """Hit-count bucket: 0 for at most one hit, then 2, 3, 4-7, 8-15, 16-31, 32-127, 128+."""
    return sum(1 for t in BUCKET_THRESHOLDS if n > t)


def mistarget_displacement(pc, length=isa.JCC_LEN):
    """Displacement that sends a branch at ``pc`` of ``length`` bytes to address 0."""
    return (-(pc + length)) & isa.MASK32


_KIND_RE = re.compile(r"^(\w+)\((0x[0-9a-f]+)(?:->(0x[0-9a-f]+))?(?:,(\w+))?\)$")


@dataclass(frozen=True)
class SiteKind:
    """What a site stands for, in original-program addresses."""

    name: str
    addr: int                   # block start, edge source or loop header
    dst: int = None             # edge destination
    extra: str = None           # bucket number, or "T" for a split taken edge

    def __str__(self):
        s = f"{self.name}({self.addr:#x}"
        if self.dst is not None:
            s += f"->{self.dst:#x}"
        if self.extra is not None:
            s += f",{self.extra}"
        return s + ")"

    @classmethod
    def parse(cls, text):
        m = _KIND_RE.match(text)
        if not m:
            raise ValueError(f"bad site kind {text!r}")
        name, a, d, x = m.groups()
        return cls(name, int(a, 16), int(d, 16) if d else None, x)

    @property
    def bucket(self):
        return int(self.extra) if self.name == BUCKET_CHECK else None

    @property
    def edge(self):
        return (self.addr, self.dst) if self.dst is not None else None


@dataclass(frozen=True)
class MappingRecord:
    oracle_addr: int
    tracer_id: int
    original_bytes: bytes
    kind: str

    def to_json(self):
        return {"oracleAddr": self.oracle_addr, "tracerID": self.tracer_id,
                "originalBytes": self.original_bytes.hex(), "kind": self.kind}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["oracleAddr"]), int(obj["tracerID"]),
                   bytes.fromhex(obj["originalBytes"]), str(obj["kind"]))


def write_mapping(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_mapping(path):
    with open(path) as fh:
        return [MappingRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def check_disjoint(records):
    spans = sorted((r.oracle_addr, r.oracle_addr + len(r.original_bytes), r.tracer_id) for r in records)
    for (a0, a1, i), (b0, _, j) in zip(spans, spans[1:]):
        if b0 < a1:
            raise TransformError(f"patches for sites {i} and {j} overlap at {b0:#x}")


@dataclass
class CgtBuild:
    policy: str
    image: Image                # original program
    pre_image: Image            # transformed program before any patch
    oracle: Image
    tracer: Image
    table: list                 # MappingRecord per oracle patch, ordered by site id
    sites: list                 # SiteKind per site id
    slots: dict                 # loop header -> shadow counter slot
    dropped: list               # original block starts that could not carry a site
    skipped: dict = field(default_factory=dict)  # candidate -> reason it was not transformed
    oracle_origin: dict = field(default_factory=dict, repr=False)
    tracer_origin: dict = field(default_factory=dict, repr=False)
    cfg: object = field(default=None, repr=False)

    @property
    def n_sites(self):
        return len(self.sites)

    def origin_json(self):
        return {"oracle": {str(k): v for k, v in sorted(self.oracle_origin.items())},
                "tracer": {str(k): v for k, v in sorted(self.tracer_origin.items())}}


def _split(prog, edges):
    """Give each conditional edge a dummy block; returns the dummy keys in order."""
    cfg = prog.cfg
    keys = []
    for e in edges:
        if e.kind in INDIRECT_KINDS:
            raise TransformError(f"cannot split indirect edge {e.kind}")
        if e.kind not in (COND_TARGET, COND_FALL):
            raise TransformError(f"only conditional edges can be split, got {e.kind}")
        src, dst = cfg.addr_pair(e)
        sk, dk = block_key(src), block_key(dst)
        dkey = ("d", src, dst, e.kind)
        if dkey in prog.blocks:
            continue
        dst_origin = prog.blocks[dk].origin
        prog.blocks[dkey] = IrBlock(dkey, [IrInsn(isa.JMP, (0,), dk, dst_origin)], None, dst_origin)
        jcc = prog.blocks[sk].insns[-1]
        if e.kind == COND_TARGET:
            prog.blocks[sk].insns[-1] = jcc.copy(target=dkey)
            prog.order.append(dkey)
        else:
            prog.blocks[sk].fall = dkey
            prog.insert_after(sk, dkey)
        keys.append(dkey)
    return keys


def _unroll(prog, headers):
    """Put a hit-count check chain in front of each loop header; returns header -> slot."""
    slots = {}
    for h in sorted(headers):
        hk = block_key(h)
        head = prog.blocks[hk]
        slot = len(slots)
        slots[h] = slot
        body = ("hb", h)
        prog.blocks[body] = IrBlock(body, head.insns, head.fall, h)
        chain = [(k, ("c", h, k)) for k in range(1, N_BUCKETS + 1)]
        head.insns = [IrInsn(isa.CINC, (slot,), origin=h),
                      IrInsn(isa.CHK, (slot, BUCKET_THRESHOLDS[0], 0), body, h)]
        head.fall = chain[0][1]
        for i, (k, ck) in enumerate(chain):
            if k < N_BUCKETS:
                insns = [IrInsn(isa.CHK, (slot, BUCKET_THRESHOLDS[k], 0), body, h)]
                fall = chain[i + 1][1]
            else:
                insns = [IrInsn(isa.NOP, (), origin=h)]
                fall = body
            prog.blocks[ck] = IrBlock(ck, insns, fall, h)
        at = prog.order.index(hk)
        prog.order[at + 1:at + 1] = [ck for _, ck in chain] + [body]
    return slots


def _prepare(image, meta):
    cfg = build_cfg(image, meta)
    return cfg, lift(image, meta, cfg)


def split_edges(image, meta, edges):
    """Split ``edges`` (edges of ``build_cfg(image, meta)``) with dummy blocks.

    Returns the rewritten image, its CFG and ``{edge: dummy address}``.
    """
    _, prog = _prepare(image, meta)
    keys = _split(prog, edges)
    em = emit(prog)
    dummies = {k: em.plan.placements[k] for k in keys}
    by_key = {("d", *prog.cfg.addr_pair(e), e.kind): e for e in edges}
    return em.image, program_cfg(prog, em.plan.placements), {by_key[k]: a for k, a in dummies.items()}


def unroll_buckets(image, meta, loops=None):
    """Insert bucket check chains at loop headers (all natural loops by default).

    Returns the rewritten image, its CFG and ``{(header, bucket): check address}``
    where bucket 1..7 is the block first reached at that hit-count bucket.
    """
    cfg, prog = _prepare(image, meta)
    loops = detect_loops(cfg) if loops is None else loops
    headers = {cfg.blocks[l.header].start for l in loops}
    frozen = {h for h in headers if prog.blocks[block_key(h)].frozen}
    slots = _unroll(prog, headers - frozen)
    em = emit(prog)
    checks = {(h, k): em.plan.placements[("c", h, k)] for h in slots for k in range(1, N_BUCKETS + 1)}
    return em.image, program_cfg(prog, em.plan.placements), checks


def build_pair(image, meta, policy="full", shadow_slots=256):
    """Transform ``image`` and derive its oracle and tracer."""
    if policy not in POLICIES:
        raise TransformError(f"unknown policy {policy!r}")
    cfg, prog = _prepare(image, meta)
    skipped = {}
    dummies, mistargets, slots = [], [], {}
    if policy == "full":
        crit = sorted(find_critical_edges(cfg))
        for e in crit:
            if e.kind in INDIRECT_KINDS:
                skipped[e] = "indirect"
        dummies = _split(prog, [e for e in crit if e.kind == COND_FALL])
        mistargets = [e for e in crit if e.kind == COND_TARGET]
        headers = set()
        for loop in detect_loops(cfg):
            h = cfg.blocks[loop.header].start
            if prog.blocks[block_key(h)].frozen:
                skipped[loop] = "frozen header"
            else:
                headers.add(h)
        if len(headers) > shadow_slots:
            raise TransformError(f"{len(headers)} loops exceed {shadow_slots} shadow slots")
        slots = _unroll(prog, headers)

    sites, dropped = [], []
    for b in sorted(cfg.blocks, key=lambda b: b.start):
        blk = prog.blocks[block_key(b.start)]
        if blk.frozen:
            dropped.append(b.start)
            continue
        blk.insns[0].site = len(sites)
        sites.append(SiteKind(BLOCK_HEAD, b.start))
    for dk in dummies:
        _, src, dst, kind = dk
        prog.blocks[dk].insns[0].site = len(sites)
        sites.append(SiteKind(DUMMY_BLOCK, src, dst, "T" if kind == COND_TARGET else None))
    for e in mistargets:
        src, dst = cfg.addr_pair(e)
        home = ("hb", src) if ("hb", src) in prog.blocks else block_key(src)
        prog.blocks[home].insns[-1].mistarget = len(sites)
        sites.append(SiteKind(MISTARGETED_EDGE, src, dst))
    for h in sorted(slots):
        for k in range(1, N_BUCKETS + 1):
            prog.blocks[("c", h, k)].insns[0].site = len(sites)
            sites.append(SiteKind(BUCKET_CHECK, h, None, str(k)))

    plain = emit(prog, tracer=False)
    traced = emit(prog, tracer=True)
    table = build_oracle(plain.image, plain.site_addrs, sites, policy)
    oracle = plain.image
    for r in table:
        oracle, _ = apply_patch(oracle, r.oracle_addr, _patch_for(r))
    tracer = build_tracer(traced.image, table, traced.site_addrs)
    return CgtBuild(policy, image, plain.image, oracle, tracer, table, sites, slots, dropped,
                    skipped, plain.origin, traced.origin, cfg)


def _patch_for(r):
    if SiteKind.parse(r.kind).name == MISTARGETED_EDGE:
        jcc = r.oracle_addr - 2
        return mistarget_displacement(jcc).to_bytes(4, "little")
    return bytes([isa.TRAP])


def build_oracle(pre_image, site_addrs, sites, policy="full"):
    """Patch table for a transformed image: one record per site the policy signals.

    Block heads, dummies and bucket checks get a one-byte trap; mistargeted
    edges get their jcc displacement (4 bytes at jcc+2) rewritten so the
    taken branch faults.
    """
    records = []
    for sid, kind in enumerate(sites):
        if policy != "full" and kind.name != BLOCK_HEAD:
            continue
        addr = site_addrs[sid]
        if kind.name == MISTARGETED_EDGE:
            if pre_image.code[addr - pre_image.code_base] != isa.JCC:
                raise TransformError(f"mistargeted site {sid} is not a conditional jump")
            addr += 2
            n = 4
        else:
            n = 1
        records.append(MappingRecord(addr, sid, pre_image.read_code(addr, n), str(kind)))
    check_disjoint(records)
    return records


def build_tracer(traced_image, table, site_addrs):
    """Check that every oracle record has its LOGID in ``traced_image`` and return the image."""
    for r in table:
        at = site_addrs.get(r.tracer_id)
        if at is None or traced_image.code[at - traced_image.code_base] != isa.LOGID:
            raise TransformError(f"site {r.tracer_id} has no tracer LOGID")
    return traced_image
