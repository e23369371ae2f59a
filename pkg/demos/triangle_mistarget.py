"""Walk through one mistargeted edge on a three-block triangle.

    python demos/triangle_mistarget.py

The taken edge a->c is critical: c is also reached through b, so a block
probe at c cannot tell the two paths apart. The oracle rewrites the je's
displacement so the jump lands on address zero. The first input that takes
the edge faults there; the tracer confirms the new edge; the displacement is
restored; the same input then runs silently.
"""

from cgtrace.asm import assemble
from cgtrace.fuzzer import Campaign, CampaignConfig, Targets
from cgtrace.transform import MISTARGETED_EDGE, build_pair

SOURCE = """
a:  in r1
    cmpi r1, 5
    je c
b:  movi r2, 1
c:  mov r0, r2
    halt
"""


def main():
    img, meta = assemble(SOURCE)
    build = build_pair(img, meta, "full")
    print("sites:")
    for r in build.table:
        print(f"  {r.tracer_id}: {r.kind} at {r.oracle_addr:#x}, restores {r.original_bytes.hex()}")
    rec = next(r for r in build.table if r.kind.startswith(MISTARGETED_EDGE))
    jcc = rec.oracle_addr - 2
    disp = int.from_bytes(build.oracle.read_code(rec.oracle_addr, 4), "little")
    print(f"je at {jcc:#x} carries displacement {disp:#010x}: {jcc:#x} + 6 + disp = "
          f"{(jcc + 6 + disp) & 0xFFFFFFFF:#x}")

    c = Campaign(CampaignConfig("full-cgt", [b"\x04"]), Targets.from_build(build))
    for data, why in ((b"\x04", "fall through a->b->c"), (b"\x05", "take a->c"), (b"\x05", "take a->c again")):
        d = c.process_input(data)
        print(f"input {data!r} ({why}): {d.kind}, new sites {sorted(d.new_sites)}")


if __name__ == "__main__":
    main()
