"""Regenerate the corpus ground-truth files from the assembly sources.

Seeds, loop witnesses and bug witnesses are chosen by hand below; every
number in the JSON files (block/edge counts, critical edges by kind, loop
iterations) is measured here, and the bench re-verifies it on load.
"""

import json
import sys

from cgtrace.bench import CORPUS_DIR, BenchTarget, header_hits, measure_ground_truth

SEEDS = {
    "calls": [b"ab#"],
    "checksum": [b"hello world\x00"],
    "crashy": [b"S\x01", b"W\x01\x01", b"Lk\x01"],
    "diamonds": [b"hello", b"AAAA"],
    "fallcrit": [b"\x05c d"],
    "loopcrash": [b"A!"],
    "nested_loops": [b"\x03\x05\x02\x01"],
    "parser": [b"HX\x01\x02ab\xc3"],
    "switch": [b"\x01\x02"],
    "triangles": [b"hello", b"AAAA"],
}
LOOP_WITNESSES = {
    "checksum": {"next": b"abcdefghij\x00"},
    "loopcrash": {"head": b"A" * 128 + b"!"},
    "nested_loops": {"outer_head": b"\x03\x05\x02\x01", "inner_head": b"\x03\x05\x02\x01"},
    "parser": {"payload": b"HX\x01\x02ab\xc3"},
    "switch": {"loop": b"\x01\x02"},
}
BUGS = {
    "loopcrash": [("bug_null", "segfault", b"A" * 128 + b"!",
                   "a run of at least 128 'A' bytes followed by '!'")],
    "crashy": [("bug_store", "segfault", b"W\x40\x01", "a 'W' record whose index byte is 64 or more"),
               ("bug_lookup", "segfault", b"Lk\x14", "an 'L' record whose key byte is 20 or more")],
}


def description(src):
    lines = []
    for ln in src.splitlines():
        if not ln.startswith(";"):
            break
        lines.append(ln.lstrip("; ").strip())
    return " ".join(lines)


def main(names):
    for path in sorted(CORPUS_DIR.glob("*.s")):
        name = path.stem
        if names and name not in names:
            continue
        src = path.read_text()
        t = BenchTarget(name, src, SEEDS[name], {})
        gt = measure_ground_truth(t)
        for lp in gt["loops"]:
            w = LOOP_WITNESSES.get(name, {}).get(lp["header"])
            if w is not None:
                lp["witness"] = w.hex()
                lp["iterations"] = header_hits(t.image, t.meta, w, t.label(lp["header"]))
        gt["bugs"] = [{"label": l, "kind": k, "witness": w.hex(), "trigger": why}
                      for l, k, w, why in BUGS.get(name, [])]
        out = {"description": description(src), "seeds": [s.hex() for s in SEEDS[name]], **gt}
        (CORPUS_DIR / f"{name}.json").write_text(json.dumps(out, indent=1) + "\n")
        print(name, gt["blocks"], gt["edges"], gt["critical"], [(l["header"], l.get("iterations")) for l in gt["loops"]])


if __name__ == "__main__":
    main(sys.argv[1:])
