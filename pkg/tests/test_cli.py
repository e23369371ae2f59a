import json
import subprocess
import sys

from cgtrace.bench import CORPUS_DIR
from cgtrace.cli import main

TRIANGLE = CORPUS_DIR / "triangles.s"


def test_asm_cfg_xform_fuzz_report(tmp_path, capsys):
    img = tmp_path / "tri.img"
    assert main(["asm", str(TRIANGLE), "-o", str(img), "--list"]) == 0
    assert img.exists() and (tmp_path / "tri.img.meta.json").exists()

    assert main(["cfg", str(img), "--json", "-o", str(tmp_path / "cfg.json")]) == 0
    cfg = json.loads((tmp_path / "cfg.json").read_text())
    assert set(cfg["criticalStats"]) == {"edges", "critical", "proportion", "byKind"}

    runs = []
    for policy, mode in (("full", "full-cgt"), ("block", "block-cgt")):
        o, t, m = (tmp_path / f"{policy}.{x}" for x in ("oracle", "tracer", "map"))
        assert main(["xform", str(img), "--policy", policy, "--oracle", str(o), "--tracer", str(t),
                     "--map", str(m)]) == 0
        seeds = tmp_path / "seed.bin"
        seeds.write_bytes(b"hello")
        out = tmp_path / mode
        assert main(["fuzz", "--mode", mode, "--oracle", str(o), "--tracer", str(t), "--map", str(m),
                     "--image", str(img), "--seeds", str(seeds), "--wall-megacycles", "3",
                     "--out", str(out)]) == 0
        state = json.loads((out / "state.json").read_text())
        assert state["target"] == "tri" and state["mode"] == mode and "edges" in state
        runs.append(str(out))

    assert main(["report", *runs, "--csv", str(tmp_path / "r.csv")]) == 0
    assert "rel_cov" in (tmp_path / "r.csv").read_text()


def test_fuzz_named_target(tmp_path):
    out = tmp_path / "lc"
    assert main(["fuzz", "--target", "loopcrash", "--wall-megacycles", "5", "--out", str(out)]) == 0
    assert (out / "stats.csv").exists()


def test_bench_small(tmp_path, capsys):
    rc = main(["bench", "--targets", "triangles", "--wall-megacycles", "2", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "bench.csv").exists() and (tmp_path / "bench.json").exists()


def test_errors_exit_two(tmp_path, capsys):
    assert main(["report", str(tmp_path / "missing")]) == 2
    assert "missing" in capsys.readouterr().err
    bad = tmp_path / "bad.s"
    bad.write_text("main: frob r1\n")
    assert main(["asm", str(bad), "-o", str(tmp_path / "x.img")]) == 2
    assert main(["fuzz", "--out", str(tmp_path / "o")]) == 2


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "cgtrace.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("asm", "cfg", "xform", "fuzz", "bench", "report"):
        assert cmd in res.stdout
