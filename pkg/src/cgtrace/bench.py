"""Benchmark corpus, multi-mode experiments and comparison reports."""

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean

from .asm import assemble
from .cfg import INDIRECT_KINDS, build_cfg, detect_loops, find_critical_edges
from .coverage import Reference, infer_edges, loop_progress
from .fuzzer import (CGT_MODES, MODES, STATS_COLUMNS, CampaignConfig, Targets,
                     run_campaign, triage_crash)
from .rewrite import LayoutError
from .transform import (MISTARGETED_EDGE, TransformError, bucket_index, build_pair,
                        mistarget_displacement)
from .vm import ExecConfig, Exit, Fault, execute, trace_blocks

CORPUS_DIR = Path(__file__).parent / "corpus"
BENCH_COLUMNS = ("target", "mode", "trials", "executions", "cycles", "execs_per_megacycle", "sites",
                 "edges", "loop_buckets", "bugs", "rel_throughput", "rel_edges")
REFERENCE_BUDGET = 1_000_000


@dataclass
class BenchTarget:
    name: str
    source: str
    seeds: list
    ground_truth: dict
    description: str = ""
    _asm: tuple = field(default=None, repr=False)
    _builds: dict = field(default_factory=dict, repr=False)

    def assembled(self):
        if self._asm is None:
            self._asm = assemble(self.source)
        return self._asm

    @property
    def image(self):
        return self.assembled()[0]

    @property
    def meta(self):
        return self.assembled()[1]

    def build(self, policy="full"):
        if policy not in self._builds:
            self._builds[policy] = build_pair(self.image, self.meta, policy)
        return self._builds[policy]

    def label(self, name):
        return self.meta.labels[name]

    @property
    def has_indirect_critical(self):
        return bool(self.ground_truth.get("indirectCritical"))


def load_target(name, corpus_dir=CORPUS_DIR):
    corpus_dir = Path(corpus_dir)
    source = (corpus_dir / f"{name}.s").read_text()
    gt = json.loads((corpus_dir / f"{name}.json").read_text())
    seeds = [bytes.fromhex(s) for s in gt["seeds"]]
    return BenchTarget(name, source, seeds, gt, gt.get("description", ""))


def load_corpus(names=None, corpus_dir=CORPUS_DIR):
    corpus_dir = Path(corpus_dir)
    all_names = sorted(p.stem for p in corpus_dir.glob("*.s"))
    for n in names or ():
        if n not in all_names:
            raise KeyError(f"no corpus target named {n!r}")
    return [load_target(n, corpus_dir) for n in (names or all_names)]


def header_hits(image, meta, data, header):
    cfg = build_cfg(image, meta)
    res = trace_blocks(image, data, [b.start for b in cfg.blocks], ExecConfig(REFERENCE_BUDGET))
    return sum(1 for a in res.blocks if a == header)


def measure_ground_truth(target):
    """Static facts and witness behaviour of ``target`` as measured now."""
    img, meta = target.image, target.meta
    cfg = build_cfg(img, meta)
    crit = find_critical_edges(cfg)
    by_label = {v: k for k, v in meta.labels.items()}
    loops = []
    for lp in sorted(detect_loops(cfg), key=lambda l: cfg.blocks[l.header].start):
        h = cfg.blocks[lp.header].start
        loops.append({"header": by_label.get(h, f"{h:#x}")})
    return {
        "blocks": len(cfg.blocks),
        "edges": len(cfg.edges),
        "critical": dict(sorted(Counter(e.kind for e in crit).items())),
        "indirectCritical": any(e.kind in INDIRECT_KINDS for e in crit),
        "loops": loops,
    }


def verify_ground_truth(target):
    """Problems found re-checking ``target``'s recorded ground truth (empty list when sound)."""
    gt = target.ground_truth
    now = measure_ground_truth(target)
    problems = []
    for key in ("blocks", "edges", "critical", "indirectCritical"):
        if gt.get(key) != now[key]:
            problems.append(f"{target.name}: {key} recorded {gt.get(key)!r}, measured {now[key]!r}")
    if [l["header"] for l in gt.get("loops", [])] != [l["header"] for l in now["loops"]]:
        problems.append(f"{target.name}: loop headers differ from the recorded set")
    for lp in gt.get("loops", []):
        if "witness" in lp:
            n = header_hits(target.image, target.meta, bytes.fromhex(lp["witness"]), target.label(lp["header"]))
            if n != lp["iterations"]:
                problems.append(f"{target.name}: loop {lp['header']} witness ran {n} times, "
                                f"recorded {lp['iterations']}")
    for bug in gt.get("bugs", []):
        res = execute(target.image, bytes.fromhex(bug["witness"]), ExecConfig(REFERENCE_BUDGET))
        oc = res.outcome
        if not (isinstance(oc, Fault) and oc.kind == bug["kind"] and oc.pc == target.label(bug["label"])):
            problems.append(f"{target.name}: bug {bug['label']} witness gave {oc}")
    for s in target.seeds:
        if isinstance(execute(target.image, s, ExecConfig(REFERENCE_BUDGET)).outcome, Fault):
            problems.append(f"{target.name}: seed {s.hex()} crashes")
    return problems


def bug_hashes(target):
    """Stack hash of each planted bug, keyed by its label."""
    out = {}
    for bug in target.ground_truth.get("bugs", []):
        res = execute(target.image, bytes.fromhex(bug["witness"]), ExecConfig(REFERENCE_BUDGET))
        out[bug["label"]] = triage_crash(res).stack_hash
    return out


# -- campaigns ------------------------------------------------------------

@dataclass
class Cell:
    target: str
    mode: str
    rng_seed: int
    report: object = field(repr=False)
    executions: int = 0
    cycles: int = 0
    sites: int = 0
    edges: frozenset = frozenset()
    loop_buckets: dict = field(default_factory=dict)
    bugs: frozenset = frozenset()
    omitted: str = ""           # why the mode could not run on the target, if it could not

    @property
    def execs_per_megacycle(self):
        return self.executions / (self.cycles / 1e6) if self.cycles else 0.0


def campaign_config(target, mode, wall_budget, rng_seed, **kw):
    return CampaignConfig(mode, list(target.seeds), rng_seed=rng_seed, wall_budget=wall_budget, **kw)


def run_cell(target, mode, wall_budget, rng_seed, **kw):
    try:
        build = target.build("block" if mode == "block-cgt" else "full")
    except (TransformError, LayoutError) as exc:
        return Cell(target.name, mode, rng_seed, None, omitted=str(exc))
    rep = run_campaign(campaign_config(target, mode, wall_budget, rng_seed, **kw), Targets.from_build(build))
    edges = frozenset()
    if mode != "native-baseline":
        got, _ = infer_edges(build, rep.covered_sites)
        edges = frozenset(build.cfg.addr_pair(e) + (e.kind,) for e in got)
    return Cell(target.name, mode, rng_seed, rep, rep.executions, rep.cycles, len(rep.covered_sites), edges,
                dict(rep.loop_progress), frozenset(rep.bugs))


@dataclass
class BenchReport:
    cells: list
    rows: list          # one dict per (target, mode), columns BENCH_COLUMNS

    def row(self, target, mode):
        for r in self.rows:
            if r["target"] == target and r["mode"] == mode:
                return r
        raise KeyError((target, mode))

    def mean_ratio(self, num, den, column="execs_per_megacycle"):
        vals = []
        for t in sorted({r["target"] for r in self.rows}):
            a, b = self.row(t, num)[column], self.row(t, den)[column]
            if a != "" and b:
                vals.append(a / b)
        return mean(vals) if vals else float("nan")


def summarize(cells, base_mode="full-cgt"):
    groups = {}
    rows = []
    for c in cells:
        if c.omitted:
            continue
        groups.setdefault((c.target, c.mode), []).append(c)
    for (t, m), cs in sorted(groups.items()):
        rows.append({
            "target": t, "mode": m, "trials": len(cs),
            "executions": mean(c.executions for c in cs),
            "cycles": mean(c.cycles for c in cs),
            "execs_per_megacycle": mean(c.execs_per_megacycle for c in cs),
            "sites": mean(c.sites for c in cs),
            "edges": mean(len(c.edges) for c in cs) if m != "native-baseline" else "",
            "loop_buckets": mean(sum(c.loop_buckets.values()) for c in cs),
            "bugs": len(frozenset().union(*(c.bugs for c in cs))),
        })
    for t, m in sorted({(c.target, c.mode) for c in cells if c.omitted} - set(groups)):
        rows.append({"target": t, "mode": m, "trials": 0, **{k: "" for k in BENCH_COLUMNS[3:]},
                     "omitted": True})
    for r in rows:
        if r.get("omitted"):
            continue
        base = next((b for b in rows if b["target"] == r["target"] and b["mode"] == base_mode
                     and not b.get("omitted")), None)
        r["rel_throughput"] = r["execs_per_megacycle"] / base["execs_per_megacycle"] if base and base["execs_per_megacycle"] else ""
        r["rel_edges"] = r["edges"] / base["edges"] if base and base["edges"] and r["edges"] != "" else ""
    return rows


def run_bench(targets, modes=MODES, wall_budget=50_000_000, trials=1, rng_seeds=None, **kw):
    """Run every (target, mode, trial) cell; trials use distinct rng seeds."""
    seeds = list(rng_seeds) if rng_seeds is not None else list(range(1, trials + 1))
    if len(seeds) != trials or len(set(seeds)) != trials:
        raise ValueError("need one distinct rng seed per trial")
    cells = []
    for t in targets:
        for m in modes:
            for s in seeds:
                cells.append(run_cell(t, m, wall_budget, s, **kw))
    return BenchReport(cells, summarize(cells))


def write_bench(report, path_csv, path_json=None):
    with open(path_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS + ("omitted",), extrasaction="ignore")
        w.writeheader()
        for r in report.rows:
            w.writerow({**{k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()},
                        "omitted": int(bool(r.get("omitted")))})
    if path_json:
        with open(path_json, "w") as fh:
            json.dump({"rows": report.rows}, fh, indent=1, sort_keys=True)


# -- invariant checks -------------------------------------------------------

def check_cell(target, cell, reference=None):
    """Invariant violations in one finished campaign (empty list when all hold)."""
    problems = []
    rep = cell.report
    tag = f"{target.name}/{cell.mode}/{cell.rng_seed}"
    if rep.anomalies:
        problems.append(f"{tag}: {rep.anomalies} oracle signals without new coverage")
    for e in rep.queue:
        res = execute(target.image, e.data, ExecConfig(REFERENCE_BUDGET))
        if isinstance(res.outcome, Fault):
            problems.append(f"{tag}: queued input {e.id} ({e.reason}) crashes the original")
        if e.reason != "seed" and not isinstance(res.outcome, Exit):
            problems.append(f"{tag}: queued input {e.id} does not terminate in the original")
    for h, bug in rep.bugs.items():
        res = execute(target.image, bug.first_input, ExecConfig(REFERENCE_BUDGET))
        if not isinstance(res.outcome, Fault) or triage_crash(res).stack_hash != h:
            problems.append(f"{tag}: bug {h} does not reproduce on the original")
    if cell.mode in CGT_MODES or cell.mode == "always-trace":
        build = target.build("block" if cell.mode == "block-cgt" else "full")
        ref = reference or Reference(build)
        edges, sites, counts = set(), set(), Counter()
        for data in rep.covering_inputs():
            o = ref.observe(data)
            edges |= o.edges
            sites |= o.sites
            for h, n in o.counts.items():
                counts[h] = max(counts[h], n)
        if sites != set(rep.covered_sites):
            problems.append(f"{tag}: covered sites differ from the reference over the covering inputs")
        if cell.mode != "block-cgt":
            got, unknown = infer_edges(build, rep.covered_sites)
            if target.has_indirect_critical:
                extra = got - edges
                missing = {e for e in edges - got if e.kind not in INDIRECT_KINDS}
                if extra or missing:
                    problems.append(f"{tag}: inferred edges are not the reference minus indirect edges")
            elif got != edges or unknown:
                problems.append(f"{tag}: inferred edges differ from the reference edge set")
            for h, b in loop_progress(build.sites, rep.covered_sites).items():
                if b != bucket_index(counts[h]):
                    problems.append(f"{tag}: loop {h:#x} reached bucket {b}, reference says "
                                    f"{bucket_index(counts[h])}")
    return problems


def check_builds(target):
    """Build-level invariants: mistarget arithmetic and byte-exact restoration."""
    problems = []
    for policy in ("full", "block"):
        b = target.build(policy)
        for r in b.table:
            if r.kind.startswith(MISTARGETED_EDGE):
                jcc = r.oracle_addr - 2
                disp = int.from_bytes(b.oracle.read_code(r.oracle_addr, 4), "little")
                if (jcc + 6 + disp) & 0xFFFFFFFF != 0 or disp != mistarget_displacement(jcc):
                    problems.append(f"{target.name}: bad displacement at {jcc:#x}")
            if b.pre_image.read_code(r.oracle_addr, len(r.original_bytes)) != r.original_bytes:
                problems.append(f"{target.name}: record {r.tracer_id} does not restore the pre-image")
    return problems


# -- report joiner ------------------------------------------------------------

STATE_KEYS = ("mode", "target", "coveredSites", "loopProgress", "bugs")


class ReportError(ValueError):
    pass


def load_campaign_dir(path):
    path = Path(path)
    state_file = path / "state.json"
    stats_file = path / "stats.csv"
    try:
        state = json.loads(state_file.read_text())
    except FileNotFoundError:
        raise ReportError(f"{state_file}: missing") from None
    for k in STATE_KEYS:
        if k not in state:
            raise ReportError(f"{state_file}: missing column {k!r}")
    try:
        with open(stats_file, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ReportError(f"{stats_file}: missing") from None
    if not rows or tuple(rows[0]) != STATS_COLUMNS:
        got = rows[0] if rows else []
        bad = next((c for c in list(STATS_COLUMNS) + got if c not in STATS_COLUMNS or c not in got), "header")
        raise ReportError(f"{stats_file}: unexpected column {bad!r}")
    stats = [dict(zip(STATS_COLUMNS, map(int, r))) for r in rows[1:]]
    return state, stats


def report(dirs):
    """Compare campaign output directories per target: relative coverage and bugs between modes."""
    runs = [(str(d),) + load_campaign_dir(d) for d in dirs]
    by_target = {}
    for d, state, stats in runs:
        by_target.setdefault(state["target"], []).append((d, state, stats))
    rows = []
    for target, group in sorted(by_target.items()):
        for da, a, sa in group:
            for db, b, sb in group:
                cov_a = _coverage(a)
                cov_b = _coverage(b)
                bugs_a, bugs_b = set(a["bugs"]), set(b["bugs"])
                rows.append({
                    "target": target, "a": da, "b": db, "mode_a": a["mode"], "mode_b": b["mode"],
                    "rel_cov": (len(cov_a) / len(cov_b)) if cov_b else (1.0 if not cov_a else float("inf")),
                    "bugs_a": len(bugs_a), "bugs_b": len(bugs_b),
                    "bugs_union": len(bugs_a | bugs_b), "bugs_overlap": len(bugs_a & bugs_b),
                    "rel_bugs": (len(bugs_a) / len(bugs_b)) if bugs_b else (1.0 if not bugs_a else float("inf")),
                    "final_execs_a": sa[-1]["execs"] if sa else 0,
                })
    return rows


def _coverage(state):
    if "edges" in state:
        return {tuple(e) for e in state["edges"]}
    return set(state["coveredSites"])


REPORT_COLUMNS = ("target", "a", "b", "mode_a", "mode_b", "rel_cov", "bugs_a", "bugs_b", "bugs_union",
                  "bugs_overlap", "rel_bugs", "final_execs_a")


def write_report(rows, path_csv, path_json=None):
    with open(path_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    if path_json:
        with open(path_json, "w") as fh:
            json.dump(rows, fh, indent=1)


def cell_state_extra(target, cell):
    """state.json additions for a bench cell: inferred edges in original addresses."""
    return {"edges": sorted([list(e) for e in cell.edges])}


__all__ = ["BenchTarget", "BenchReport", "Cell", "load_corpus", "load_target", "measure_ground_truth",
           "verify_ground_truth", "bug_hashes", "run_cell", "run_bench", "summarize", "write_bench",
           "check_cell", "check_builds", "report", "write_report", "load_campaign_dir", "ReportError",
           "CORPUS_DIR", "BENCH_COLUMNS"]
