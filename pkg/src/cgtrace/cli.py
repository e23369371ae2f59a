"""``cgtrace`` command line: asm | cfg | xform | fuzz | bench | report."""

import argparse
import json
import sys
from pathlib import Path
from types import SimpleNamespace

from .asm import AsmError, AsmModule, assemble, disassemble
from .bench import (BENCH_COLUMNS, REPORT_COLUMNS, ReportError, check_builds, check_cell, load_corpus,
                    report, run_bench, verify_ground_truth, write_bench, write_report)
from .cfg import CfgError, build_cfg, cfg_to_json, critical_edge_stats, detect_loops
from .coverage import infer_edges
from .fuzzer import MODES, CampaignConfig, Targets, run_campaign, write_campaign
from .image import ImageFormatError, load_image, serialize
from .rewrite import LayoutError
from .transform import POLICIES, SiteKind, TransformError, build_pair, read_mapping, write_mapping

MEGA = 1_000_000


def _read_image(path):
    return load_image(Path(path).read_bytes())


def _read_meta(path, image_path=None):
    if path is None and image_path is not None:
        path = f"{image_path}.meta.json"
    return AsmModule.from_json(json.loads(Path(path).read_text()))


def _dump(obj, path=None):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def cmd_asm(args):
    image, meta = assemble(Path(args.source).read_text())
    Path(args.output).write_bytes(serialize(image))
    meta_path = args.meta or f"{args.output}.meta.json"
    _dump(meta.to_json(), meta_path)
    if args.list:
        print(disassemble(image, meta))
    print(f"{args.output}: {len(image.code)} code bytes, {len(image.data)} data bytes, entry {image.entry:#x}",
          file=sys.stderr)
    return 0


def cmd_cfg(args):
    image = _read_image(args.image)
    meta = _read_meta(args.meta, args.image)
    cfg = build_cfg(image, meta)
    stats = critical_edge_stats(cfg)
    if args.json:
        out = cfg_to_json(cfg)
        out["criticalStats"] = {"edges": stats.total_edges, "critical": stats.critical_edges,
                                "proportion": stats.proportion, "byKind": stats.per_type_static}
        _dump(out, args.output)
        return 0
    loops = detect_loops(cfg)
    print(f"blocks {len(cfg.blocks)}  edges {len(cfg.edges)}  loops {len(loops)}")
    print(f"critical edges {stats.critical_edges} ({stats.proportion:.1%})")
    for kind, n in stats.per_type_static.items():
        if n:
            print(f"  {kind:12s} {n}")
    return 0


def cmd_xform(args):
    image = _read_image(args.image)
    meta = _read_meta(args.meta, args.image)
    build = build_pair(image, meta, args.policy)
    Path(args.oracle).write_bytes(serialize(build.oracle))
    Path(args.tracer).write_bytes(serialize(build.tracer))
    write_mapping(args.map, build.table)
    _dump(build.origin_json(), f"{args.tracer}.origin.json")
    print(f"{args.policy}: {build.n_sites} sites, {len(build.table)} oracle patches, "
          f"{len(build.dropped)} dropped, {len(build.skipped)} skipped", file=sys.stderr)
    for cand, why in sorted(build.skipped.items(), key=str):
        print(f"  skipped {cand}: {why}", file=sys.stderr)
    return 0


def _read_seeds(path):
    p = Path(path)
    files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
    return [f.read_bytes() for f in files]


def _origin(path):
    p = Path(f"{path}.origin.json")
    if not p.exists():
        return {}, {}
    obj = json.loads(p.read_text())
    return ({int(k): v for k, v in obj.get("oracle", {}).items()},
            {int(k): v for k, v in obj.get("tracer", {}).items()})


def _site_view(image, meta, mapping):
    """Enough of a build for edge inference, rebuilt from the original image and the mapping."""
    n = 1 + max((r.tracer_id for r in mapping), default=-1)
    sites = [SiteKind("Unmapped", 0)] * n
    for r in mapping:
        sites[r.tracer_id] = SiteKind.parse(r.kind)
    return SimpleNamespace(cfg=build_cfg(image, meta), sites=sites)


def cmd_fuzz(args):
    if args.target:
        target = load_corpus([args.target])[0]
        build = target.build("block" if args.mode == "block-cgt" else "full")
        targets = Targets.from_build(build)
        seeds = _read_seeds(args.seeds) if args.seeds else list(target.seeds)
        view, name = build, target.name
    else:
        if not (args.oracle and args.tracer and args.map):
            raise ValueError("give --target, or --oracle, --tracer and --map")
        if not args.seeds:
            raise ValueError("--seeds is required without --target")
        mapping = read_mapping(args.map)
        o_origin, t_origin = _origin(args.tracer)
        native = _read_image(args.image) if args.image else None
        targets = Targets(_read_image(args.oracle), _read_image(args.tracer), mapping, native, o_origin, t_origin)
        seeds = _read_seeds(args.seeds)
        view = _site_view(native, _read_meta(args.meta, args.image), mapping) if args.image else None
        name = args.name or Path(args.image or args.oracle).name.split(".")[0]
    cfg = CampaignConfig(args.mode, seeds, rng_seed=args.rng_seed, wall_budget=int(args.wall_megacycles * MEGA),
                         per_exec_budget=args.per_exec_budget, max_input_len=args.max_input_len,
                         logid_cost=args.logid_cost, exec_overhead=args.exec_overhead)
    rep = run_campaign(cfg, targets)
    extra = {}
    if view is not None and args.mode != "native-baseline":
        got, _ = infer_edges(view, rep.covered_sites)
        extra["edges"] = sorted([*view.cfg.addr_pair(e), e.kind] for e in got)
    write_campaign(rep, args.out, name, extra)
    print(f"{args.mode}: {rep.executions} execs in {rep.cycles / MEGA:.1f} Mc "
          f"({rep.execs_per_megacycle:.0f}/Mc), {len(rep.covered_sites)} sites, {len(rep.queue)} queued, "
          f"{len(rep.bugs)} bugs")
    return 0


def cmd_bench(args):
    targets = load_corpus(args.targets or None)
    problems = []
    for t in targets:
        problems += verify_ground_truth(t)
        problems += check_builds(t)
    seeds = args.rng_seeds or list(range(1, args.trials + 1))
    res = run_bench(targets, args.modes or MODES, int(args.wall_megacycles * MEGA), len(seeds), seeds,
                    **({"exec_overhead": args.exec_overhead} if args.exec_overhead is not None else {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_name = {t.name: t for t in targets}
    for c in res.cells:
        if c.omitted:
            print(f"omitted {c.target}/{c.mode}: {c.omitted}", file=sys.stderr)
            continue
        cell_dir = out / "cells" / f"{c.target}-{c.mode}-{c.rng_seed}"
        write_campaign(c.report, cell_dir, c.target, {"edges": sorted(list(e) for e in c.edges)})
        if not args.no_checks:
            problems += check_cell(by_name[c.target], c)
    write_bench(res, out / "bench.csv", out / "bench.json")
    print(",".join(BENCH_COLUMNS))
    for r in res.rows:
        print(",".join(f"{r.get(k, ''):.2f}" if isinstance(r.get(k), float) else str(r.get(k, ""))
                       for k in BENCH_COLUMNS))
    modes = args.modes or MODES
    if {"full-cgt", "always-trace"} <= set(modes):
        print(f"mean full-cgt : always-trace = {res.mean_ratio('full-cgt', 'always-trace'):.3f}")
    if {"full-cgt", "block-cgt"} <= set(modes):
        print(f"mean full-cgt : block-cgt = {res.mean_ratio('full-cgt', 'block-cgt'):.3f}")
    for p in problems:
        print(f"INVARIANT FAILED: {p}", file=sys.stderr)
    print(f"invariant checks: {'all passed' if not problems else f'{len(problems)} failed'}")
    return 0 if not problems else 1


def cmd_report(args):
    rows = report(args.dirs)
    if args.csv:
        write_report(rows, args.csv, args.json)
    elif args.json:
        _dump(rows, args.json)
    print(",".join(REPORT_COLUMNS))
    for r in rows:
        print(",".join(f"{r[k]:.3f}" if isinstance(r[k], float) else str(r[k]) for k in REPORT_COLUMNS))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cgtrace", description="Coverage-guided tracing toolkit for the toy ISA.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("asm", help="assemble a source file into an image")
    a.add_argument("source")
    a.add_argument("-o", "--output", required=True)
    a.add_argument("--meta", help="metadata JSON path (default: <output>.meta.json)")
    a.add_argument("--list", action="store_true", help="print a disassembly listing")
    a.set_defaults(func=cmd_asm)

    c = sub.add_parser("cfg", help="recover the control-flow graph of an image")
    c.add_argument("image")
    c.add_argument("--meta")
    c.add_argument("--json", action="store_true")
    c.add_argument("-o", "--output", help="write JSON here instead of stdout")
    c.set_defaults(func=cmd_cfg)

    x = sub.add_parser("xform", help="build the oracle/tracer pair and its mapping")
    x.add_argument("image")
    x.add_argument("--meta")
    x.add_argument("--policy", choices=POLICIES, default="full")
    x.add_argument("--oracle", required=True)
    x.add_argument("--tracer", required=True)
    x.add_argument("--map", required=True)
    x.set_defaults(func=cmd_xform)

    f = sub.add_parser("fuzz", help="run one campaign")
    f.add_argument("--target", help="corpus target name (builds the pair itself)")
    f.add_argument("--oracle")
    f.add_argument("--tracer")
    f.add_argument("--map")
    f.add_argument("--image", help="original image (native mode, edge inference)")
    f.add_argument("--meta")
    f.add_argument("--name", help="target name recorded in state.json (default: image file stem)")
    f.add_argument("--mode", choices=MODES, default="full-cgt")
    f.add_argument("--seeds", help="seed file or directory of seed files")
    f.add_argument("--wall-megacycles", type=float, default=500.0)
    f.add_argument("--rng-seed", type=int, default=0)
    f.add_argument("--per-exec-budget", type=int, default=CampaignConfig.per_exec_budget)
    f.add_argument("--max-input-len", type=int, default=CampaignConfig.max_input_len)
    f.add_argument("--logid-cost", type=int, default=CampaignConfig.logid_cost)
    f.add_argument("--exec-overhead", type=int, default=CampaignConfig.exec_overhead)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuzz)

    b = sub.add_parser("bench", help="run the corpus under several modes and check invariants")
    b.add_argument("--targets", nargs="*")
    b.add_argument("--modes", nargs="*", choices=MODES)
    b.add_argument("--wall-megacycles", type=float, default=500.0)
    b.add_argument("--trials", type=int, default=1)
    b.add_argument("--rng-seeds", type=int, nargs="*")
    b.add_argument("--exec-overhead", type=int)
    b.add_argument("--no-checks", action="store_true", help="skip per-campaign invariant checks")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="compare campaign output directories")
    r.add_argument("dirs", nargs="+")
    r.add_argument("--csv")
    r.add_argument("--json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AsmError, CfgError, ImageFormatError, TransformError, LayoutError, ReportError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"cgtrace {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
