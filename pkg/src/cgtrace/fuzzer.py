"""Mutation engine and the CGT execution orchestrator.

Every mutant first runs on the oracle. A silent run is discarded; a trap or a
fault sends the input to the tracer, which decides what happened: a fault in
the tracer too is a real bug, otherwise the input reached new sites, whose
oracle patches are then undone. The inner loop (mutate, execute, check for a
signal) runs inside the JIT kernel and only comes back to Python when
something needs deciding.
"""

import csv
import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from .transform import BUCKET_CHECK, MISTARGETED_EDGE, SiteKind
from .vm import ExecConfig, Exit, Fault, Machine, Timeout, Trap

MODES = ("full-cgt", "block-cgt", "always-trace", "native-baseline")
CGT_MODES = ("full-cgt", "block-cgt")

DISCARD = "Discard"
QUEUED_NEW = "QueuedNewCoverage"
QUEUED_MISTARGETED = "QueuedMistargeted"
TRUE_CRASH = "TrueCrash"
TIMEOUT_DISCARD = "TimeoutDiscard"

REASON_SEED = "seed"
REASON_NEW = "new-site"
REASON_MISTARGETED = "mistargeted-edge"
STACK_FRAMES = 6


@dataclass
class CampaignConfig:
    mode: str
    seeds: list
    rng_seed: int = 0
    wall_budget: int = 500_000_000      # total cycles charged to the campaign
    per_exec_budget: int = 50_000
    max_input_len: int = 1024
    logid_cost: int = 20
    tracer_budget_factor: int = 64      # tracer runs get this many times the per-exec budget
    havoc_execs: int = 256              # havoc mutants per queue visit
    det_max_len: int = 64               # bit flips only for entries up to this length
    exec_overhead: int = 200            # fixed cycles per execution standing for process startup
    samples: int = 50                   # stats rows over the campaign

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.wall_budget <= 0 or self.per_exec_budget <= 0:
            raise ValueError("budgets must be positive")
        if self.max_input_len < 1:
            raise ValueError("max_input_len must be positive")


@dataclass
class QueueEntry:
    id: int
    data: bytes
    parent: int
    reason: str
    cycles: int = 0
    depth: int = 0
    slow: bool = False
    visits: int = 0
    det_done: bool = False

    def order_key(self):
        return (self.visits, self.depth, self.slow, self.id)


@dataclass
class BugRecord:
    stack_hash: str
    first_input: bytes
    count: int
    kind: str
    fault_pc: int
    frames: tuple


@dataclass
class Disposition:
    kind: str
    new_sites: frozenset = frozenset()
    bug: BugRecord = None


@dataclass
class Targets:
    """Everything a campaign executes: the pair, its mapping, and optionally the original."""

    oracle: object = None
    tracer: object = None
    mapping: list = field(default_factory=list)
    native: object = None
    oracle_origin: dict = field(default_factory=dict)
    tracer_origin: dict = field(default_factory=dict)

    @classmethod
    def from_build(cls, build):
        return cls(build.oracle, build.tracer, list(build.table), build.image,
                   build.oracle_origin, build.tracer_origin)


class CoverageState:
    def __init__(self, mapping):
        self.covered = set()
        self.remaining = {r.tracer_id: r for r in mapping}
        self.loop_progress = {}
        self.bucket_of = {}
        for r in mapping:
            k = SiteKind.parse(r.kind)
            if k.name == BUCKET_CHECK:
                self.bucket_of[r.tracer_id] = (k.addr, k.bucket)
                self.loop_progress.setdefault(k.addr, 0)

    def fold(self, trace):
        """Add ``trace``'s sites; returns (new sites, records whose patches must be undone)."""
        new = [s for s in (trace or ()) if s not in self.covered]
        self.covered.update(new)
        restore = []
        for s in new:
            r = self.remaining.pop(s, None)
            if r is not None:
                restore.append(r)
            if s in self.bucket_of:
                h, b = self.bucket_of[s]
                self.loop_progress[h] = max(self.loop_progress[h], b)
        return frozenset(new), restore


def stack_hash(kind, fault_pc, frames):
    text = f"{kind}:{fault_pc:#x}:" + ",".join(f"{f:#x}" for f in frames)
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def triage_crash(result, origin=None, data=b""):
    """Bug identity of a faulting run: top-6 return addresses, fault pc and kind.

    ``origin`` maps addresses of a rewritten image back to the original so
    hashes agree between the original program and its rewritten copies.
    """
    if not isinstance(result.outcome, Fault):
        raise ValueError("triage needs a faulting run")
    tr = (lambda a: origin.get(a, a)) if origin else (lambda a: a)
    frames = tuple(tr(a) for a in reversed(result.call_stack[-STACK_FRAMES:]))
    pc = tr(result.outcome.pc)
    kind = result.outcome.kind
    return BugRecord(stack_hash(kind, pc, frames), bytes(data), 1, kind, pc, frames)


def mutate(data, state, max_len, stage="havoc", index=0):
    """One mutant of ``data``: bit ``index`` flipped, or a havoc stack drawn from ``state``.

    ``state`` is a one-element uint64 array holding the generator state; it is advanced.
    """
    src = np.frombuffer(bytes(data), dtype=np.uint8)
    buf = np.zeros(max(max_len, len(data)) + 8, dtype=np.uint8)
    if stage == "bitflip":
        n = K.bitflip(src, len(src), index, buf)
    else:
        tmp = np.zeros_like(buf)
        n = K.havoc(src, len(src), max_len, state, buf, tmp)
    return buf[:n].tobytes()


PERF_STEPS = ((10.0, 0.1), (4.0, 0.25), (2.0, 0.5), (4 / 3, 0.75))
FAST_STEPS = ((0.25, 3.0), (1 / 3, 2.0), (0.5, 1.5))


def perf_factor(cycles, avg_cycles):
    """AFL-style performance score: slow entries get fewer havoc runs, fast ones more."""
    if avg_cycles <= 0:
        return 1.0
    r = cycles / avg_cycles
    for limit, f in PERF_STEPS:
        if r > limit:
            return f
    for limit, f in FAST_STEPS:
        if r < limit:
            return f
    return 1.0


def rng_state(seed):
    return np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)


@dataclass
class CampaignReport:
    mode: str
    executions: int
    cycles: int
    covered_sites: frozenset
    loop_progress: dict
    queue: list
    bugs: dict
    samples: list
    dispositions: Counter
    anomalies: int = 0
    unmapped: int = 0
    crash_inputs: list = field(default_factory=list)

    def covering_inputs(self):
        """Every input whose trace was folded into the covered sites."""
        return [e.data for e in self.queue] + list(self.crash_inputs)

    @property
    def execs_per_megacycle(self):
        return self.executions / (self.cycles / 1e6) if self.cycles else 0.0


class Campaign:
    def __init__(self, config, targets, audit=None):
        self.config = config
        self.audit = audit              # optional list receiving (input, disposition) per mutant
        self.t = targets
        c = config
        self.exec_cfg = ExecConfig(c.per_exec_budget, c.logid_cost)
        self.tracer_budget = c.per_exec_budget * c.tracer_budget_factor
        n_sites = 1 + max([r.tracer_id for r in targets.mapping], default=0)
        self.n_sites = n_sites
        mode = c.mode
        if mode in CGT_MODES:
            self.runner = Machine(targets.oracle, self.exec_cfg)
        elif mode == "always-trace":
            self.runner = Machine(targets.tracer, self.exec_cfg.with_budget(self.tracer_budget), n_sites)
        else:
            self.runner = Machine(targets.native or targets.oracle, self.exec_cfg)
        self.tracer = Machine(targets.tracer, self.exec_cfg, n_sites) if targets.tracer else None
        self.state = CoverageState(targets.mapping)
        self.live_mistargets = {r.oracle_addr - 2 for r in targets.mapping
                                if r.kind.startswith(MISTARGETED_EDGE)}
        self.covered_arr = np.zeros(n_sites, dtype=np.uint8)
        self.rng = rng_state(c.rng_seed)
        self.queue = []
        self.bugs = {}
        self.execs = 0
        self.cycles = 0
        self.samples = []
        self.next_sample = 0
        self.dispositions = Counter()
        self.anomalies = 0
        self.unmapped = 0
        self.crash_inputs = []          # crashing inputs whose sites were folded
        cap = c.max_input_len + 8
        self.buf = np.zeros(cap, dtype=np.uint8)
        self.tmp = np.zeros(cap, dtype=np.uint8)
        self.stats = np.zeros(5, dtype=np.int64)

    # -- bookkeeping ----------------------------------------------------
    def charge(self, cycles, execs=0):
        self.cycles += cycles + execs * self.config.exec_overhead
        self.execs += execs
        while self.cycles >= self.next_sample:
            self.samples.append((self.cycles, self.execs, len(self.state.covered), len(self.queue), len(self.bugs)))
            self.next_sample += max(1, self.config.wall_budget // self.config.samples)

    def wall_left(self):
        return self.config.wall_budget - self.cycles

    def add_bug(self, rec):
        old = self.bugs.get(rec.stack_hash)
        if old is None:
            self.bugs[rec.stack_hash] = rec
        else:
            old.count += 1
        return self.bugs[rec.stack_hash]

    def enqueue(self, data, parent, reason, cycles, slow=False):
        depth = 0 if parent < 0 else self.queue[parent].depth + 1
        e = QueueEntry(len(self.queue), bytes(data), parent, reason, cycles, depth, slow)
        self.queue.append(e)
        return e

    def fold(self, trace):
        new, restore = self.state.fold(trace)
        if self.config.mode in CGT_MODES:
            for r in restore:
                self.runner.write(r.oracle_addr, r.original_bytes)
                self.live_mistargets.discard(r.oracle_addr - 2)
            self.unmapped += len(new) - len(restore)
        for s in new:
            if s < self.n_sites:
                self.covered_arr[s] = 1
        return new

    def run_tracer(self, data):
        res = self.tracer.run(data, budget=self.tracer_budget)
        self.charge(res.cycles)
        return res

    # -- disposition ----------------------------------------------------
    def process_input(self, data, parent=-1, oracle_result=None):
        """Run ``data`` through the mode's pipeline and act on the outcome."""
        d = self._dispose(data, parent, oracle_result)
        if self.audit is not None:
            self.audit.append((bytes(data), d))
        return d

    def _dispose(self, data, parent, oracle_result):
        mode = self.config.mode
        if oracle_result is None:
            oracle_result = self.runner.run(data)
            self.charge(oracle_result.cycles, 1)
        oc = oracle_result.outcome
        if mode == "native-baseline":
            if isinstance(oc, Fault):
                bug = self.add_bug(triage_crash(oracle_result, None, data))
                return self._note(Disposition(TRUE_CRASH, bug=bug))
            return self._note(Disposition(TIMEOUT_DISCARD if isinstance(oc, Timeout) else DISCARD))
        if mode == "always-trace":
            return self._after_trace(data, parent, oracle_result, Trap(0))
        if isinstance(oc, Exit):
            return self._note(Disposition(DISCARD))
        if isinstance(oc, Timeout):
            return self._note(Disposition(TIMEOUT_DISCARD))
        if isinstance(oc, Fault) and not self.is_mistarget_signal(oc):
            # The run reached the fault without trapping, so every site on the way
            # was already covered: a real bug, and the oracle run is already exact.
            bug = self.add_bug(triage_crash(oracle_result, self.t.oracle_origin, data))
            return self._note(Disposition(TRUE_CRASH, bug=bug))
        return self._after_trace(data, parent, self.run_tracer(data), oc)

    def is_mistarget_signal(self, fault):
        return fault.addr == 0 and fault.pc in self.live_mistargets

    def _after_trace(self, data, parent, tres, signal):
        toc = tres.outcome
        if isinstance(toc, Fault):
            bug = self.add_bug(triage_crash(tres, self.t.tracer_origin, data))
            new = self.fold(tres.trace)
            if new:
                self.crash_inputs.append(bytes(data))
            return self._note(Disposition(TRUE_CRASH, new, bug))
        if isinstance(toc, Timeout):
            return self._note(Disposition(TIMEOUT_DISCARD))
        new = self.fold(tres.trace)
        if not new:
            if self.config.mode in CGT_MODES:
                self.anomalies += 1     # a signal with nothing new behind it
            return self._note(Disposition(DISCARD))
        reason, kind = ((REASON_MISTARGETED, QUEUED_MISTARGETED) if isinstance(signal, Fault)
                        else (REASON_NEW, QUEUED_NEW))
        self.enqueue(data, parent, reason, tres.cycles)
        return self._note(Disposition(kind, new))

    def _note(self, d):
        self.dispositions[d.kind] += 1
        return d

    def calibrate(self, entry):
        """One tracer run of ``entry``; its cycles are recorded and its sites folded."""
        res = self.run_tracer(entry.data)
        entry.cycles = res.cycles
        if isinstance(res.outcome, Timeout):
            entry.slow = True
        elif isinstance(res.outcome, Exit):
            self.fold(res.trace)
        return res

    # -- main loop ------------------------------------------------------
    def load_seeds(self):
        for s in self.config.seeds:
            data = bytes(s[:self.config.max_input_len])
            if self.config.mode == "native-baseline":
                res = self.runner.run(data)
                self.charge(res.cycles, 1)
                if isinstance(res.outcome, Fault):
                    self.add_bug(triage_crash(res, None, data))
                else:
                    self.enqueue(data, -1, REASON_SEED, res.cycles, isinstance(res.outcome, Timeout))
                continue
            self.execs += 1
            e = QueueEntry(len(self.queue), data, -1, REASON_SEED)
            res = self.calibrate(e)
            if isinstance(res.outcome, Fault):
                self.add_bug(triage_crash(res, self.t.tracer_origin, data))
                if self.fold(res.trace):
                    self.crash_inputs.append(data)
                continue
            e.id = len(self.queue)
            self.queue.append(e)

    def batch_mode(self):
        return {"always-trace": K.STOP_ON_NEW_TRACE, "native-baseline": K.STOP_ON_FAULT}.get(
            self.config.mode, K.STOP_ON_SIGNAL)

    def fuzz_stage(self, entry, stage, count):
        m = self.runner
        img = m.image
        parent = np.frombuffer(entry.data, dtype=np.uint8)
        i = 0
        while i < count:
            left = self.wall_left()
            if left <= 0:
                return False
            status = K.fuzz_batch(stage, parent, len(parent), i, count - i, self.rng,
                                  self.config.max_input_len, self.batch_mode(), self.covered_arr, left,
                                  m.code, img.code_base, m.data_init, img.data_base, img.entry,
                                  m.cfg.cycle_budget, m.cfg.logid_cost, m.shadow, m.data, m.stack, m.seen,
                                  m.trace, m.no_leaders, m.no_ltrace, m.out, m.res, self.buf, self.tmp,
                                  self.stats)
            i, execs, cycles = int(self.stats[0]), int(self.stats[1]), int(self.stats[2])
            self.charge(cycles, execs)
            if status == K.HIT:
                data = self.buf[:self.stats[4]].tobytes()
                self.process_input(data, entry.id, m._result())
            elif status == K.BUDGET:
                return False
        return True

    def havoc_count(self, entry):
        """Havoc budget for one visit, scaled by how fast ``entry`` runs against the queue average."""
        avg = sum(e.cycles for e in self.queue) / len(self.queue)
        return max(16, int(self.config.havoc_execs * perf_factor(entry.cycles, avg)))

    def run(self):
        self.charge(0)
        self.load_seeds()
        if not self.queue:
            return self.report()
        while self.wall_left() > 0:
            entry = min(self.queue, key=QueueEntry.order_key)
            entry.visits += 1
            if not entry.det_done:
                entry.det_done = True
                if 0 < len(entry.data) <= self.config.det_max_len:
                    if not self.fuzz_stage(entry, 0, len(entry.data) * 8):
                        break
            if not self.fuzz_stage(entry, 1, self.havoc_count(entry)):
                break
        return self.report()

    def report(self):
        return CampaignReport(self.config.mode, self.execs, self.cycles, frozenset(self.state.covered),
                              dict(self.state.loop_progress), list(self.queue), dict(self.bugs),
                              list(self.samples), Counter(self.dispositions), self.anomalies, self.unmapped,
                              list(self.crash_inputs))


def run_campaign(config, targets, audit=None):
    return Campaign(config, targets, audit).run()


STATS_COLUMNS = ("cycles", "execs", "sites", "queue", "bugs")


def write_campaign(report, out_dir, target="", extra=None):
    """Write queue/, crashes/, stats.csv and state.json under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "queue"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "crashes"), exist_ok=True)
    for e in report.queue:
        with open(os.path.join(out_dir, "queue", f"{e.id:06d}_{e.reason}.bin"), "wb") as fh:
            fh.write(e.data)
    for h, b in report.bugs.items():
        with open(os.path.join(out_dir, "crashes", f"{h}.bin"), "wb") as fh:
            fh.write(b.first_input)
    with open(os.path.join(out_dir, "stats.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        w.writerows(report.samples)
    state = {
        "mode": report.mode,
        "target": target,
        "executions": report.executions,
        "cycles": report.cycles,
        "execsPerMegacycle": report.execs_per_megacycle,
        "coveredSites": sorted(report.covered_sites),
        "loopProgress": {f"{h:#x}": b for h, b in sorted(report.loop_progress.items())},
        "bugs": {h: {"count": b.count, "kind": b.kind, "faultPC": b.fault_pc, "frames": list(b.frames)}
                 for h, b in sorted(report.bugs.items())},
        "dispositions": dict(report.dispositions),
    }
    state.update(extra or {})
    with open(os.path.join(out_dir, "state.json"), "w") as fh:
        json.dump(state, fh, indent=1, sort_keys=True)
    return state
