"""Show loop-bucket coverage finding a bug that block coverage misses.

    python demos/loopcrash_buckets.py [megacycles]

The loopcrash target only faults after its loop has run 128 times. Under
block coverage every iteration count looks the same, so the fuzzer has no
reason to keep longer inputs. With bucket checks each new power-of-two range
of iteration counts is a new site, and the queue climbs towards the bug.
"""

import sys

from cgtrace.bench import load_target
from cgtrace.fuzzer import CampaignConfig, Targets, run_campaign


def main():
    budget = int(float(sys.argv[1]) * 1_000_000) if len(sys.argv) > 1 else 300_000_000
    t = load_target("loopcrash")
    head = t.label("head")
    for mode, policy in (("full-cgt", "full"), ("block-cgt", "block")):
        rep = run_campaign(CampaignConfig(mode, list(t.seeds), rng_seed=1, wall_budget=budget),
                           Targets.from_build(t.build(policy)))
        longest = max(len(e.data) for e in rep.queue)
        print(f"{mode}: {rep.executions} execs, queue {len(rep.queue)}, longest queued input {longest}, "
              f"loop bucket {rep.loop_progress.get(head, '-')}, bugs {len(rep.bugs)}")


if __name__ == "__main__":
    main()
