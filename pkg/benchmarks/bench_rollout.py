"""Plant rollout speed: numba kernels vs the plain-Python fallback.

Each path runs in its own interpreter because the JIT switch is read at
import time.  The compiled path reports warm timings (first call excluded);
the fallback is slow, so it defaults to a single simulated day.

    python3 benchmarks/bench_rollout.py --days 7 --fallback-days 1
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from tropic_twin import config, plant
from tropic_twin._jit import JIT_ENABLED

days, repeats = int(sys.argv[1]), int(sys.argv[2])
cfg = config.default_case_study()
exo = plant.synth_workload_array(days, plant.CONTROL_PERIOD_S, 0)
actions = np.tile([20.0, 0.9, 7.0], (len(exo), 1))
t0 = time.perf_counter()
tr = plant.simulate(actions, exo, cfg)
first_s = time.perf_counter() - t0
times = []
for _ in range(repeats):
    t0 = time.perf_counter()
    tr = plant.simulate(actions, exo, cfg)
    times.append(time.perf_counter() - t0)
print(json.dumps({
    "jit": JIT_ENABLED,
    "days": days,
    "substeps": len(exo) * tr.substeps,
    "first_call_s": first_s,
    "best_s": min(times) if times else first_s,
    "checksum": float(tr.cooling_power.sum()),
}))
"""


def run(days, repeats, disable_jit):
    env = dict(os.environ)
    if disable_jit:
        env["TROPIC_TWIN_DISABLE_JIT"] = "1"
    else:
        env.pop("TROPIC_TWIN_DISABLE_JIT", None)
    out = subprocess.run(
        [sys.executable, "-c", CHILD, str(days), str(repeats)],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--days", type=int, default=7, help="days simulated on the compiled path")
    ap.add_argument("--fallback-days", type=int, default=1, help="days simulated on the fallback path")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    jit = run(args.days, args.repeats, disable_jit=False)
    ref = run(args.fallback_days, 0, disable_jit=True)
    if not jit["jit"]:
        print("warning: numba unavailable, both runs used the fallback")

    jit_rate = jit["substeps"] / jit["best_s"]
    ref_rate = ref["substeps"] / ref["best_s"]
    print(f"{'path':<10}{'days':>6}{'substeps':>10}{'time_s':>10}{'substeps/s':>14}")
    print(f"{'numba':<10}{jit['days']:>6}{jit['substeps']:>10}{jit['best_s']:>10.3f}{jit_rate:>14.0f}")
    print(f"{'fallback':<10}{ref['days']:>6}{ref['substeps']:>10}{ref['best_s']:>10.3f}{ref_rate:>14.0f}")
    print(f"speedup x{jit_rate / ref_rate:.1f}  (numba first call incl. compile/cache load: {jit['first_call_s']:.2f} s)")

    if args.days == args.fallback_days:
        # Same workload on both paths: the answers must agree.
        rel = abs(jit["checksum"] - ref["checksum"]) / abs(ref["checksum"])
        print(f"cooling-power checksum relative difference: {rel:.2e}")


if __name__ == "__main__":
    main()
