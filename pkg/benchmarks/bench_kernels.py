#!/usr/bin/env python3
"""Benchmark: numba-compiled kernels vs the pure-numpy fallback.

Each mode runs in its own interpreter (the switch is read at import). The
first call in each mode is a warm-up, so numba compile time is excluded and
reported separately.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--json PATH]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from zdpolicy import NUMBA_ENABLED
from zdpolicy.dynamics import cartpole_normal_form
from zdpolicy.linalg import linearize_about_origin, place_poles
from zdpolicy.linear_zdp import build_linear_zdp, select_invariant_subspace
from zdpolicy.mlp import NetworkPsi, init_mlp
from zdpolicy.ocp import IlqrConfig, OptimalControl, QuadraticCost
from zdpolicy.runtime import TrackingController, simulate

repeats = int(sys.argv[1])
nf = cartpole_normal_form()
lm = linearize_about_origin(nf)
k = place_poles(lm, [-1.0, -2.0, -3.0, -4.0])
psi = build_linear_zdp(select_invariant_subspace(lm.a - np.outer(lm.b, k.k), 2, 2), lm, k).psi()
net = NetworkPsi(init_mlp(2, 2, (64, 64), "tanh", seed=0))
ctrl = TrackingController(nf, psi)
oc = OptimalControl(nf, QuadraticCost.identity(4, 0.01), IlqrConfig())
zeta0 = np.array([0.0, 0.0, 0.3, 0.0])

def sim():
    simulate(nf, ctrl, zeta0, 10.0, 0.01)

def mlp():
    z = np.array([0.2, -0.1])
    for _ in range(1000):
        net.eval_all(z)

def ilqr():
    oc.solve(zeta0)

def sens():
    oc.sensitivity(oc.solve(zeta0))

out = {"numba": NUMBA_ENABLED}
for name, fn in (("simulate_10s", sim), ("mlp_eval_x1000", mlp), ("ilqr_solve", ilqr), ("ddp_sensitivity", sens)):
    t0 = time.perf_counter()
    fn()
    first = time.perf_counter() - t0
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    out[name] = {"first_s": first, "best_s": min(times)}
print(json.dumps(out))
"""


def run_mode(disable: bool, repeats: int) -> dict:
    env = dict(os.environ)
    env.pop("ZDP_DISABLE_NUMBA", None)
    if disable:
        env["ZDP_DISABLE_NUMBA"] = "1"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeats)], env=env, capture_output=True, text=True,
                          check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--json", help="write raw timings here")
    args = parser.parse_args()

    fast = run_mode(False, args.repeats)
    slow = run_mode(True, args.repeats)
    print(f"{'workload':<18} {'numba (s)':>11} {'numpy (s)':>11} {'speedup':>9} {'first call (s)':>15}")
    for name in (k for k in fast if k != "numba"):
        f, s = fast[name]["best_s"], slow[name]["best_s"]
        print(f"{name:<18} {f:11.4f} {s:11.4f} {s / f:8.1f}x {fast[name]['first_s']:15.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": fast, "numpy": slow}, fh, indent=1)


if __name__ == "__main__":
    main()
