"""The compiled kernels and the ZDP_DISABLE_NUMBA fallback give the same numbers.

Each mode needs a fresh interpreter because the switch is read at import.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

SCRIPT = r"""
import json
import numpy as np
from zdpolicy import NUMBA_ENABLED
from zdpolicy.dynamics import cartpole_normal_form
from zdpolicy.linalg import linearize_about_origin, place_poles
from zdpolicy.linear_zdp import build_linear_zdp, select_invariant_subspace
from zdpolicy.mlp import NetworkPsi, init_mlp
from zdpolicy.ocp import IlqrConfig, OptimalControl, QuadraticCost
from zdpolicy.runtime import TrackingController, simulate

nf = cartpole_normal_form()
lm = linearize_about_origin(nf)
k = place_poles(lm, [-1.0, -2.0, -3.0, -4.0])
psi = build_linear_zdp(select_invariant_subspace(lm.a - np.outer(lm.b, k.k), 2, 2), lm, k).psi()
traj = simulate(nf, TrackingController(nf, psi), np.array([0.0, 0.0, 0.1, 0.02]), 2.0, 0.01)
net = NetworkPsi(init_mlp(2, 2, (8, 8), "tanh", seed=1))
val, jac, hess = net.eval_all(np.array([0.2, -0.3]))
oc = OptimalControl(nf, QuadraticCost.identity(4, 0.01), IlqrConfig(horizon_seconds=1.0, dt=0.02))
sol = oc.solve(np.array([0.0, 0.0, 0.2, 0.0]))
print(json.dumps({
    "numba": NUMBA_ENABLED,
    "traj": traj.states[-1].tolist(),
    "mlp": [val.tolist(), jac.tolist(), np.asarray(hess).tolist()],
    "ilqr_u": sol.nominal_inputs[:5].tolist(),
    "ilqr_cost": sol.cost,
    "sens": oc.sensitivity(sol).tolist(),
}))
"""


def _run(disable: bool) -> dict:
    env = dict(os.environ)
    env.pop("ZDP_DISABLE_NUMBA", None)
    if disable:
        env["ZDP_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, timeout=600)
    assert out.returncode == 0, out.stderr
    return json.loads(out.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def both():
    return _run(False), _run(True)


def test_modes_are_what_they_claim(both):
    fast, slow = both
    assert fast["numba"] is True
    assert slow["numba"] is False


@pytest.mark.parametrize("key", ["traj", "ilqr_u", "ilqr_cost", "sens"])
def test_numeric_parity(both, key):
    fast, slow = both
    np.testing.assert_allclose(np.array(fast[key]), np.array(slow[key]), rtol=1e-9, atol=1e-11)


def test_mlp_parity(both):
    fast, slow = both
    for a, b in zip(fast["mlp"], slow["mlp"]):
        np.testing.assert_allclose(np.array(a), np.array(b), rtol=1e-12, atol=1e-14)
