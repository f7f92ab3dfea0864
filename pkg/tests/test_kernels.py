import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import make_biped, make_quad, random_state
from lljump import kernels



def batch(model, rng, B=16):
    X = np.array([random_state(rng).as_vector() for _ in range(B)])
    F = rng.normal(size=(B, model.n_contacts, 3)) * 40
    P = X[:, None, :3] + rng.normal(size=(B, model.n_legs, 3)) * 0.3
    return X, F, P


@pytest.mark.skipif(kernels._cy is None, reason="compiled kernels not built")
@pytest.mark.parametrize("make", [make_quad, make_biped])
def test_backends_agree(make):
    model = make()
    X, F, P = batch(model, np.random.default_rng(0))
    out = {}
    prev = kernels.BACKEND
    try:
        for name in ("numpy", "cython"):
            kernels.use_backend(name)
            out[name] = (kernels.dynamics_batch(X, F, P, model.params), kernels.rk4_batch(X, F, P, 2.5e-3, model.params))
    finally:
        kernels.use_backend(prev)
    for a, b in zip(out["numpy"], out["cython"]):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12 * (1 + np.abs(a).max()))


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_pure_python_fallback_selected_by_env():
    env = dict(os.environ, LLJUMP_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import lljump; print(lljump.BACKEND)"], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
