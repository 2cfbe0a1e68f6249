"""The numba and numpy kernel paths must agree to round-off."""

import os
import subprocess
import sys

import numpy as np
import pytest

from mae_lab import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba path disabled")


def _nb(name):
    return getattr(kernels, f"_{name}_nb")


@needs_numba
def test_layernorm_paths_agree(rng):
    x = rng.standard_normal((40, 24)) * 3 + 1
    g, b = rng.standard_normal(24), rng.standard_normal(24)
    ref = kernels.layernorm_fwd_np(x, g, b, 1e-6)
    got = _nb("layernorm_fwd")(x, g, b, 1e-6)
    for r, o in zip(ref, got):
        np.testing.assert_allclose(o, r, rtol=1e-12, atol=1e-12)
    dy = rng.standard_normal(x.shape)
    _, xhat, rstd = ref
    for r, o in zip(kernels.layernorm_bwd_np(dy, xhat, rstd, g), _nb("layernorm_bwd")(dy, xhat, rstd, g)):
        np.testing.assert_allclose(o, r, rtol=1e-11, atol=1e-11)


@needs_numba
@pytest.mark.parametrize("name", ["softmax", "gelu"])
def test_activation_paths_agree(name, rng):
    x = rng.standard_normal((17, 33)) * 4
    dy = rng.standard_normal(x.shape)
    np.testing.assert_allclose(_nb(f"{name}_fwd")(x), getattr(kernels, f"{name}_fwd_np")(x), rtol=1e-12, atol=1e-14)
    first = kernels.softmax_fwd_np(x) if name == "softmax" else x
    np.testing.assert_allclose(_nb(f"{name}_bwd")(first, dy), getattr(kernels, f"{name}_bwd_np")(first, dy),
                               rtol=1e-11, atol=1e-13)


@needs_numba
def test_scatter_add_with_duplicates(rng):
    idx = rng.integers(0, 7, size=50)
    src = rng.standard_normal((50, 5))
    a = kernels.scatter_add_rows_np(np.zeros((7, 5)), idx, src)
    b = _nb("scatter_add_rows")(np.zeros((7, 5)), idx, src)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


@needs_numba
def test_patch_stats_and_midrank_agree(rng):
    p = rng.standard_normal((64, 256)) + 40
    for r, o in zip(kernels.patch_stats_np(p), _nb("patch_stats")(p)):
        np.testing.assert_allclose(o, r, rtol=1e-12, atol=1e-12)
    s = rng.integers(0, 20, size=300).astype(float)
    np.testing.assert_array_equal(kernels.midrank_np(s), _nb("midrank")(s))


def test_midrank_ties():
    np.testing.assert_array_equal(kernels.midrank(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1.0, 3.5, 2.0])


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, MAE_LAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from mae_lab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
