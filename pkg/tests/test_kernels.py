import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcase import kernels
from fedcase.retrieval import SSIM_C1, SSIM_C2, ssim_many

from oracles import ssim_loop

compiled = pytest.mark.skipif(kernels.compiled_ssim_maps is None, reason="compiled extension not built")


@compiled
def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"


def test_env_var_forces_fallback():
    code = "from fedcase import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, FEDCASE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@compiled
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(7, 20), st.integers(7, 20), st.integers(1, 6))
def test_backends_bitwise_identical(seed, h, w, n):
    rng = np.random.default_rng(seed)
    q = rng.integers(0, 256, (h, w), dtype=np.uint8)
    pool = rng.integers(0, 256, (n, h, w), dtype=np.uint8)
    a = kernels.python_ssim_maps(q, pool, 7, SSIM_C1, SSIM_C2)
    b = kernels.compiled_ssim_maps(q, pool, 7, SSIM_C1, SSIM_C2)
    assert a.shape == b.shape == (n, h - 6, w - 6)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("impl", ["python", "compiled"])
def test_against_loop_oracle(impl):
    fn = kernels.python_ssim_maps if impl == "python" else kernels.compiled_ssim_maps
    if fn is None:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(5)
    q = rng.integers(0, 256, (11, 9), dtype=np.uint8)
    pool = rng.integers(0, 256, (3, 11, 9), dtype=np.uint8)
    maps = fn(q, pool, 7, SSIM_C1, SSIM_C2)
    for k in range(3):
        assert abs(maps[k].mean() - ssim_loop(q, pool[k])) < 1e-9


def test_against_scikit_image():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = rng.integers(0, 256, (32, 32), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-60, 61, (32, 32)), 0, 255).astype(np.uint8)
        ref = skm.structural_similarity(a, b, win_size=7, data_range=255, gaussian_weights=False,
                                        use_sample_covariance=True)
        assert abs(float(ssim_many(a, [b])[0]) - ref) < 1e-9
