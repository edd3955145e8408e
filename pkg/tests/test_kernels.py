import os
import subprocess
import sys

import numpy as np
import pytest

from wbgnn import _kernels as kn

pytestmark = pytest.mark.skipif(not kn.HAVE_NUMBA, reason="numba not installed")


def test_ray_sum_paths_agree(rng):
    p, m = 40, 3
    coef = rng.normal(size=p) + 1j * rng.normal(size=p)
    delay = rng.uniform(0, 1e-6, p)
    freqs = np.array([-1.0e6, 0.0, 1.0e6])
    a_rx = np.exp(1j * rng.uniform(-np.pi, np.pi, (p, 2)))
    a_tx = np.exp(1j * rng.uniform(-np.pi, np.pi, (p, 4)))
    a = kn.ray_sum_np(coef, delay, freqs, a_rx, a_tx)
    b = kn.ray_sum_nb(coef, delay, freqs, a_rx, a_tx)
    assert a.shape == (m, 2, 4)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_corr_feature_paths_agree(rng):
    h = rng.normal(size=(2, 5, 4)) + 1j * rng.normal(size=(2, 5, 4))
    h[1, 3] = 0
    a, za = kn.corr_feature_np(h)
    b, zb = kn.corr_feature_nb(h)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    assert za == zb == 1


def test_stream_rates_paths_agree(rng):
    g = rng.normal(size=(3, 2, 4, 4)) + 1j * rng.normal(size=(3, 2, 4, 4))
    w = rng.uniform(0.5, 2, size=(3, 2, 4))
    np.testing.assert_allclose(kn.stream_rates_np(g, w, 0.3), kn.stream_rates_nb(g, w, 0.3), rtol=1e-12)


def test_power_grid_paths_agree():
    a = kn.power_grid_np(1.3, 0.4, 0.2, 2.0, 11)
    b = kn.power_grid_nb(1.3, 0.4, 0.2, 2.0, 11)
    np.testing.assert_allclose(a, b, rtol=1e-12)


@pytest.mark.parametrize("value, expected", [("0", "False"), ("off", "False"), ("1", "True")])
def test_environment_flag_selects_path(value, expected):
    env = dict(os.environ, WBGNN_NUMBA=value)
    out = subprocess.run(
        [sys.executable, "-c", "from wbgnn import _kernels as k; print(k.USE_NUMBA, k.stream_rates is k.stream_rates_np)"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.split()
    assert out[0] == expected
    assert out[1] == str(expected == "False")
