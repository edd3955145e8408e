"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``WBGNN_NUMBA`` is not set to ``0``/``off``/``false``.  Both paths
are always importable (``*_np`` / ``*_nb``) so tests and the benchmark can
compare them directly; when numba is missing the ``*_nb`` names alias the
numpy versions.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("WBGNN_NUMBA", "1").lower() not in (
    "0",
    "off",
    "false",
    "no",
)


# -- channel synthesis ------------------------------------------------------------

def ray_sum_np(coef, delay, freqs, a_rx, a_tx):
    """H[m, r, n] = sum_p coef_p exp(-2j pi f_m tau_p) a_rx[p, r] conj(a_tx[p, n])."""
    phase = np.exp(-2j * np.pi * np.outer(freqs, delay)) * coef[None, :]
    return np.einsum("mp,pr,pn->mrn", phase, a_rx, np.conj(a_tx))


def _ray_sum_loop(coef, delay, freqs, a_rx, a_tx):
    n_paths = coef.shape[0]
    n_rb = freqs.shape[0]
    n_r = a_rx.shape[1]
    n_t = a_tx.shape[1]
    out = np.zeros((n_rb, n_r, n_t), dtype=np.complex128)
    for m in range(n_rb):
        for p in range(n_paths):
            arg = -2.0 * np.pi * freqs[m] * delay[p]
            c = coef[p] * complex(np.cos(arg), np.sin(arg))
            for r in range(n_r):
                cr = c * a_rx[p, r]
                for n in range(n_t):
                    out[m, r, n] += cr * np.conj(a_tx[p, n])
    return out


# -- correlation feature ---------------------------------------------------------

def corr_feature_np(h):
    """Mean normalized correlation of each channel row with all rows on its RB.

    ``h`` has shape (M, R, N_T); returns (M, R) and the number of zero-norm
    rows encountered (those contribute 0 to every average).
    """
    norms = np.sqrt(np.sum(np.abs(h) ** 2, axis=-1))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    u = h / safe[..., None]
    gram = np.abs(np.einsum("miu,mku->mik", np.conj(u), h / safe[..., None]))
    gram = np.where(zero[:, :, None] | zero[:, None, :], 0.0, gram)
    return gram.mean(axis=1), int(zero.sum())


def _corr_feature_loop(h):
    n_rb, n_row, n_t = h.shape
    out = np.zeros((n_rb, n_row))
    norms = np.zeros((n_rb, n_row))
    zeros = 0
    for m in range(n_rb):
        for i in range(n_row):
            acc = 0.0
            for n in range(n_t):
                acc += h[m, i, n].real ** 2 + h[m, i, n].imag ** 2
            norms[m, i] = np.sqrt(acc)
            if acc == 0.0:
                zeros += 1
    for m in range(n_rb):
        for k in range(n_row):
            if norms[m, k] == 0.0:
                continue
            total = 0.0
            for i in range(n_row):
                if norms[m, i] == 0.0:
                    continue
                ip = 0j
                for n in range(n_t):
                    ip += np.conj(h[m, i, n]) * h[m, k, n]
                total += abs(ip) / (norms[m, i] * norms[m, k])
            out[m, k] = total / n_row
    return out, zeros


# -- per-stream rates ----------------------------------------------------------------

def stream_rates_np(gains, weights, noise):
    """Rates log2(1 + SINR) from complex gains.

    ``gains[..., k, i]`` is the gain of stream i at receiver k; ``weights``
    (same shape minus the last axis) scales the power of each stream.
    """
    power = np.abs(gains) ** 2 * weights[..., None, :]
    signal = np.diagonal(power, axis1=-2, axis2=-1)
    interference = power.sum(axis=-1) - signal
    return np.log2(1.0 + signal / (interference + noise))


def _stream_rates_loop(gains, weights, noise):
    b_dim, m_dim, k_dim, _ = gains.shape
    out = np.zeros((b_dim, m_dim, k_dim))
    for b in range(b_dim):
        for m in range(m_dim):
            for k in range(k_dim):
                sig = 0.0
                intf = 0.0
                for i in range(k_dim):
                    g = gains[b, m, k, i]
                    p = (g.real * g.real + g.imag * g.imag) * weights[b, m, i]
                    if i == k:
                        sig = p
                    else:
                        intf += p
                out[b, m, k] = np.log2(1.0 + sig / (intf + noise))
    return out


# -- two-pair power control grid ---------------------------------------------------

def power_grid_np(h_t, h_i, sigma2, p_max, n):
    p = np.linspace(0.0, p_max, n)
    p1 = p[:, None]
    p2 = p[None, :]
    rate = np.log2(1 + h_t * p1 / (h_i * p2 + sigma2)) + np.log2(
        1 + h_t * p2 / (h_i * p1 + sigma2)
    )
    return rate


def _power_grid_loop(h_t, h_i, sigma2, p_max, n):
    out = np.empty((n, n))
    step = p_max / (n - 1)
    for a in range(n):
        p1 = a * step if a < n - 1 else p_max
        for b in range(n):
            p2 = b * step if b < n - 1 else p_max
            out[a, b] = np.log2(1 + h_t * p1 / (h_i * p2 + sigma2)) + np.log2(
                1 + h_t * p2 / (h_i * p1 + sigma2)
            )
    return out


if HAVE_NUMBA:
    ray_sum_nb = njit(cache=True)(_ray_sum_loop)
    corr_feature_nb_raw = njit(cache=True)(_corr_feature_loop)
    stream_rates_nb_raw = njit(cache=True)(_stream_rates_loop)
    power_grid_nb = njit(cache=True)(_power_grid_loop)

    def corr_feature_nb(h):
        out, zeros = corr_feature_nb_raw(np.ascontiguousarray(h, dtype=np.complex128))
        return out, int(zeros)

    def stream_rates_nb(gains, weights, noise):
        lead = gains.shape[:-3]
        g = np.ascontiguousarray(gains, dtype=np.complex128).reshape((-1,) + gains.shape[-3:])
        w = np.ascontiguousarray(
            np.broadcast_to(weights, gains.shape[:-1]), dtype=np.float64
        ).reshape((-1,) + gains.shape[-3:-1])
        return stream_rates_nb_raw(g, w, float(noise)).reshape(lead + gains.shape[-3:-1])
else:  # pragma: no cover
    ray_sum_nb = ray_sum_np
    corr_feature_nb = corr_feature_np
    stream_rates_nb = stream_rates_np
    power_grid_nb = power_grid_np


def _pick(nb, np_):
    return nb if USE_NUMBA else np_


ray_sum = _pick(ray_sum_nb, ray_sum_np)
corr_feature = _pick(corr_feature_nb, corr_feature_np)
stream_rates = _pick(stream_rates_nb, stream_rates_np)
power_grid = _pick(power_grid_nb, power_grid_np)
