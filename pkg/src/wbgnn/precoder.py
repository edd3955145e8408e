"""Precoder GNN with inter-user attention and constraint-enforcing heads."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ANT, BS, RB, USER, GraphLayer, check_widths, finish_layer, linear_aggregate, neighbour_terms
from .system import CPair, HybridSolution, c_abs2, c_bmm

MODULUS_FLOOR = 1e-12


def attention_coeffs(y: Tensor, q6: Tensor, q7: Tensor) -> Tensor:
    """alpha[b, m, t, k, :] = tanh(mean_n(Q6 ybar_t * Q7 ybar_k)), ybar = mean over N_R.

    Returned for every ordered pair including t = k; callers mask the diagonal.
    """
    b, m, k, _, n_t, _ = y.shape
    ybar = ad.mean(y, axis=ANT)
    a6 = ad.linear(ybar, q6)
    a7 = ad.linear(ybar, q7)
    d = a6.shape[-1]
    full = (b, m, k, k, n_t, d)
    src = ad.broadcast_to(ad.reshape(a6, (b, m, k, 1, n_t, d)), full)
    dst = ad.broadcast_to(ad.reshape(a7, (b, m, 1, k, n_t, d)), full)
    return ad.tanh(ad.mean(src * dst, axis=4))


def _user_term(y: Tensor, alpha: Tensor, q3: Tensor) -> Tensor:
    b, m, k, n_r, n_t, _ = y.shape
    msg = ad.linear(ad.mean(y, axis=ANT), q3)
    d = msg.shape[-1]
    full = (b, m, k, k, n_t, d)
    off = 1.0 - np.eye(k)
    mask = Tensor(np.broadcast_to(off[None, None, :, :, None, None], full).copy())
    weighted = ad.broadcast_to(ad.reshape(alpha, (b, m, k, k, 1, d)), full) * mask
    src = ad.broadcast_to(ad.reshape(msg, (b, m, k, 1, n_t, d)), full)
    term = ad.sum_(weighted * src, axis=2) * (1.0 / k)
    return ad.broadcast_to(ad.reshape(term, (b, m, k, 1, n_t, d)), (b, m, k, n_r, n_t, d))


def precoder_layer(y: Tensor, layer: GraphLayer, norm_mode: str = "eval", attention: bool = True) -> Tensor:
    """One update step.  Without attention every coefficient is 1 and the
    step is the plain five-term linear aggregation."""
    q1, q2, q3, q4, q5, q6, q7 = layer.weights
    if not attention:
        return finish_layer(linear_aggregate(y, [q1, q2, q3, q4, q5]), layer, norm_mode)
    if y.shape[-1] != q1.shape[1]:
        raise ad.ShapeError(f"layer expects {q1.shape[1]} channels, got {y.shape[-1]}")
    rb, _, ant, bs = neighbour_terms(y)
    lin = ad.linear(ad.concat([y, rb, ant, bs], axis=-1), ad.concat([q1, q2, q4, q5], axis=1))
    alpha = attention_coeffs(y, q6, q7)
    return finish_layer(lin + _user_term(y, alpha, q3), layer, norm_mode)


# -- output heads -------------------------------------------------------------------------

def _unit_modulus(re: Tensor, im: Tensor) -> tuple[CPair, bool]:
    small = (re.data ** 2 + im.data ** 2) < MODULUS_FLOOR ** 2
    if np.any(small):
        keep = Tensor((~small).astype(float))
        re = re * keep + Tensor(np.where(small, MODULUS_FLOOR, 0.0))
        im = im * keep
    inv = ad.reciprocal(ad.sqrt(ad.square(re) + ad.square(im)))
    return CPair(re * inv, im * inv), bool(np.any(small))


def output_heads(y: Tensor, n_rf: int, p_tot: float) -> tuple[CPair, CPair, CPair, bool]:
    """Map the last layer (B, M, K', N_R, N_T, 4 N_RF + 2) to feasible actions.

    Returns W_RF (B, N_T, N_RF), W'_BB (B, M, N_RF, K'), v'_RF (B, K' N_R) as
    real/imaginary pairs, and whether a modulus projection hit the floor.
    """
    b, m, k, n_r, n_t, d = y.shape
    if d != 4 * n_rf + 2:
        raise ad.ShapeError(f"last layer has {d} channels, heads need {4 * n_rf + 2}")
    if not p_tot > 0:
        raise ValueError("total power must be positive")

    def slots(start, stop):
        return ad.take(y, slice(start, stop), axis=-1)

    rf_re = ad.mean(slots(0, n_rf), axis=(RB, USER, ANT))
    rf_im = ad.mean(slots(n_rf, 2 * n_rf), axis=(RB, USER, ANT))
    w_rf, flag_rf = _unit_modulus(rf_re, rf_im)

    def bb(start):
        part = ad.mean(slots(start, start + n_rf), axis=(ANT, BS))
        return ad.transpose(part, (0, 1, 3, 2))

    raw = CPair(bb(2 * n_rf), bb(3 * n_rf))
    wrf_b = w_rf.map(ad.reshape, (b, 1, n_t, n_rf)).map(ad.broadcast_to, (b, m, n_t, n_rf))
    power = ad.sum_(c_abs2(c_bmm(wrf_b, raw)), axis=(1, 2, 3))
    gain = ad.sqrt(ad.reciprocal(power)) * np.sqrt(p_tot)
    gain = ad.broadcast_to(ad.reshape(gain, (b, 1, 1, 1)), raw.shape)
    w_bb = CPair(raw.re * gain, raw.im * gain)

    v_re = ad.reshape(ad.mean(slots(4 * n_rf, 4 * n_rf + 1), axis=(RB, BS)), (b, k * n_r))
    v_im = ad.reshape(ad.mean(slots(4 * n_rf + 1, 4 * n_rf + 2), axis=(RB, BS)), (b, k * n_r))
    v, flag_v = _unit_modulus(v_re, v_im)
    return w_rf, w_bb, v, flag_rf or flag_v


class PrecoderGNN:
    def __init__(self, widths, n_rf: int, rng: np.random.Generator, attention: bool = True):
        self.n_rf = n_rf
        self.widths = check_widths(widths, 2, 4 * n_rf + 2, "precoder")
        self.attention = attention
        n = len(self.widths) - 1
        self.layers = [
            GraphLayer(self.widths[i], self.widths[i + 1], 7, rng, hidden=i < n - 1)
            for i in range(n)
        ]

    def parameters(self) -> list[Tensor]:
        return [w for layer in self.layers for w in layer.weights]

    def hidden(self, hp: CPair, num_rx: int, norm_mode: str = "eval") -> Tensor:
        b, m, kr, n_t = hp.shape
        k = kr // num_rx
        shape = (b, m, k, num_rx, n_t, 1)
        y = ad.concat([ad.reshape(hp.re, shape), ad.reshape(hp.im, shape)], axis=-1)
        for layer in self.layers:
            y = precoder_layer(y, layer, norm_mode, self.attention)
        return y

    def __call__(self, hp: CPair, num_rx: int, p_tot: float, norm_mode: str = "eval"):
        """Tape forward on a normalized scheduled channel (B, M, K' N_R, N_T)."""
        return output_heads(self.hidden(hp, num_rx, norm_mode), self.n_rf, p_tot)


def precoder_forward(
    h_prime: np.ndarray, net: PrecoderGNN, num_rx: int, p_tot: float, scale=None
) -> HybridSolution:
    """Inference on one scheduled channel (M, K' N_R, N_T) or a batch of them.

    The input is divided by ``scale`` (per sample; default its own RMS), so
    the decision does not depend on the absolute channel gain.
    """
    single = h_prime.ndim == 3
    hb = h_prime[None] if single else h_prime
    if scale is None:
        scale = np.sqrt(np.mean(np.abs(hb) ** 2, axis=(1, 2, 3)) + 1e-300)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (hb.shape[0],))
    w_rf, w_bb, v, _ = net(CPair.from_complex(hb / scale[:, None, None, None]), num_rx, p_tot)
    sol = HybridSolution(w_rf.to_complex(), w_bb.to_complex(), v.to_complex())
    return sol.take(0) if single else sol
