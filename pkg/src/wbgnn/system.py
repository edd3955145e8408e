"""Objective, constraints, scheduled-channel extraction and input features.

Complex quantities appear in two forms: plain ``complex128`` arrays for
evaluation, and :class:`CPair` (real and imaginary :class:`Tensor`) on the
differentiable training path.  Array layouts, with an optional leading batch
axis everywhere:

    channel      (M, K*N_R, N_T)
    schedule B   (M, K', K)
    W_RF         (N_T, N_RF)
    W'_BB        (M, N_RF, K')
    v'_RF        (K'*N_R,)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor

LN2 = np.log(2.0)
PERMUTATION_AXES = ("rb", "user-group", "an-ue-within-group", "an-bs")


@dataclass
class ScheduleBasis:
    """Per-RB stack of K' row basis vectors over the K candidate users."""

    B: np.ndarray
    mode: str = "hard"

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError("mode must be 'hard' or 'soft'")

    @property
    def activity(self) -> np.ndarray:
        """The scheduling matrix A: per-RB sum of the basis rows."""
        return self.B.sum(axis=-2)

    @property
    def indices(self) -> np.ndarray:
        return np.argmax(self.B, axis=-1)

    def is_valid(self, tol: float = 1e-12) -> bool:
        rows_ok = np.all(self.B >= -tol) and np.allclose(self.B.sum(-1), 1.0, atol=tol)
        if self.mode == "soft":
            return bool(rows_ok)
        onehot = np.all((self.B == 0) | (self.B == 1))
        distinct = np.all(self.activity <= 1)
        return bool(rows_ok and onehot and distinct)


@dataclass
class HybridSolution:
    w_rf: np.ndarray
    w_bb: np.ndarray
    v_rf: np.ndarray

    @property
    def num_streams(self) -> int:
        return self.w_bb.shape[-1]

    @property
    def num_rx(self) -> int:
        return self.v_rf.shape[-1] // self.num_streams

    def take(self, i: int) -> "HybridSolution":
        """Sample ``i`` of a batched solution."""
        return HybridSolution(self.w_rf[i], self.w_bb[i], self.v_rf[i])


# -- sum rate -------------------------------------------------------------------------

def effective_gains(h: np.ndarray, sol: HybridSolution) -> np.ndarray:
    """S[..., m, k, i] = v_k^H H_{m,k} W_RF w_{m,i}."""
    k = sol.num_streams
    n_r = sol.num_rx
    if h.shape[-2] != k * n_r:
        raise ValueError(f"channel has {h.shape[-2]} rows, solution expects {k}x{n_r}")
    if sol.w_rf.shape[-2] != h.shape[-1]:
        raise ValueError("W_RF rows do not match N_T")
    g = np.conj(sol.v_rf)[..., None, :, None] * h
    g = g.reshape(h.shape[:-2] + (k, n_r, h.shape[-1])).sum(axis=-2)
    return g @ sol.w_rf[..., None, :, :] @ sol.w_bb


def sum_rate(
    h: np.ndarray,
    sol: HybridSolution,
    sigma2: float,
    schedule=None,
    per_stream: bool = False,
):
    """Spectral efficiency (bits/s/Hz) averaged over RBs.

    Without ``schedule`` this is the scheduled-user objective on ``h = H'``.
    With a schedule (``ScheduleBasis`` or an activity matrix A of shape
    (M, K)) ``h`` holds all K candidates and the activity weights enter both
    signal and interference powers; soft activities are allowed.
    """
    if not sigma2 > 0:
        raise ValueError("noise power must be positive")
    gains = effective_gains(h, sol)
    if schedule is None:
        weights = np.ones(gains.shape[:-1])
    else:
        a = schedule.activity if isinstance(schedule, ScheduleBasis) else np.asarray(schedule)
        weights = np.broadcast_to(a, gains.shape[:-1]).astype(float)
    rates = _kernels.stream_rates(gains, weights, sol.num_rx * sigma2)
    se = rates.sum(axis=-1).mean(axis=-1)
    return (se, rates) if per_stream else se


# -- complex pairs on the tape --------------------------------------------------------

class CPair(NamedTuple):
    re: Tensor
    im: Tensor

    @classmethod
    def from_complex(cls, z: np.ndarray, requires_grad: bool = False) -> "CPair":
        return cls(Tensor(z.real.copy(), requires_grad), Tensor(z.imag.copy(), requires_grad))

    def to_complex(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @property
    def shape(self):
        return self.re.shape

    def map(self, fn, *args, **kw) -> "CPair":
        return CPair(fn(self.re, *args, **kw), fn(self.im, *args, **kw))


def c_bmm(a: CPair, b: CPair) -> CPair:
    re = ad.bmm(a.re, b.re) - ad.bmm(a.im, b.im)
    im = ad.bmm(a.re, b.im) + ad.bmm(a.im, b.re)
    return CPair(re, im)


def c_abs2(a: CPair) -> Tensor:
    return ad.square(a.re) + ad.square(a.im)


def sum_rate_tape(
    hp: CPair, w_rf: CPair, w_bb: CPair, v_rf: CPair, sigma2: float, weights: Tensor | None = None
) -> Tensor:
    """Per-sample SE on the tape; all inputs carry a leading batch axis."""
    if not sigma2 > 0:
        raise ValueError("noise power must be positive")
    b, m, kr, n_t = hp.shape
    k = w_bb.shape[-1]
    n_r = kr // k
    if k * n_r != kr or v_rf.shape[-1] != kr:
        raise ad.ShapeError("channel rows, combiner and baseband streams disagree")

    vr = ad.broadcast_to(ad.reshape(v_rf.re, (b, 1, kr, 1)), hp.shape)
    vi = ad.broadcast_to(ad.reshape(v_rf.im, (b, 1, kr, 1)), hp.shape)
    g = CPair(vr * hp.re + vi * hp.im, vr * hp.im - vi * hp.re)
    g = g.map(ad.reshape, (b, m, k, n_r, n_t)).map(ad.sum_, axis=3)

    n_rf = w_rf.shape[-1]
    wrf = w_rf.map(ad.reshape, (b, 1, n_t, n_rf)).map(ad.broadcast_to, (b, m, n_t, n_rf))
    s = c_bmm(c_bmm(g, wrf), w_bb)
    power = c_abs2(s)
    if weights is not None:
        power = power * ad.broadcast_to(ad.reshape(weights, (b, m, 1, k)), power.shape)
    eye = Tensor(np.broadcast_to(np.eye(k), power.shape).copy())
    signal = ad.sum_(power * eye, axis=-1)
    interference = ad.sum_(power, axis=-1) - signal
    sinr = signal * ad.reciprocal(interference + n_r * sigma2)
    rate = ad.log(sinr + 1.0) * (1.0 / LN2)
    return ad.mean(ad.sum_(rate, axis=-1), axis=-1)


# -- scheduled channel extraction -------------------------------------------------------

def extract_scheduled(h: np.ndarray, schedule, num_rx: int) -> np.ndarray:
    """H'_m = (B_m kron I_{N_R}) H_m for complex arrays."""
    B = schedule.B if isinstance(schedule, ScheduleBasis) else np.asarray(schedule)
    k = B.shape[-1]
    if h.shape[-2] != k * num_rx:
        raise ValueError("schedule width does not match channel rows")
    lead = h.shape[:-2]
    hk = h.reshape(lead + (k, num_rx * h.shape[-1]))
    out = np.einsum("...ij,...jn->...in", B, hk)
    return out.reshape(lead + (B.shape[-2] * num_rx, h.shape[-1]))


def extract_scheduled_tape(hp: CPair, B: Tensor, num_rx: int) -> CPair:
    b, m, kr, n_t = hp.shape
    k = B.shape[-1]
    if kr != k * num_rx:
        raise ad.ShapeError("schedule width does not match channel rows")
    kp = B.shape[-2]
    hk = hp.map(ad.reshape, (b, m, k, num_rx * n_t))
    out = CPair(ad.bmm(B, hk.re), ad.bmm(B, hk.im))
    return out.map(ad.reshape, (b, m, kp * num_rx, n_t))


# -- model-based features ---------------------------------------------------------------

@dataclass
class FeatureTensors:
    strength: np.ndarray  # F_S, (..., M, K)
    orth: np.ndarray  # F_O, (..., M, K*N_R)
    raw_strength: np.ndarray
    raw_orth: np.ndarray
    zero_rows: int = 0


def _standardize_rows(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 2:
        return np.zeros_like(x)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def compute_features(h: np.ndarray, num_rx: int) -> FeatureTensors:
    """Channel strength and mean correlation features, standardized per RB.

    The correlation average includes each row's correlation with itself.
    """
    lead = h.shape[:-3]
    m, kr, n_t = h.shape[-3:]
    k = kr // num_rx
    strength = np.sqrt(
        np.sum(np.abs(h.reshape(lead + (m, k, num_rx * n_t))) ** 2, axis=-1)
    )
    flat = h.reshape((-1, m, kr, n_t))
    orth = np.empty((flat.shape[0], m, kr))
    zero_rows = 0
    for i in range(flat.shape[0]):
        orth[i], z = _kernels.corr_feature(flat[i])
        zero_rows += z
    orth = orth.reshape(lead + (m, kr))
    return FeatureTensors(
        _standardize_rows(strength), _standardize_rows(orth), strength, orth, zero_rows
    )


# -- permutations ------------------------------------------------------------------------

def _check_perm(perm, n):
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of {n} elements: {perm}")
    return perm


def _permute_rows(x: np.ndarray, axis: int, perm, group: int, within: bool) -> np.ndarray:
    """Permute row blocks (``within=False``) or rows inside every block."""
    axis = axis % x.ndim
    n = x.shape[axis]
    blocks = n // group
    shape = x.shape[:axis] + (blocks, group) + x.shape[axis + 1:]
    y = x.reshape(shape)
    if within:
        y = np.take(y, _check_perm(perm, group), axis=axis + 1)
    else:
        y = np.take(y, _check_perm(perm, blocks), axis=axis)
    return y.reshape(x.shape)


def apply_permutation(obj, axis: str, perm, num_rx: int = 1, layout: str = "channel"):
    """Reindex ``obj`` along one of the four sets of the problem.

    ``obj`` may be a channel array, a :class:`HybridSolution`, a
    :class:`ScheduleBasis` or, with ``layout="scores"``, an (M, K) array of
    per-user quantities.  The returned object is a new copy.
    """
    if axis not in PERMUTATION_AXES:
        raise ValueError(f"unknown axis {axis!r}")
    if isinstance(obj, HybridSolution):
        w_rf, w_bb, v = obj.w_rf, obj.w_bb, obj.v_rf
        n_r = obj.num_rx
        if axis == "rb":
            w_bb = np.take(w_bb, _check_perm(perm, w_bb.shape[-3]), axis=-3)
        elif axis == "an-bs":
            w_rf = np.take(w_rf, _check_perm(perm, w_rf.shape[-2]), axis=-2)
        elif axis == "user-group":
            w_bb = np.take(w_bb, _check_perm(perm, w_bb.shape[-1]), axis=-1)
            v = _permute_rows(v, -1, perm, n_r, within=False)
        else:
            v = _permute_rows(v, -1, perm, n_r, within=True)
        return HybridSolution(w_rf.copy(), w_bb.copy(), v.copy())
    if isinstance(obj, ScheduleBasis):
        B = obj.B
        if axis == "rb":
            B = np.take(B, _check_perm(perm, B.shape[-3]), axis=-3)
        elif axis == "user-group":
            B = np.take(B, _check_perm(perm, B.shape[-1]), axis=-1)
        return ScheduleBasis(B.copy(), obj.mode)

    x = np.asarray(obj)
    if layout == "scores":
        if axis == "rb":
            return np.take(x, _check_perm(perm, x.shape[-2]), axis=-2)
        if axis == "user-group":
            return np.take(x, _check_perm(perm, x.shape[-1]), axis=-1)
        return x.copy()
    if axis == "rb":
        return np.take(x, _check_perm(perm, x.shape[-3]), axis=-3)
    if axis == "an-bs":
        return np.take(x, _check_perm(perm, x.shape[-1]), axis=-1)
    return _permute_rows(x, -2, perm, num_rx, within=(axis == "an-ue-within-group"))


def check_constraints(sol: HybridSolution, p_tot: float) -> dict[str, float]:
    """Worst-case constraint residuals (max over a batch when present)."""
    rf = float(np.max(np.abs(np.abs(sol.w_rf) - 1.0)))
    comb = float(np.max(np.abs(np.abs(sol.v_rf) - 1.0)))
    transmitted = sol.w_rf[..., None, :, :] @ sol.w_bb
    power = np.sum(np.abs(transmitted) ** 2, axis=(-3, -2, -1))
    residual = float(np.max(np.abs(power - p_tot) / p_tot))
    return {"unit_modulus_rf": rf, "unit_modulus_comb": comb, "power_residual": residual}
