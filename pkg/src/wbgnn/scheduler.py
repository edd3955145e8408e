"""Scheduler GNN: per-(RB, user) scores, hard and relaxed top-k selection.

Two variants share the same layer:

* ``ngnn`` scores every user once and picks K' of them with
  :func:`hard_top` (inference) or :func:`soft_top` (training);
* ``sgnn`` chains K' sub-networks; each picks one user and sees the sum of
  the earlier picks as an extra input channel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ANT, BS, GraphLayer, check_widths, finish_layer, linear_aggregate
from .system import ScheduleBasis, compute_features

LOG_FLOOR = 1e-12


def rms_scale(h: np.ndarray) -> np.ndarray:
    """Per-sample RMS of a batched channel (B, M, R, N_T)."""
    return np.sqrt(np.mean(np.abs(h) ** 2, axis=(1, 2, 3)) + 1e-300)


def scheduler_inputs(h: np.ndarray, num_rx: int) -> np.ndarray:
    """First-layer representation [Re H, Im H, F_S, F_O] as (B, M, K, N_R, N_T, 4).

    The channel part is divided by the per-sample RMS; the features are
    standardized per RB already.
    """
    b, m, kr, n_t = h.shape
    k = kr // num_rx
    feats = compute_features(h, num_rx)
    hn = h / rms_scale(h)[:, None, None, None]
    shape = (b, m, k, num_rx, n_t)
    out = np.empty(shape + (4,))
    out[..., 0] = hn.real.reshape(shape)
    out[..., 1] = hn.imag.reshape(shape)
    out[..., 2] = feats.strength[:, :, :, None, None]
    out[..., 3] = feats.orth.reshape(b, m, k, num_rx, 1)
    return out


class SchedulerGNN:
    """One stack of update layers ending in a single score channel."""

    def __init__(self, widths, rng: np.random.Generator, in_channels: int = 4):
        self.widths = check_widths(widths, in_channels, 1, "scheduler")
        n = len(self.widths) - 1
        self.layers = [
            GraphLayer(self.widths[i], self.widths[i + 1], 5, rng, hidden=i < n - 1)
            for i in range(n)
        ]

    def parameters(self) -> list[Tensor]:
        return [w for layer in self.layers for w in layer.weights]

    def __call__(self, x: Tensor, norm_mode: str = "eval") -> Tensor:
        """Scores z of shape (B, M, K): last layer averaged over antennas."""
        for layer in self.layers:
            x = finish_layer(linear_aggregate(x, layer.weights), layer, norm_mode)
        return ad.mean(ad.reshape(x, x.shape[:-1]), axis=(ANT, BS))


# -- selection -----------------------------------------------------------------------

def hard_top(z: np.ndarray, k_sched: int) -> ScheduleBasis:
    """Rows are one-hots of the K' largest scores, descending, lowest index on ties."""
    z = np.asarray(z)
    k = z.shape[-1]
    if k_sched > k:
        raise ValueError(f"cannot pick {k_sched} of {k} users")
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k_sched]
    B = np.zeros(z.shape[:-1] + (k_sched, k))
    np.put_along_axis(B, order[..., None], 1.0, axis=-1)
    return ScheduleBasis(B, "hard")


def soft_top(z: Tensor, k_sched: int, tau: float) -> tuple[Tensor, bool]:
    """Relaxed rows (..., K', K) and whether the log argument was clamped.

    After each softmax the logits of likely picks are pushed down by
    log(1 - p), so later rows favour the remaining users.
    """
    if not tau > 0:
        raise ad.DomainError("temperature must be positive")
    if k_sched > z.shape[-1]:
        raise ValueError(f"cannot pick {k_sched} of {z.shape[-1]} users")
    rows = []
    clamped = False
    logits = z
    row_shape = z.shape[:-1] + (1, z.shape[-1])
    for i in range(k_sched):
        p = ad.softmax(logits, tau, axis=-1)
        rows.append(ad.reshape(p, row_shape))
        if i + 1 < k_sched:
            keep = 1.0 - p
            clamped = clamped or bool(np.any(keep.data < LOG_FLOOR))
            logits = logits + ad.log(ad.clamp_min(keep, LOG_FLOOR))
    return ad.concat(rows, axis=-2), clamped


def onehot_argmax(z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
    return out


# -- the scheduler module ----------------------------------------------------------------

class Scheduler:
    """NGNN or SGNN scheduler for K' streams."""

    def __init__(self, variant: str, k_sched: int, widths, rng: np.random.Generator):
        if variant not in ("ngnn", "sgnn"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.k_sched = k_sched
        if variant == "ngnn":
            self.nets = [SchedulerGNN(widths, rng, in_channels=4)]
        else:
            self.nets = [SchedulerGNN(widths, rng, in_channels=5) for _ in range(k_sched)]

    @property
    def widths(self) -> list[int]:
        return self.nets[0].widths

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets for p in net.parameters()]

    def layers(self):
        return [layer for net in self.nets for layer in net.layers]

    def basis(self, x0: np.ndarray, mode: str, tau: float = 1.0, norm_mode: str = "eval"):
        """Schedule basis on the tape.

        ``mode`` is ``"train"`` (relaxed rows) or ``"test"`` (one-hot rows).
        Returns the basis Tensor (B, M, K', K) and the list of score tensors.
        """
        if mode not in ("train", "test"):
            raise ValueError("mode must be 'train' or 'test'")
        if self.variant == "ngnn":
            z = self.nets[0](Tensor(x0), norm_mode)
            if mode == "train":
                B, _ = soft_top(z, self.k_sched, tau)
            else:
                B = Tensor(hard_top(z.data, self.k_sched).B)
            return B, [z]
        return self._sequential(x0, mode, tau, norm_mode)

    def _sequential(self, x0, mode, tau, norm_mode):
        b, m, k, n_r, n_t, _ = x0.shape
        base = Tensor(x0)
        picked = Tensor(np.zeros((b, m, k)))
        rows, scores = [], []
        for net in self.nets:
            extra = ad.broadcast_to(ad.reshape(picked, (b, m, k, 1, 1, 1)), (b, m, k, n_r, n_t, 1))
            z = net(ad.concat([base, extra], axis=-1), norm_mode)
            scores.append(z)
            row = ad.softmax(z, tau, axis=-1) if mode == "train" else Tensor(onehot_argmax(z.data))
            rows.append(ad.reshape(row, (b, m, 1, k)))
            picked = picked + row
        return ad.concat(rows, axis=-2), scores


def scheduler_forward(h: np.ndarray, net: SchedulerGNN, num_rx: int) -> np.ndarray:
    """Scores (M, K) or (B, M, K) of a single scheduler GNN at inference."""
    single = h.ndim == 3
    hb = h[None] if single else h
    z = net(Tensor(scheduler_inputs(hb, num_rx))).data
    return z[0] if single else z


def sgnn_forward(
    h: np.ndarray, sched: Scheduler, num_rx: int, tau: float = 1.0, mode: str = "test"
) -> ScheduleBasis:
    """SGNN schedule for a channel (M, K*N_R, N_T) or a batch of them."""
    single = h.ndim == 3
    hb = h[None] if single else h
    B, _ = sched.basis(scheduler_inputs(hb, num_rx), mode, tau)
    out = B.data[0] if single else B.data
    return ScheduleBasis(out, "hard" if mode == "test" else "soft")
