"""Shared building blocks of the two hyper-edge GNNs.

Hidden tensors have shape (B, M, K, N_R, N_T, C): batch, RB, user group,
antenna within the group, BS antenna, channel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import NormState, Tensor

RB, USER, ANT, BS = 1, 2, 3, 4


class GraphLayer:
    """Weights of one update step plus its normalization statistics."""

    def __init__(self, c_in: int, c_out: int, n_mats: int, rng: np.random.Generator, hidden: bool):
        a = np.sqrt(1.0 / c_in)
        self.c_in, self.c_out = c_in, c_out
        self.weights = [
            Tensor(rng.uniform(-a, a, size=(c_out, c_in)), requires_grad=True)
            for _ in range(n_mats)
        ]
        self.norm = NormState.fresh(c_out) if hidden else None

    @property
    def hidden(self) -> bool:
        return self.norm is not None


def _spread(x: Tensor, axes) -> Tensor:
    return ad.broadcast_to(ad.sum_(x, axis=axes, keepdims=True), x.shape)


def neighbour_terms(x: Tensor) -> list[Tensor]:
    """Leave-one-out means over the four adjacency kinds of a hyper-edge.

    Returns [other RBs, other users (all their antennas), same user's other
    antennas, other BS antennas], each normalized by the full set size so an
    empty set contributes exactly zero.
    """
    _, m, k, n_r, n_t, _ = x.shape
    per_user = _spread(x, ANT)
    return [
        (_spread(x, RB) - x) * (1.0 / m),
        (_spread(x, (USER, ANT)) - per_user) * (1.0 / (k * n_r)),
        (per_user - x) * (1.0 / n_r),
        (_spread(x, BS) - x) * (1.0 / n_t),
    ]


def linear_aggregate(x: Tensor, weights: list[Tensor]) -> Tensor:
    """Self term plus the four neighbour means, each with its own matrix."""
    if x.shape[-1] != weights[0].shape[1]:
        raise ad.ShapeError(f"layer expects {weights[0].shape[1]} channels, got {x.shape[-1]}")
    stacked = ad.concat([x] + neighbour_terms(x), axis=-1)
    return ad.linear(stacked, ad.concat(weights, axis=1))


def finish_layer(pre: Tensor, layer: GraphLayer, norm_mode: str) -> Tensor:
    """Normalize and activate hidden layers; the last layer stays linear."""
    if not layer.hidden:
        return pre
    if norm_mode == "train":
        pre = ad.batch_standardize(pre, layer.norm, training=True)
    else:
        pre = ad.batch_standardize(pre, layer.norm, training=False)
    return ad.relu(pre)


def check_widths(widths, first: int, last: int, name: str):
    widths = list(widths)
    if len(widths) < 2 or widths[0] != first or widths[-1] != last:
        raise ValueError(f"{name} widths must start at {first} and end at {last}, got {widths}")
    if any(w < 1 for w in widths):
        raise ValueError("widths must be positive")
    return widths


class Adam:
    """Adam over a list of tensors; updates ``data`` in place."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: dict[int, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p.id)
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
