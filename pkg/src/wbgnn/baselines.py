"""Reference schedulers and precoders, brute-force oracles, closed forms.

A ``precode_fn`` maps a scheduled channel (M, n*N_R, N_T) with n <= K'
streams to a :class:`HybridSolution`; :func:`digital_zf` and
:func:`hybrid_zf` (after ``functools.partial``) are the two provided.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .scheduler import hard_top
from .system import (
    PERMUTATION_AXES,
    HybridSolution,
    ScheduleBasis,
    compute_features,
    extract_scheduled,
    sum_rate,
)

EXHAUSTIVE_GUARD = 10**6
SPSD_SCHEMA = "# schema: wbgnn-spsd v1"


class RankDeficientError(np.linalg.LinAlgError):
    pass


class SearchTooLargeError(ValueError):
    pass


class SPSDError(RuntimeError):
    pass


# -- simple schedulers ------------------------------------------------------------------

def schedule_strongest(h: np.ndarray, k_sched: int, num_rx: int) -> ScheduleBasis:
    """Per RB, the K' users with largest Frobenius norm, strongest first."""
    strength = compute_features(h, num_rx).raw_strength
    return hard_top(strength, min(k_sched, strength.shape[-1]))


# -- precoders ----------------------------------------------------------------------------

def zf_baseband(g: np.ndarray, w_rf: np.ndarray | None = None, stream_power: float = 1.0, ridge: float = 0.0):
    """Zero-forcing columns for effective rows ``g`` (K' x N_RF).

    Each column is scaled so the transmitted power ||W_RF w||^2 equals
    ``stream_power``.  Raises :class:`RankDeficientError` when ``g`` is not
    of full row rank and no ridge is given.
    """
    k = g.shape[0]
    gram = g @ g.conj().T
    if ridge > 0:
        gram = gram + ridge * np.eye(k)
    else:
        sv = np.linalg.svd(g, compute_uv=False)
        if sv.size < k or sv[-1] <= 1e-12 * max(sv[0], 1e-300):
            raise RankDeficientError("effective channel is rank deficient")
    w = g.conj().T @ np.linalg.inv(gram)
    tx = w if w_rf is None else w_rf @ w
    norms = np.linalg.norm(tx, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    return w * (np.sqrt(stream_power) / norms)


def _zf_or_ridge(g, w_rf, stream_power):
    try:
        return zf_baseband(g, w_rf, stream_power)
    except RankDeficientError:
        ridge = 1e-6 * np.real(np.trace(g @ g.conj().T)) / g.shape[0]
        return zf_baseband(g, w_rf, stream_power, ridge=max(ridge, 1e-300))


def principal_combiners(h_prime: np.ndarray, num_rx: int) -> np.ndarray:
    """Unit-modulus combiners: phases of each user's dominant receive direction."""
    m, kr, n_t = h_prime.shape
    k = kr // num_rx
    v = np.ones((k, num_rx), dtype=complex)
    if num_rx > 1:
        stacked = h_prime.reshape(m, k, num_rx, n_t).transpose(1, 2, 0, 3).reshape(k, num_rx, m * n_t)
        for i in range(k):
            u, _, _ = np.linalg.svd(stacked[i], full_matrices=False)
            lead = u[:, 0]
            v[i] = np.exp(1j * np.angle(lead)) if np.any(lead != 0) else 1.0
    return v.reshape(kr)


def effective_rows(h_prime: np.ndarray, v: np.ndarray, num_rx: int) -> np.ndarray:
    """g[m, k] = v_k^H H'_{m,k}  (M, K', N_T)."""
    m, kr, n_t = h_prime.shape
    g = np.conj(v)[None, :, None] * h_prime
    return g.reshape(m, kr // num_rx, num_rx, n_t).sum(axis=2)


def digital_zf(h_prime: np.ndarray, p_tot: float, num_rx: int = 1) -> HybridSolution:
    """Fully digital ZF reference (W_RF = I), equal power P_tot/(M K') per stream."""
    m, kr, n_t = h_prime.shape
    k = kr // num_rx
    v = principal_combiners(h_prime, num_rx)
    g = effective_rows(h_prime, v, num_rx)
    w_bb = np.stack([_zf_or_ridge(g[i], None, p_tot / (m * k)) for i in range(m)])
    return HybridSolution(np.eye(n_t, dtype=complex), w_bb, v)


def hybrid_zf(h_prime: np.ndarray, p_tot: float, num_rx: int = 1, n_rf: int | None = None) -> HybridSolution:
    """Matched-phase analog stage plus baseband ZF, equal power per stream.

    Column j of W_RF takes the phases of the dominant direction of stream
    (j mod K')'s effective channels accumulated over RBs.
    """
    m, kr, n_t = h_prime.shape
    k = kr // num_rx
    n_rf = k if n_rf is None else n_rf
    v = principal_combiners(h_prime, num_rx)
    g = effective_rows(h_prime, v, num_rx)
    w_rf = np.empty((n_t, n_rf), dtype=complex)
    for j in range(n_rf):
        rows = g[:, j % k, :]
        cov = rows.T @ rows.conj()
        _, vecs = np.linalg.eigh(cov)
        w_rf[:, j] = np.exp(1j * np.angle(vecs[:, -1]))
    w_bb = np.stack([_zf_or_ridge(g[i] @ w_rf, w_rf, p_tot / (m * k)) for i in range(m)])
    return HybridSolution(w_rf, w_bb, v)


# -- greedy and exhaustive scheduling ---------------------------------------------------

def _basis_from_sets(sets, k):
    B = np.zeros((len(sets), len(sets[0]), k))
    for m, users in enumerate(sets):
        B[m, np.arange(len(users)), list(users)] = 1.0
    return ScheduleBasis(B, "hard")


def _rb_rate(h_m, users, precode_fn, num_rx, sigma2):
    rows = np.concatenate([np.arange(u * num_rx, (u + 1) * num_rx) for u in users])
    hp = h_m[None, rows]
    return float(sum_rate(hp, precode_fn(hp), sigma2))


def greedy_schedule(h, k_sched: int, precode_fn: Callable, num_rx: int, sigma2: float) -> ScheduleBasis:
    """Grow each RB's user set one user at a time, keeping the best addition.

    ``precode_fn`` sees one RB at a time, so its power budget should be the
    per-RB share.
    """
    m_dim, kr, _ = h.shape
    k = kr // num_rx
    sets = []
    for m in range(m_dim):
        chosen: list[int] = []
        while len(chosen) < min(k_sched, k):
            best, best_rate = None, -np.inf
            for u in range(k):
                if u in chosen:
                    continue
                rate = _rb_rate(h[m], chosen + [u], precode_fn, num_rx, sigma2)
                if rate > best_rate:
                    best, best_rate = u, rate
            chosen.append(best)
        sets.append(chosen)
    return _basis_from_sets(sets, k)


def exhaustive_schedule(
    h, k_sched: int, precode_fn: Callable, num_rx: int, sigma2: float, per_rb: bool = True
) -> tuple[ScheduleBasis, float]:
    """Certified maximizer by enumeration.

    ``per_rb=True`` searches each RB on its own, which is exact only when
    ``precode_fn`` decouples across RBs; otherwise the full cross-RB product
    is enumerated and ``precode_fn`` receives all RBs.
    """
    m_dim, kr, _ = h.shape
    k = kr // num_rx
    k_sched = min(k_sched, k)
    combos = list(itertools.combinations(range(k), k_sched))
    if per_rb:
        if len(combos) > EXHAUSTIVE_GUARD:
            raise SearchTooLargeError(f"{len(combos)} candidates per RB")
        sets = []
        for m in range(m_dim):
            rates = [_rb_rate(h[m], list(c), precode_fn, num_rx, sigma2) for c in combos]
            sets.append(combos[int(np.argmax(rates))])
        basis = _basis_from_sets(sets, k)
        # per-RB budgets add up to the total, so the full-band rate is the RB mean
        rate = float(np.mean([
            _rb_rate(h[m], list(s), precode_fn, num_rx, sigma2) for m, s in enumerate(sets)
        ]))
        return basis, rate
    total = len(combos) ** m_dim
    if total > EXHAUSTIVE_GUARD:
        raise SearchTooLargeError(f"{total} joint candidates exceed the guard")
    best, best_rate = None, -np.inf
    for sets in itertools.product(combos, repeat=m_dim):
        basis = _basis_from_sets(list(sets), k)
        hp = extract_scheduled(h, basis, num_rx)
        rate = float(sum_rate(hp, precode_fn(hp), sigma2))
        if rate > best_rate:
            best, best_rate = basis, rate
    return best, best_rate


# -- closed-form MISO precoder --------------------------------------------------------------

@dataclass
class MisoPrecoderSpec:
    channels: np.ndarray  # (K, N_T), row k is h_k
    lam: np.ndarray | None = None
    power: np.ndarray | None = None
    sigma2: float = 1.0

    def resolved(self):
        k = self.channels.shape[0]
        lam = np.ones(k) if self.lam is None else np.asarray(self.lam, float)
        p = np.ones(k) if self.power is None else np.asarray(self.power, float)
        return lam, p


def miso_optimal_precoder(spec: MisoPrecoderSpec) -> tuple[np.ndarray, np.ndarray]:
    """Structured optimal precoders (rows, K x N_T) and a zero-channel flag per user.

    w'_k = h_k - U (I + U^H U)^{-1} U^H h_k with U = [h_l sqrt(lam_l) / sigma],
    w_k = sqrt(p_k) w'_k / ||w'_k||.
    """
    lam, p = spec.resolved()
    h = np.asarray(spec.channels, dtype=complex)
    u = (h * np.sqrt(lam)[:, None] / np.sqrt(spec.sigma2)).T
    core = np.linalg.inv(np.eye(u.shape[1]) + u.conj().T @ u)
    w_dir = h.T - u @ (core @ (u.conj().T @ h.T))
    norms = np.linalg.norm(w_dir, axis=0)
    zero = norms == 0
    w = np.where(zero, 0.0, w_dir * np.sqrt(p) / np.where(zero, 1.0, norms))
    return w.T, zero


# -- two-pair power control ----------------------------------------------------------------

@dataclass
class PowerControlInstance:
    h_direct: float
    h_cross: float
    sigma2: float
    p_max: float

    def __post_init__(self):
        if min(self.h_direct, self.h_cross, self.sigma2, self.p_max) <= 0:
            raise ValueError("all instance fields must be positive")


def power_threshold(inst: PowerControlInstance) -> float:
    t, i = inst.h_direct, inst.h_cross
    return 2.0 / (math.sqrt(t * t + 4 * i * i) - t)


def power_control_2pair(inst: PowerControlInstance, mode: str = "closed", grid: int = 201):
    """Optimal binary power pairs and the threshold.

    ``mode="closed"`` applies the threshold rule; ``mode="grid"`` returns
    the argmax set of a ``grid x grid`` search over [0, P_max]^2.
    """
    s_h = power_threshold(inst)
    snr = inst.p_max / inst.sigma2
    both = (inst.p_max, inst.p_max)
    single = [(inst.p_max, 0.0), (0.0, inst.p_max)]
    if mode == "closed":
        if s_h > snr:
            return [both], s_h
        if s_h < snr:
            return single, s_h
        return [both] + single, s_h
    if mode != "grid":
        raise ValueError("mode must be 'closed' or 'grid'")
    rate = _kernels.power_grid(inst.h_direct, inst.h_cross, inst.sigma2, inst.p_max, grid)
    p = np.linspace(0.0, inst.p_max, grid)
    best = rate.max()
    idx = np.argwhere(rate >= best - 1e-12 * max(1.0, abs(best)))
    return [(float(p[a]), float(p[b])) for a, b in idx], s_h


def pair_rate(inst: PowerControlInstance, p1: float, p2: float) -> float:
    t, i, s = inst.h_direct, inst.h_cross, inst.sigma2
    return math.log2(1 + t * p1 / (i * p2 + s)) + math.log2(1 + t * p2 / (i * p1 + s))


# -- empirical SPSD check ---------------------------------------------------------------------

def duplicate_element(h: np.ndarray, axis: str, src: int, dst: int, num_rx: int) -> np.ndarray:
    """Copy set element ``src`` over ``dst`` along one of the four sets."""
    out = h.copy()
    if axis == "rb":
        out[dst] = h[src]
    elif axis == "an-bs":
        out[..., dst] = h[..., src]
    elif axis == "user-group":
        out[:, dst * num_rx:(dst + 1) * num_rx] = h[:, src * num_rx:(src + 1) * num_rx]
    elif axis == "an-ue-within-group":
        k = h.shape[1] // num_rx
        for g in range(k):
            out[:, g * num_rx + dst] = h[:, g * num_rx + src]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return out


def _set_size(h, axis, num_rx):
    return {
        "rb": h.shape[0],
        "an-bs": h.shape[2],
        "user-group": h.shape[1] // num_rx,
        "an-ue-within-group": num_rx,
    }[axis]


def spsd_check(
    policy_fn: Callable[[np.ndarray], np.ndarray],
    set_axis: str,
    n_samples: int,
    cfg,
    seed: int = 0,
    decision_axis: int = -1,
    pick: str = "random",
    tol: float = 1e-6,
    channel_fn: Callable | None = None,
) -> dict:
    """Duplicate one set element per sample and compare the two decisions.

    ``policy_fn`` maps a channel (M, K*N_R, N_T) to a decision array whose
    ``decision_axis`` enumerates the elements of ``set_axis``.  With
    ``pick="strongest"`` on the user axis the strongest user is the copied one.
    """
    from .channel import generate_sample

    if set_axis not in PERMUTATION_AXES:
        raise ValueError(f"unknown axis {set_axis!r}")
    num_rx = cfg.num_rx
    make = channel_fn or (lambda s: generate_sample(cfg, s))
    rng = np.random.default_rng(seed)
    deviations = []
    for i in range(n_samples):
        sample_seed = seed + i
        h = make(sample_seed)
        n = _set_size(h, set_axis, num_rx)
        if n < 2:
            raise ValueError(f"axis {set_axis} has a single element")
        if pick == "strongest" and set_axis == "user-group":
            src = int(np.argmax(compute_features(h, num_rx).raw_strength.sum(axis=0)))
            dst = int(rng.choice([u for u in range(n) if u != src]))
        else:
            src, dst = (int(x) for x in rng.choice(n, size=2, replace=False))
        dup = duplicate_element(h, set_axis, src, dst, num_rx)
        try:
            dec = np.asarray(policy_fn(dup))
        except Exception as exc:
            raise SPSDError(f"policy failed on sample seed {sample_seed}: {exc}") from exc
        a = np.take(dec, src, axis=decision_axis)
        b = np.take(dec, dst, axis=decision_axis)
        deviations.append(float(np.max(np.abs(a - b))) if a.size else 0.0)
    dev = np.array(deviations)
    return {
        "axis": set_axis,
        "samples": n_samples,
        "agreement_rate": float(np.mean(dev <= tol)),
        "max_deviation": float(dev.max()),
        "seed": seed,
    }


def write_spsd_csv(path, reports: list[dict]):
    with open(path, "w", newline="") as f:
        f.write(SPSD_SCHEMA + "\n")
        writer = csv.DictWriter(f, fieldnames=["axis", "samples", "agreement_rate", "max_deviation", "seed"])
        writer.writeheader()
        for r in reports:
            writer.writerow(r)
