"""Closed-form FLOP counts of the two GNN update layers.

``dims`` is a mapping with keys ``M``, ``K``, ``K_sched``, ``N_R``, ``N_T``
(``N_RF`` is only needed by :func:`asymptotic_table`).
"""

from __future__ import annotations

from math import comb, log2


def scheduler_layer_flops(c_in: int, c_out: int, M: int, K: int, N_R: int, N_T: int) -> int:
    return (
        c_out * (2 * c_in - 1) * M * K * N_R * N_T
        + 2 * c_out * c_in * (K * N_R * N_T + M * N_T + M * K * N_T + M * K * N_R)
        + c_in * (
            (M - 1) * K * N_R * N_T
            + (K * N_R - 1) * M * N_T
            + (N_R - 1) * M * K * N_T
            + (N_T - 1) * M * K * N_R
        )
        + 4 * c_out
    )


def precoder_layer_flops(d_in: int, d_out: int, M: int, K_sched: int, N_R: int, N_T: int) -> int:
    k = K_sched
    return (
        d_out * (2 * d_in - 1) * M * k * N_R * N_T
        + 2 * d_out * d_in * (k * N_R * N_T + 4 * M * k * N_T + M * k * N_R)
        + d_in * ((M - 1) * k * N_R * N_T + (N_R - 1) * M * k * N_T + (N_T - 1) * M * k * N_R)
        + d_out * M * N_T * (4 * k * k + 4 * k * N_R - k + 1)
    )


def _check(dims, keys):
    for key in keys:
        if dims.get(key, 0) < 1:
            raise ValueError(f"dimension {key} must be a positive integer")


def flops_count(kind: str, dims: dict, widths) -> int:
    """FLOPs of one layer (``widths = (in, out)``) or a whole network.

    For ``kind="network"``, ``widths`` maps ``"scheduler"`` and
    ``"precoder"`` to width lists and may set ``"variant"`` to ``"sgnn"``,
    which runs K' scheduler stacks.
    """
    if kind == "scheduler-layer":
        _check(dims, ("M", "K", "N_R", "N_T"))
        c_in, c_out = widths
        return scheduler_layer_flops(c_in, c_out, dims["M"], dims["K"], dims["N_R"], dims["N_T"])
    if kind == "precoder-layer":
        _check(dims, ("M", "K_sched", "N_R", "N_T"))
        d_in, d_out = widths
        return precoder_layer_flops(d_in, d_out, dims["M"], dims["K_sched"], dims["N_R"], dims["N_T"])
    if kind != "network":
        raise ValueError(f"unknown kind {kind!r}")
    sched = widths["scheduler"]
    prec = widths["precoder"]
    stacks = dims["K_sched"] if widths.get("variant", "ngnn") == "sgnn" else 1
    total = stacks * sum(
        flops_count("scheduler-layer", dims, (a, b)) for a, b in zip(sched, sched[1:])
    )
    total += sum(flops_count("precoder-layer", dims, (a, b)) for a, b in zip(prec, prec[1:]))
    return total


def asymptotic_table(dims: dict, layers_s: int, width_c: int, layers_p: int, width_d: int) -> dict[str, float]:
    """Leading-order complexity terms of the learned and reference methods."""
    M, K, Ks, N_R, N_T = (dims[k] for k in ("M", "K", "K_sched", "N_R", "N_T"))
    N_RF = dims.get("N_RF", Ks)
    C, D = width_c, width_d
    return {
        "scheduler-ngnn": M * K * N_R * N_T * layers_s * C**2,
        "scheduler-sgnn": M * K * Ks * N_R * N_T * layers_s * C**2,
        "multicarrier-sus": M * K * Ks * N_R**2 * N_T**2,
        "strongest": M * K * (N_R * N_T + log2(max(Ks, 1))),
        "precoder-gnn": M * Ks * N_R * N_T * layers_p * D * (Ks + D),
        "sdr": M * Ks**2 * N_RF + M * Ks * N_RF**2 + N_T**4.5,
        "mo": M * N_T**2 * N_RF + M * N_T * N_RF**2 + M * N_RF**3,
        "omp": M * Ks**2 * N_RF * N_T**2 + Ks * N_R**2,
        "svd": M * Ks**3 * N_RF * N_T + Ks * N_R**2,
        "eig": M * Ks**3 + M * Ks * N_RF * N_T + N_RF * N_T**2,
        "exhaustive/C_pre": comb(K, Ks) ** M,
        "greedy/C_pre": M * K * Ks,
    }
