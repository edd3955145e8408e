"""Three-phase training, hard-path evaluation and baseline comparisons."""

from __future__ import annotations

import csv
import functools
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor
from .baselines import digital_zf, exhaustive_schedule, greedy_schedule, hybrid_zf, schedule_strongest
from .channel import ScenarioConfig, noise_power_per_rb
from .flops import flops_count
from .layers import Adam
from .precoder import PrecoderGNN
from .scheduler import Scheduler, rms_scale, scheduler_inputs
from .system import CPair, HybridSolution, check_constraints, extract_scheduled, extract_scheduled_tape, sum_rate, sum_rate_tape

EPOCH_SCHEMA = "# schema: wbgnn-epochs v1"
EVAL_SCHEMA = "# schema: wbgnn-eval v1"
EPOCH_COLUMNS = ["phase", "epoch", "tau", "train_loss", "train_se", "val_se", "best"]


class TrainingError(RuntimeError):
    pass


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


@dataclass
class TrainConfig:
    variant: str = "ngnn"
    batch_size: int = 50
    lr_precoder: float = 1e-3
    lr_scheduler: float = 3e-4
    epochs_pre: int = 40
    epochs_sched: int = 10
    epochs_joint: int = 40
    tau0: float = 0.1
    tau_amp: float = 0.4
    tau_decay: float = 0.02
    sched_widths: str = ""
    prec_hidden: str = "48,48,48,48"
    attention: int = 1
    seed: int = 0
    n_train: int = 5000
    n_test: int = 500
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in ("ngnn", "sgnn"):
            raise ValueError("variant must be ngnn or sgnn")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if min(self.lr_precoder, self.lr_scheduler) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.epochs_pre, self.epochs_sched, self.epochs_joint) < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not self.sched_widths:
            self.sched_widths = "4,32,32,32,1" if self.variant == "ngnn" else "5,32,32,1"

    def tau(self, epoch: int) -> float:
        return self.tau0 + self.tau_amp * float(np.exp(-self.tau_decay * epoch))

    def scheduler_widths(self) -> list[int]:
        return _int_list(self.sched_widths)

    def precoder_widths(self, n_rf: int) -> list[int]:
        return [2] + _int_list(self.prec_hidden) + [4 * n_rf + 2]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            if key not in kinds:
                raise KeyError(f"unknown training key {key!r}")
            kind = kinds[key]
            if isinstance(raw, str) and kind in (int, "int"):
                raw = int(raw)
            elif isinstance(raw, str) and kind in (float, "float"):
                raw = float(raw)
            kw[key] = raw
        return cls(**kw)

    def to_mapping(self) -> dict:
        return asdict(self)


def split_config(mapping: dict) -> tuple[ScenarioConfig, TrainConfig]:
    """Route the keys of one flat config file to the two config types."""
    scen_keys = {f.name for f in fields(ScenarioConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(mapping) - scen_keys - train_keys
    if unknown:
        raise KeyError(f"unknown config keys {sorted(unknown)}")
    scen = ScenarioConfig.from_mapping({k: v for k, v in mapping.items() if k in scen_keys})
    train = TrainConfig.from_mapping({k: v for k, v in mapping.items() if k in train_keys})
    return scen, train


# -- the nested model ------------------------------------------------------------------

class JointModel:
    """Scheduler followed by precoder, evaluated on the scheduled sum rate."""

    def __init__(self, scheduler: Scheduler, precoder: PrecoderGNN):
        self.scheduler = scheduler
        self.precoder = precoder

    @classmethod
    def build(cls, scen: ScenarioConfig, tc: TrainConfig) -> "JointModel":
        rng = np.random.default_rng(tc.seed)
        sched = Scheduler(tc.variant, scen.num_sched, tc.scheduler_widths(), rng)
        prec = PrecoderGNN(tc.precoder_widths(scen.num_rf), scen.num_rf, rng, attention=bool(tc.attention))
        return cls(sched, prec)

    @property
    def k_sched(self) -> int:
        return self.scheduler.k_sched

    def forward(
        self,
        h: np.ndarray,
        num_rx: int,
        sigma2: float,
        p_tot: float,
        mode: str = "test",
        tau: float = 1.0,
        sched_norm: str = "eval",
        prec_norm: str = "eval",
        schedule: np.ndarray | None = None,
    ):
        """Per-sample SE Tensor, schedule basis (or None) and the precoder outputs.

        ``schedule`` (B, M, K', K) overrides the scheduler.  When K <= K'
        the scheduler is bypassed and every user is precoded.
        """
        k = h.shape[2] // num_rx
        scale = rms_scale(h)[:, None, None, None]
        h_in = CPair.from_complex(h / scale)
        h_rate = CPair.from_complex(h / np.sqrt(sigma2))
        if schedule is not None:
            B = Tensor(schedule)
        elif k <= self.k_sched:
            B = None
        else:
            B, _ = self.scheduler.basis(scheduler_inputs(h, num_rx), mode, tau, sched_norm)
        if B is not None:
            h_in = extract_scheduled_tape(h_in, B, num_rx)
            h_rate = extract_scheduled_tape(h_rate, B, num_rx)
        w_rf, w_bb, v, _ = self.precoder(h_in, num_rx, p_tot, prec_norm)
        se = sum_rate_tape(h_rate, w_rf, w_bb, v, 1.0)
        return se, B, (w_rf, w_bb, v)

    def infer(self, h, num_rx, sigma2, p_tot, schedule=None):
        """Hard-path decisions: per-sample SE, schedule basis and HybridSolution."""
        se, B, (w_rf, w_bb, v) = self.forward(h, num_rx, sigma2, p_tot, schedule=schedule)
        sol = HybridSolution(w_rf.to_complex(), w_bb.to_complex(), v.to_complex())
        return se.data, (None if B is None else B.data), sol


def loss(model: JointModel, h, scen: ScenarioConfig, mode: str, tau: float = 1.0, **kw) -> Tensor:
    """Batch-mean negative scheduled sum rate."""
    se, _, _ = model.forward(
        h, scen.num_rx, noise_power_per_rb(scen), scen.p_tot, mode=mode, tau=tau, **kw
    )
    return -ad.mean(se)


def evaluate_se(model: JointModel, h, scen: ScenarioConfig, batch: int = 250, schedule=None) -> np.ndarray:
    sigma2 = noise_power_per_rb(scen)
    out = []
    for i in range(0, h.shape[0], batch):
        sl = None if schedule is None else schedule[i:i + batch]
        se, _, _ = model.forward(h[i:i + batch], scen.num_rx, sigma2, scen.p_tot, schedule=sl)
        out.append(se.data)
    return np.concatenate(out)


def strongest_bases(h, k_sched, num_rx) -> np.ndarray:
    return schedule_strongest(h, k_sched, num_rx).B


# -- training phases --------------------------------------------------------------------

@dataclass
class _Phase:
    name: str
    params: list
    optimizers: list
    mode: str
    sched_norm: str
    prec_norm: str
    fixed_schedule: bool
    anneal: bool


def _snapshot(model: JointModel) -> tuple[bytes, bytes]:
    return checkpoint.to_bytes(model.scheduler), checkpoint.to_bytes(model.precoder)


def _restore(model: JointModel, snap):
    model.scheduler = checkpoint.from_bytes(snap[0])
    model.precoder = checkpoint.from_bytes(snap[1])


def _grad_report(grads) -> str:
    norms = [float(np.sqrt(np.sum(g * g))) for g in grads.values()]
    return f"grad norms min={min(norms):.3g} max={max(norms):.3g}" if norms else "no grads"


def _run_phase(model, phase: _Phase, epochs, h_train, h_val, scen, tc, log, rows, seed_offset):
    sigma2 = noise_power_per_rb(scen)
    n = h_train.shape[0]
    sched_train = strongest_bases(h_train, model.k_sched, scen.num_rx) if phase.fixed_schedule else None
    sched_val = strongest_bases(h_val, model.k_sched, scen.num_rx) if phase.fixed_schedule else None

    def measure():
        tr = evaluate_se(model, h_train, scen, schedule=sched_train).mean()
        va = evaluate_se(model, h_val, scen, schedule=sched_val).mean()
        return float(tr), float(va)

    train_se, val_se = measure()
    best = val_se
    best_snap = _snapshot(model)
    rows.append([phase.name, 0, "", "", train_se, val_se, 1])
    log(f"{phase.name} epoch 0: train_se={train_se:.4f} val_se={val_se:.4f}")

    rng = np.random.default_rng(tc.seed + seed_offset)
    for epoch in range(1, epochs + 1):
        tau = tc.tau(epoch - 1) if phase.anneal else 1.0
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, tc.batch_size):
            idx = np.sort(order[start:start + tc.batch_size])
            sched = None if sched_train is None else sched_train[idx]
            with Tape() as tape:
                value = loss(
                    model, h_train[idx], scen, phase.mode, tau,
                    sched_norm=phase.sched_norm, prec_norm=phase.prec_norm, schedule=sched,
                )
            grads = tape.backward(value, wrt=phase.params)
            if not np.isfinite(value.data) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite loss or gradient in {phase.name} epoch {epoch} (tau={tau}); "
                    + _grad_report(grads)
                )
            for opt in phase.optimizers:
                opt.step(grads)
            losses.append(float(value.data))
        train_se, val_se = measure()
        improved = val_se > best
        if improved:
            best = val_se
            best_snap = _snapshot(model)
        rows.append([phase.name, epoch, tau if phase.anneal else "", float(np.mean(losses)), train_se, val_se, int(improved)])
        log(f"{phase.name} epoch {epoch}: loss={np.mean(losses):.4f} train_se={train_se:.4f} val_se={val_se:.4f}")
    _restore(model, best_snap)
    return best


def _split(h, tc):
    n_val = max(1, int(round(h.shape[0] * tc.val_fraction)))
    return h[:-n_val], h[-n_val:]


def pretrain_precoder(model: JointModel, h, scen, tc, log=print, rows=None) -> float:
    """Precoder alone on strongest-K' schedules; returns best validation SE."""
    rows = [] if rows is None else rows
    h_train, h_val = _split(h, tc)
    params = model.precoder.parameters()
    phase = _Phase("pretrain", params, [Adam(params, tc.lr_precoder)], "test", "eval", "train", True, False)
    return _run_phase(model, phase, tc.epochs_pre, h_train, h_val, scen, tc, log, rows, 1)


def train_scheduler(model: JointModel, h, scen, tc, log=print, rows=None) -> float:
    """Scheduler on the relaxed path; precoder weights and statistics frozen."""
    rows = [] if rows is None else rows
    h_train, h_val = _split(h, tc)
    params = model.scheduler.parameters()
    phase = _Phase("train-sched", params, [Adam(params, tc.lr_scheduler)], "train", "train", "eval", False, True)
    return _run_phase(model, phase, tc.epochs_sched, h_train, h_val, scen, tc, log, rows, 2)


def joint_train(model: JointModel, h, scen, tc, log=print, rows=None) -> float:
    """Both modules fine-tuned together on the relaxed path."""
    rows = [] if rows is None else rows
    h_train, h_val = _split(h, tc)
    sp = model.scheduler.parameters()
    pp = model.precoder.parameters()
    opts = [Adam(sp, tc.lr_scheduler), Adam(pp, tc.lr_precoder)]
    phase = _Phase("train-joint", sp + pp, opts, "train", "train", "train", False, True)
    return _run_phase(model, phase, tc.epochs_joint, h_train, h_val, scen, tc, log, rows, 3)


def write_epoch_csv(path, rows):
    with open(path, "w", newline="") as f:
        f.write(EPOCH_SCHEMA + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# -- evaluation --------------------------------------------------------------------------

BASELINES = ("strongest-gnn", "greedy-hybrid", "greedy-digital", "exhaustive-digital")


def baseline_se(name: str, h: np.ndarray, scen: ScenarioConfig, model: JointModel | None = None) -> np.ndarray:
    """Per-sample SE of a reference method on a batch of channels."""
    n_r, k_s, sigma2, p_tot, m = scen.num_rx, scen.num_sched, noise_power_per_rb(scen), scen.p_tot, h.shape[1]
    if name == "strongest-gnn":
        return evaluate_se(model, h, scen, schedule=strongest_bases(h, k_s, n_r))
    out = np.empty(h.shape[0])
    for i, hi in enumerate(h):
        if name == "greedy-hybrid":
            basis = greedy_schedule(hi, k_s, functools.partial(hybrid_zf, p_tot=p_tot / m, num_rx=n_r), n_r, sigma2)
            hp = extract_scheduled(hi, basis, n_r)
            out[i] = sum_rate(hp, hybrid_zf(hp, p_tot, n_r), sigma2)
        elif name == "greedy-digital":
            basis = greedy_schedule(hi, k_s, functools.partial(digital_zf, p_tot=p_tot / m, num_rx=n_r), n_r, sigma2)
            hp = extract_scheduled(hi, basis, n_r)
            out[i] = sum_rate(hp, digital_zf(hp, p_tot, n_r), sigma2)
        elif name == "exhaustive-digital":
            _, out[i] = exhaustive_schedule(
                hi, k_s, functools.partial(digital_zf, p_tot=p_tot / m, num_rx=n_r), n_r, sigma2
            )
        else:
            raise ValueError(f"unknown baseline {name!r}")
    return out


@dataclass
class EvalReport:
    label: str
    samples: int
    mean_se: float
    baselines: dict
    residuals: dict
    seconds: float
    flops: int

    def ratio(self, name: str) -> float:
        return self.mean_se / self.baselines[name]

    def row(self, timing: bool = False) -> dict:
        """CSV row; wall-clock is opt-in so reports stay byte-reproducible."""
        out = {"label": self.label, "samples": self.samples, "mean_se": self.mean_se}
        for name, value in self.baselines.items():
            out[f"se_{name}"] = value
            out[f"ratio_{name}"] = self.ratio(name)
        out.update(self.residuals)
        if timing:
            out["seconds"] = self.seconds
        out["flops"] = self.flops
        return out


def evaluate(model: JointModel, h: np.ndarray, scen: ScenarioConfig, baselines=(), label: str = "eval") -> EvalReport:
    if h.shape[-1] != scen.num_tx or h.shape[-2] != scen.num_users * scen.num_rx:
        raise ValueError("dataset dims disagree with scenario")
    start = time.perf_counter()
    sigma2 = noise_power_per_rb(scen)
    se, _, sol = model.infer(h, scen.num_rx, sigma2, scen.p_tot)
    seconds = time.perf_counter() - start
    res = check_constraints(sol, scen.p_tot)
    base = {name: float(baseline_se(name, h, scen, model).mean()) for name in baselines}
    k_eff = min(scen.num_sched, scen.num_users)
    dims = {"M": scen.num_rb, "K": scen.num_users, "K_sched": k_eff, "N_R": scen.num_rx, "N_T": scen.num_tx}
    widths = {
        "scheduler": model.scheduler.widths,
        "precoder": model.precoder.widths,
        "variant": model.scheduler.variant,
    }
    return EvalReport(label, h.shape[0], float(se.mean()), base, res, seconds, flops_count("network", dims, widths))


def write_eval_csv(path, reports: list[EvalReport], timing: bool = False):
    rows = [r.row(timing) for r in reports]
    columns = list(rows[0].keys())
    for r in rows[1:]:
        columns += [c for c in r if c not in columns]
    with open(path, "w", newline="") as f:
        f.write(EVAL_SCHEMA + "\n")
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
