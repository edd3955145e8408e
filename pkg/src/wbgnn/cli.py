"""Command-line entry point: ``wbgnn <command> [flags]``.

Checkpoint directories hold ``scheduler.wbnn``, ``precoder.wbnn`` and the
``config.cfg`` they were trained with.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import checkpoint, training
from .channel import (
    ScenarioConfig,
    format_config,
    generate_dataset,
    generate_sample,
    read_config,
    read_dataset,
    write_dataset,
)
from .flops import asymptotic_table, flops_count
from .scheduler import hard_top
from .system import compute_features

log = logging.getLogger("wbgnn")

TEST_SEED_OFFSET = 1_000_000_000
SWEEP_KEYS = {"M": "num_rb", "K": "num_users", "NT": "num_tx", "NR": "num_rx"}


class _Outputs:
    """Paths created by a command; removed again if the command fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def cleanup(self):
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _configs(args) -> tuple[ScenarioConfig, training.TrainConfig, dict]:
    mapping = read_config(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    scen, tc = training.split_config(mapping)
    return scen, tc, mapping


def _ckpt_dir(out: _Outputs, path) -> Path:
    d = Path(path)
    if not d.exists():
        out.add(d)
        d.mkdir(parents=True)
    return d


def _load_model(ckpt) -> tuple[training.JointModel, ScenarioConfig, training.TrainConfig]:
    d = Path(ckpt)
    for name in ("scheduler.wbnn", "precoder.wbnn", "config.cfg"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing {d / name}")
    scen, tc = training.split_config(read_config(d / "config.cfg"))
    model = training.JointModel(checkpoint.load(d / "scheduler.wbnn"), checkpoint.load(d / "precoder.wbnn"))
    return model, scen, tc


def _save_model(d: Path, out: _Outputs, model, scen, tc):
    checkpoint.save(model.scheduler, out.add(d / "scheduler.wbnn"))
    checkpoint.save(model.precoder, out.add(d / "precoder.wbnn"))
    (out.add(d / "config.cfg")).write_text(format_config({**scen.to_mapping(), **tc.to_mapping()}))


def _check_dataset(ds, scen):
    if ds.config.dims != scen.dims:
        raise ValueError(f"dataset dims {ds.config.dims} differ from config dims {scen.dims}")


# -- commands -------------------------------------------------------------------------------

def cmd_gen_data(args, out):
    scen, tc, _ = _configs(args)
    count = args.count or (tc.n_train if args.split == "train" else tc.n_test)
    base = tc.seed + (TEST_SEED_OFFSET if args.split == "test" else 0)
    ds = generate_dataset(scen, count, base, args.split, threads=args.threads)
    write_dataset(out.add(args.out), ds)
    log.info("wrote %d samples to %s", count, args.out)


def _train_command(args, out, phase):
    scen, tc, _ = _configs(args)
    ds = read_dataset(args.data)
    _check_dataset(ds, scen)
    if phase == "pretrain":
        model = training.JointModel.build(scen, tc)
    else:
        model, _, _ = _load_model(args.ckpt)
    d = _ckpt_dir(out, args.out)
    rows: list = []
    fn = {
        "pretrain": training.pretrain_precoder,
        "train-sched": training.train_scheduler,
        "train-joint": training.joint_train,
    }[phase]
    fn(model, ds.channels, scen, tc, log=log.info, rows=rows)
    _save_model(d, out, model, scen, tc)
    training.write_epoch_csv(out.add(d / f"{phase}-epochs.csv"), rows)


def cmd_eval(args, out):
    model, _, _ = _load_model(args.ckpt)
    ds = read_dataset(args.data)
    names = [b for b in (args.baselines or "").split(",") if b]
    report = training.evaluate(model, ds.channels, ds.config, names, label=Path(args.data).name)
    training.write_eval_csv(out.add(args.out), [report], timing=args.timing)
    log.info("mean SE %.4f (%.3f s)", report.mean_se, report.seconds)


def cmd_sweep(args, out):
    model, scen, tc = _load_model(args.ckpt)
    key = SWEEP_KEYS[args.axis]
    names = [b for b in (args.baselines or "greedy-hybrid").split(",") if b]
    seed = tc.seed if args.seed is None else args.seed
    reports = []
    for value in [int(v) for v in args.values.split(",")]:
        cfg = scen.replace(**{key: value})
        h = generate_dataset(cfg, args.samples, seed + TEST_SEED_OFFSET, "test", args.threads).channels
        reports.append(training.evaluate(model, h, cfg, names, label=f"{args.axis}={value}"))
        log.info("%s=%d: mean SE %.4f", args.axis, value, reports[-1].mean_se)
    training.write_eval_csv(out.add(args.out), reports, timing=args.timing)


def _spsd_policy(name: str, scen: ScenarioConfig, args):
    if name == "miso":
        def miso(h):
            w, _ = bl.miso_optimal_precoder(bl.MisoPrecoderSpec(h[0]))
            return w
        return miso, -1
    if name == "strongest":
        return (lambda h: hard_top(compute_features(h, scen.num_rx).raw_strength, scen.num_sched).activity), -1
    if name == "gnn":
        model, _, _ = _load_model(args.ckpt)

        def gnn(h):
            _, B, _ = model.infer(h[None], scen.num_rx, 1.0, scen.p_tot)
            return B[0].sum(axis=-2)
        return gnn, -1
    raise ValueError(f"unknown policy {name!r}")


def cmd_spsd(args, out):
    scen, tc, _ = _configs(args)
    policy, axis = _spsd_policy(args.policy, scen, args)
    seed = tc.seed if args.seed is None else args.seed
    report = bl.spsd_check(
        policy, args.axis, args.samples, scen, seed=seed, decision_axis=axis,
        pick=args.pick, channel_fn=lambda s: generate_sample(scen, s),
    )
    bl.write_spsd_csv(out.add(args.out), [report])
    log.info("agreement %.3f", report["agreement_rate"])


def cmd_flops(args, out):
    scen, tc, _ = _configs(args)
    dims = {"M": scen.num_rb, "K": scen.num_users, "K_sched": scen.num_sched,
            "N_R": scen.num_rx, "N_T": scen.num_tx, "N_RF": scen.num_rf}
    sw = tc.scheduler_widths()
    pw = tc.precoder_widths(scen.num_rf)
    lines = []
    for i, (a, b) in enumerate(zip(sw, sw[1:]), 1):
        lines.append(f"scheduler-layer {i} ({a}->{b}): {flops_count('scheduler-layer', dims, (a, b))}")
    for i, (a, b) in enumerate(zip(pw, pw[1:]), 1):
        lines.append(f"precoder-layer {i} ({a}->{b}): {flops_count('precoder-layer', dims, (a, b))}")
    total = flops_count("network", dims, {"scheduler": sw, "precoder": pw, "variant": tc.variant})
    lines.append(f"network ({tc.variant}): {total}")
    c = max(sw[1:-1] or sw)
    d = max(pw[1:-1] or pw)
    for name, value in asymptotic_table(dims, len(sw) - 1, c, len(pw) - 1, d).items():
        lines.append(f"order {name}: {value:.6g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out.add(args.out).write_text(text)
    sys.stdout.write(text)


# -- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wbgnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument("--threads", type=int, default=1, help="parallelism across samples")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a channel dataset"))
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--count", type=int, default=0, help="samples (default from config)")

    for name in ("pretrain", "train-sched", "train-joint"):
        t = common(sub.add_parser(name, help=f"{name} phase; --out is a checkpoint directory"))
        t.add_argument("--data", required=True, help="training dataset")
        if name != "pretrain":
            t.add_argument("--ckpt", required=True, help="input checkpoint directory")

    e = common(sub.add_parser("eval", help="evaluate checkpoints on a dataset"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baselines", default="", help=f"comma list of {', '.join(training.BASELINES)}")
    e.add_argument("--timing", action="store_true", help="add a wall-clock column")

    s = common(sub.add_parser("sweep", help="size generalization sweep"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--axis", choices=sorted(SWEEP_KEYS), required=True)
    s.add_argument("--values", required=True, help="comma list of sizes")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--baselines", default="greedy-hybrid")
    s.add_argument("--timing", action="store_true", help="add a wall-clock column")

    q = common(sub.add_parser("spsd", help="empirical same-parameter same-decision check"))
    q.add_argument("--axis", choices=("rb", "user-group", "an-ue-within-group", "an-bs"), required=True)
    q.add_argument("--samples", type=int, default=100)
    q.add_argument("--policy", choices=("miso", "strongest", "gnn"), default="miso")
    q.add_argument("--pick", choices=("random", "strongest"), default="random")
    q.add_argument("--ckpt", help="checkpoint directory for --policy gnn")

    common(sub.add_parser("flops", help="FLOPs table for the configured sizes"), out_required=False)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": lambda a, o: _train_command(a, o, "pretrain"),
    "train-sched": lambda a, o: _train_command(a, o, "train-sched"),
    "train-joint": lambda a, o: _train_command(a, o, "train-joint"),
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "spsd": cmd_spsd,
    "flops": cmd_flops,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    out = _Outputs()
    try:
        COMMANDS[args.command](args, out)
    except Exception as exc:  # every failure maps to a nonzero exit
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
