"""Command-line surface: train, eval, gradcheck, cost, compare.

Every command validates its whole config before touching the filesystem.
Exit codes: 0 success, 1 quantitative failure (gradient check over
tolerance), 2 usage/config error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import gradcheck as gc
from .config import (
    ConfigError,
    RunConfig,
    build_folds,
    draw_gradcheck_samples,
    load_config,
)
from .network import Network, count_macs, count_params, load_checkpoint, save_checkpoint
from .tasks_data import unit_to_u8, write_pgm
from .trainer import TrainingDivergedError, evaluate, train, write_trainlog_csv

EXIT_OK = 0
EXIT_QUANT = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _fmt6(v: float) -> str:
    return f"{v:.6f}"


def _write_outputs(network: Network, samples, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for s in samples:
        out = network(s.input)
        if out.shape[0] == 1:
            write_pgm(os.path.join(out_dir, f"{s.id}.pgm"), unit_to_u8(out[0]))
        else:
            for ch in range(out.shape[0]):
                write_pgm(
                    os.path.join(out_dir, f"{s.id}_n{ch}.pgm"), unit_to_u8(out[ch])
                )


def _metric_line(label: str, m, with_f1: bool) -> str:
    line = f"{label} mse {_fmt6(m.mse)} snr_db {_fmt6(m.snr_db)}"
    if with_f1:
        line += f" f1 {_fmt6(m.f1)} ce {_fmt6(m.ce)}"
    return line


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, runs=args.runs, f32=args.f32)
    folds = build_folds(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with_f1 = cfg.task == "segment"
    summary_rows = []
    for k, fold in enumerate(folds):
        fold_dir = os.path.join(cfg.output_dir, f"fold{k:02d}")
        os.makedirs(fold_dir, exist_ok=True)
        try:
            result = train(cfg.specs, fold.train, cfg.training, cfg.in_neurons)
        except TrainingDivergedError as e:
            for log in e.logs:
                write_trainlog_csv(
                    os.path.join(fold_dir, f"trainlog_run{log.run_index}.csv"), log
                )
            print(f"fold {k}: {e}", file=sys.stderr)
            return EXIT_DIVERGED
        for log in result.logs:
            write_trainlog_csv(
                os.path.join(fold_dir, f"trainlog_run{log.run_index}.csv"), log
            )
        save_checkpoint(os.path.join(fold_dir, "best.json"), result.network)
        part_name = "test" if fold.test else "train"
        eval_part = fold.test if fold.test else fold.train
        train_m = evaluate(result.network, fold.train, with_f1=with_f1)
        eval_m = evaluate(result.network, eval_part, with_f1=with_f1)
        _write_outputs(result.network, eval_part, os.path.join(fold_dir, "outputs"))
        print(
            f"fold {k}: best run {result.best_index} | "
            + _metric_line("train", train_m, with_f1)
            + " | "
            + _metric_line(part_name, eval_m, with_f1)
        )
        row = [k, _fmt6(train_m.mse), _fmt6(train_m.snr_db),
               _fmt6(eval_m.mse), _fmt6(eval_m.snr_db)]
        if with_f1:
            row += [_fmt6(eval_m.f1), _fmt6(eval_m.ce)]
        summary_rows.append(row)
    header = ["fold", "train_mse", "train_snr_db", "eval_mse", "eval_snr_db"]
    if with_f1:
        header += ["eval_f1", "eval_ce"]
    with open(os.path.join(cfg.output_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(summary_rows)
    mean_mse = float(np.mean([float(r[3]) for r in summary_rows]))
    mean_snr = float(np.mean([float(r[4]) for r in summary_rows]))
    print(f"overall: eval mse {_fmt6(mean_mse)} snr_db {_fmt6(mean_snr)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, f32=args.f32)
    folds = build_folds(cfg)
    network = load_checkpoint(args.checkpoint)
    if network.specs != cfg.specs or network.in_neurons != cfg.in_neurons:
        raise ConfigError(
            f"checkpoint {args.checkpoint} does not match the config's network"
        )
    with_f1 = cfg.task == "segment"
    for k, fold in enumerate(folds):
        part_name = "test" if fold.test else "train"
        part = fold.test if fold.test else fold.train
        m = evaluate(network, part, with_f1=with_f1)
        print(f"fold {k}: " + _metric_line(part_name, m, with_f1))
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg = load_config(args.config)
    from .network import chain_sizes  # local import keeps the header tidy

    sizes = chain_sizes(cfg.specs, cfg.input_size, cfg.in_neurons)
    per_macs, total_macs = count_macs(cfg.specs, cfg.input_size, cfg.in_neurons)
    total_params = count_params(cfg.specs, cfg.in_neurons)
    print(f"{'layer':>5}  {'neurons':>7}  {'kernel':>7}  {'q':>3}  "
          f"{'out':>9}  {'params(k)':>10}  {'macs(M)':>10}")
    prev = cfg.in_neurons
    for i, (spec, size) in enumerate(zip(cfg.specs, sizes)):
        kx, ky = spec.kernel
        n_params = spec.neurons * (prev * kx * ky * spec.q_order + 1)
        out = f"{size.post[0]}x{size.post[1]}"
        print(f"{i:>5}  {spec.neurons:>7}  {f'{kx}x{ky}':>7}  {spec.q_order:>3}  "
              f"{out:>9}  {n_params / 1e3:>10.3f}  {per_macs[i] / 1e6:>10.3f}")
        prev = spec.neurons
    print(f"total  params {total_params / 1e3:.3f}k ({total_params})  "
          f"macs {total_macs / 1e6:.3f}M ({total_macs})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    if args.f32 or cfg.training.dtype == "f32":
        print("error: gradcheck requires the 64-bit path", file=sys.stderr)
        return EXIT_CONFIG
    network = None
    samples = None
    for attempt in range(32):
        candidate = Network.from_specs(
            cfg.specs, cfg.in_neurons, seed=[cfg.training.seed, attempt],
            init_rule=cfg.training.init_rule,
        )
        drawn = draw_gradcheck_samples(cfg, args.samples, salt=attempt)
        if gc.nonsmooth_margin(candidate, drawn) > gc.NONSMOOTH_MARGIN:
            network, samples = candidate, drawn
            break
    if network is None:
        print("error: no smooth configuration found for finite differences",
              file=sys.stderr)
        return EXIT_CONFIG
    result = gc.check_network(network, samples, inject_error=args.inject_error)
    os.makedirs(cfg.output_dir, exist_ok=True)
    report = os.path.join(cfg.output_dir, "gradcheck_report.csv")
    gc.write_report_csv(report, result.rows)
    for li, rel in enumerate(result.layer_max_rel):
        print(f"layer {li}: max rel err {rel:.6e}")
    for bi, rel in enumerate(result.delta_max_rel):
        print(f"delta boundary {bi}: max rel err {rel:.6e}")
    if result.passed:
        print(f"PASS (report: {report})")
        return EXIT_OK
    print(f"FAIL: {result.n_failed} entries over tolerance (report: {report})")
    return EXIT_QUANT


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two configs")
    cfgs = [load_config(p, seed=args.seed, runs=args.runs, f32=args.f32)
            for p in args.configs]
    names = []
    for p in args.configs:
        stem = os.path.splitext(os.path.basename(p))[0]
        names.append(stem if stem not in names else f"{stem}#{len(names)}")
    first = cfgs[0]
    for cfg, name in zip(cfgs[1:], names[1:]):
        if cfg.task != first.task or cfg.dataset != first.dataset \
                or tuple(cfg.input_size) != tuple(first.input_size):
            raise ConfigError(
                f"config {name} runs a different task/dataset/fold layout"
            )
    folds = build_folds(first)
    with_f1 = first.task == "segment"
    metric_name = "f1" if with_f1 else "best_snr_db"
    for cfg, name in zip(cfgs, names):
        _, total_macs = count_macs(cfg.specs, cfg.input_size, cfg.in_neurons)
        print(f"model {name}: params {count_params(cfg.specs, cfg.in_neurons)} "
              f"macs {total_macs}")
    rows = []
    per_model = {name: [] for name in names}
    for k, fold in enumerate(folds):
        for cfg, name in zip(cfgs, names):
            try:
                result = train(cfg.specs, fold.train, cfg.training, cfg.in_neurons)
            except TrainingDivergedError as e:
                print(f"fold {k} model {name}: {e}", file=sys.stderr)
                return EXIT_DIVERGED
            if with_f1:
                value = evaluate(result.network, fold.train, with_f1=True).f1
            else:
                best = result.best_log
                value = max(
                    [r.train_snr_db for r in best.records] + [best.final_snr_db]
                )
            rows.append([k, name, _fmt6(value)])
            per_model[name].append(value)
            print(f"fold {k} model {name}: {metric_name} {_fmt6(value)}")
    os.makedirs(first.output_dir, exist_ok=True)
    out_csv = os.path.join(first.output_dir, "compare.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "model", metric_name])
        writer.writerows(rows)
    for name in names:
        print(f"model {name}: mean {metric_name} "
              f"{_fmt6(float(np.mean(per_model[name])))}")
    print(f"comparison written to {out_csv}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfonn",
        description="Operational neural networks with generative neurons",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, runs=True):
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's training seed")
        if runs:
            p.add_argument("--runs", type=int, default=None,
                           help="override the restart count")
        p.add_argument("--f32", action="store_true",
                       help="use the 32-bit numeric path")

    p = sub.add_parser("train", help="train over the config's folds")
    p.add_argument("config")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's data")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--f32", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=2,
                   help="number of random samples in the check batch")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--f32", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", help="parameter and MAC counts per layer")
    p.add_argument("config")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("compare", help="train several configs on shared folds")
    p.add_argument("configs", nargs="+")
    add_common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
