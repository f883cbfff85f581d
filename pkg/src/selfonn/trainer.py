"""Fixed-learning-rate SGD with restarts, logging, and evaluation.

One iteration = forward/backward over the batch (gradients summed in fixed
sample order), one parameter update. A training session launches
``config.runs`` independently seeded restarts and keeps the run with the
lowest final train MSE. Runs stop at ``max_iter`` or as soon as the batch
MSE reaches ``min_mse``; a run whose loss or gradients go non-finite is
marked diverged and excluded from selection.

All randomness (init, batch subsampling) derives from ``(seed, run index)``
so any run can be reproduced in isolation.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .backprop import batch_gradients
from .network import INIT_RULES, Network
from .tasks_data import f1_and_ce, snr_db


class NonFiniteGradientError(ValueError):
    """A gradient entry went NaN/Inf; the message names the parameter."""


class TrainingDivergedError(RuntimeError):
    """Every restart diverged; carries the partial logs for preservation."""

    def __init__(self, message: str, logs=None):
        super().__init__(message)
        self.logs = logs or []


@dataclass
class TrainConfig:
    learning_rate: float
    max_iter: int
    min_mse: float = 0.0
    runs: int = 3
    seed: int = 0
    batch_size: int | None = None       # None = full fold every iteration
    init_rule: str = "glorot_uniform"
    dtype: str = "f64"
    threads: int = 1                    # restart-level parallelism only
    log_timings: bool = False           # keep ms_elapsed at 0 for diffable logs
    eval_every: int = 0                 # 0 = no per-iteration eval metrics

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.min_mse < 0:
            raise ValueError("min_mse must be non-negative")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 when set")
        if self.init_rule not in INIT_RULES:
            raise ValueError(f"unknown init rule {self.init_rule!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class IterRecord:
    iteration: int
    train_mse: float
    train_snr_db: float
    eval_mse: float | None = None
    eval_snr_db: float | None = None
    ms_elapsed: float = 0.0


@dataclass
class RunLog:
    run_index: int
    records: list = field(default_factory=list)
    final_mse: float = np.inf
    final_snr_db: float = np.nan
    diverged: bool = False


@dataclass
class TrainResult:
    best_index: int
    network: Network
    logs: list

    @property
    def best_log(self) -> RunLog:
        return self.logs[self.best_index]


def sgd_step(params, grads, lr: float) -> None:
    """In-place ``w -= lr * dE/dw`` (and biases); nothing else changes."""
    for li, (p, g) in enumerate(zip(params, grads)):
        for name, garr in (("weights", g.weights), ("biases", g.biases)):
            bad = ~np.isfinite(garr)
            if np.any(bad):
                idx = tuple(int(v) for v in np.argwhere(bad)[0])
                raise NonFiniteGradientError(
                    f"layer {li} {name} gradient non-finite at index {idx}"
                )
        p.weights -= lr * g.weights
        p.biases -= lr * g.biases


def _mean_mse_snr(network: Network, samples):
    mses, snrs = [], []
    for s in samples:
        out = network(s.input)
        tgt = _cropped_target(s, out.shape)
        err = out - tgt
        mses.append(float(np.mean(err * err)))
        snrs.append(snr_db(tgt, out))
    return float(np.mean(mses)), float(np.mean(snrs))


def _cropped_target(sample, out_shape):
    tgt = sample.target
    if tgt.ndim == 2:
        tgt = tgt[None]
    return tc.crop_center(tgt, out_shape[1:])


def _train_one_run(specs, in_neurons, train_samples, config, run_index, eval_samples):
    net = Network.from_specs(
        specs, in_neurons, seed=[config.seed, run_index],
        init_rule=config.init_rule, dtype=config.np_dtype,
    )
    batch_rng = np.random.default_rng([config.seed, run_index, 1])
    log = RunLog(run_index=run_index)
    for it in range(1, config.max_iter + 1):
        t0 = time.perf_counter() if config.log_timings else 0.0
        if config.batch_size is None or config.batch_size >= len(train_samples):
            batch = train_samples
        else:
            picks = batch_rng.choice(
                len(train_samples), size=config.batch_size, replace=False
            )
            batch = [train_samples[i] for i in picks]
        try:
            mse, grads, outputs = batch_gradients(net, batch)
        except FloatingPointError:
            log.diverged = True
            break
        snrs = []
        for s, out in zip(batch, outputs):
            snrs.append(snr_db(_cropped_target(s, out.shape), out))
        rec = IterRecord(iteration=it, train_mse=mse, train_snr_db=float(np.mean(snrs)))
        if config.eval_every and eval_samples and it % config.eval_every == 0:
            rec.eval_mse, rec.eval_snr_db = _mean_mse_snr(net, eval_samples)
        if config.log_timings:
            rec.ms_elapsed = (time.perf_counter() - t0) * 1e3
        log.records.append(rec)
        if not np.isfinite(mse):
            log.diverged = True
            break
        if mse <= config.min_mse:
            break
        try:
            sgd_step(net.params, grads, config.learning_rate)
        except NonFiniteGradientError:
            log.diverged = True
            break
    if log.diverged:
        log.final_mse = np.inf
    else:
        log.final_mse, log.final_snr_db = _mean_mse_snr(net, train_samples)
    return log, net


def train(specs, train_samples, config: TrainConfig,
          in_neurons: int = 1, eval_samples=None) -> TrainResult:
    """Run seeded restarts and return the best network plus all logs.

    Best = lowest final train MSE over the full train set (ties go to the
    lower run index). Raises :class:`TrainingDivergedError` only if every
    restart diverged.
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise ValueError("empty train set")

    def job(j):
        return _train_one_run(specs, in_neurons, train_samples, config, j, eval_samples)

    if config.threads > 1 and config.runs > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(job, range(config.runs)))
    else:
        results = [job(j) for j in range(config.runs)]
    logs = [r[0] for r in results]
    finals = [log.final_mse for log in logs]
    if not np.any(np.isfinite(finals)):
        raise TrainingDivergedError("all restarts diverged", logs)
    best = int(np.argmin(finals))
    return TrainResult(best_index=best, network=results[best][1], logs=logs)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalMetrics:
    per_sample: list
    mse: float
    snr_db: float
    f1: float | None = None
    ce: float | None = None


def evaluate(network: Network, samples, with_f1: bool = False,
             threshold: float = 0.0) -> EvalMetrics:
    """Per-sample and aggregate MSE/SNR; F1/CE when the targets are masks.

    Aggregates are plain means of the per-sample values; segmentation masks
    are recovered from the +/-1 targets as target > 0.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to evaluate")
    per = []
    for s in samples:
        out = network(s.input)
        tgt = _cropped_target(s, out.shape)
        err = out - tgt
        row = {
            "id": s.id,
            "mse": float(np.mean(err * err)),
            "snr_db": snr_db(tgt, out),
        }
        if with_f1:
            f1, ce = f1_and_ce(out, tgt > 0, threshold)
            row["f1"], row["ce"] = f1, ce
        per.append(row)
    agg = EvalMetrics(
        per_sample=per,
        mse=float(np.mean([r["mse"] for r in per])),
        snr_db=float(np.mean([r["snr_db"] for r in per])),
    )
    if with_f1:
        agg.f1 = float(np.mean([r["f1"] for r in per]))
        agg.ce = float(np.mean([r["ce"] for r in per]))
    return agg


# ---------------------------------------------------------------------------
# Log serialization
# ---------------------------------------------------------------------------

TRAINLOG_COLUMNS = (
    "iteration", "train_mse", "train_snr_db", "eval_mse", "eval_snr_db", "ms_elapsed"
)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_trainlog_csv(path, log: RunLog) -> None:
    """Fixed 6-decimal CSV, one row per iteration; empty cells where the
    optional eval metrics were not computed."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINLOG_COLUMNS)
        for r in log.records:
            writer.writerow(
                [
                    str(r.iteration),
                    _fmt(r.train_mse),
                    _fmt(r.train_snr_db),
                    _fmt(r.eval_mse),
                    _fmt(r.eval_snr_db),
                    _fmt(r.ms_elapsed),
                ]
            )
