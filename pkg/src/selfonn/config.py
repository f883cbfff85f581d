"""Run-configuration loading: JSON schema validation plus semantic checks.

A config fully determines a run (the only environment influence is the
documented SELFONN_OUT / SELFONN_THREADS overrides). Validation happens
before any side effect: schema first, then shape algebra on the layer
chain, then task/dataset consistency, so a bad config never leaves partial
output behind.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from . import tasks_data as td
from .network import LayerSpec, OperatorSet, Sampling, chain_sizes
from .tensor_core import ShapeError
from .trainer import TrainConfig

ENV_OUT = "SELFONN_OUT"
ENV_THREADS = "SELFONN_THREADS"


class ConfigError(ValueError):
    """Invalid run configuration; the message pinpoints the offending key."""


#: generator keys meaningful per task (count and seed are always allowed)
_GENERATOR_KEYS = {
    "denoise": {"noise_snr_db", "n_folds", "train_fraction", "max_folds"},
    "segment": {"n_folds", "train_fraction", "max_folds"},
    "synthesize": {"per_fold", "max_folds"},
    "transform": {"per_fold", "max_folds"},
    "toy_rotate180": set(),
}


@dataclass
class RunConfig:
    specs: list
    input_size: tuple
    in_neurons: int
    training: TrainConfig
    task: str
    dataset: dict
    output_dir: str
    base_dir: str  # directory of the config file; relative paths anchor here


def _schema():
    with resources.files("selfonn").joinpath("config_schema.json").open() as fh:
        return json.load(fh)


def _layer_spec(d: dict) -> LayerSpec:
    o = d.get("operators", {})
    s = d.get("sampling", {})
    return LayerSpec(
        neurons=d["neurons"],
        kernel=tuple(d["kernel"]),
        q_order=d.get("q_order", 1),
        operators=OperatorSet(
            pool=o.get("pool", "sum"),
            activation=o.get("activation", "tanh"),
            nodal=o.get("nodal", "maclaurin"),
        ),
        sampling=Sampling(
            mode=s.get("mode", "none"),
            factors=tuple(s.get("factors", (1, 1))),
        ),
    )


def load_config(path, seed=None, runs=None, f32: bool = False) -> RunConfig:
    """Parse, schema-validate, and semantically check a run config.

    ``seed``/``runs``/``f32`` are the CLI flag overrides; SELFONN_OUT and
    SELFONN_THREADS are read here as well.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "(top level)"
        raise ConfigError(f"{path}: at {where}: {e.message}") from e

    net = doc["network"]
    try:
        specs = [_layer_spec(d) for d in net["layers"]]
    except ValueError as e:
        raise ConfigError(f"{path}: network.layers: {e}") from e
    input_size = tuple(net["input_size"])
    in_neurons = net.get("in_neurons", 1)
    try:
        chain_sizes(specs, input_size, in_neurons)
    except ShapeError as e:
        raise ConfigError(f"{path}: network shape check failed: {e}") from e

    tr = dict(doc["training"])
    if seed is not None:
        tr["seed"] = seed
    if runs is not None:
        tr["runs"] = runs
    if f32:
        tr["dtype"] = "f32"
    env_threads = os.environ.get(ENV_THREADS)
    if env_threads:
        try:
            tr["threads"] = int(env_threads)
        except ValueError as e:
            raise ConfigError(f"{ENV_THREADS}={env_threads!r} is not an integer") from e
    try:
        training = TrainConfig(**tr)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: training: {e}") from e

    task = doc["task"]
    dataset = doc["dataset"]
    base_dir = os.path.dirname(os.path.abspath(path))
    if "generator" in dataset:
        gen = dataset["generator"]
        allowed = {"count", "seed"} | _GENERATOR_KEYS[task]
        extra = set(gen) - allowed
        if extra:
            raise ConfigError(
                f"{path}: dataset.generator keys {sorted(extra)} do not apply "
                f"to task {task!r}"
            )
        if task in ("synthesize", "transform"):
            per = gen.get("per_fold", 8 if task == "synthesize" else 4)
            if task == "transform" and per % 2:
                raise ConfigError(f"{path}: transform per_fold must be even")
            if gen["count"] % per:
                raise ConfigError(
                    f"{path}: generator count {gen['count']} is not a multiple "
                    f"of per_fold {per}"
                )
        if task in ("denoise", "segment"):
            if gen["count"] < gen.get("n_folds", 10):
                raise ConfigError(f"{path}: generator count below n_folds")
    else:
        mpath = dataset["manifest"]
        if not os.path.isabs(mpath):
            mpath = os.path.join(base_dir, mpath)
        if not os.path.isfile(mpath):
            raise ConfigError(f"{path}: dataset manifest {mpath} does not exist")

    output_dir = os.environ.get(ENV_OUT) or doc["output_dir"]
    if not os.path.isabs(output_dir):
        output_dir = os.path.join(base_dir, output_dir)

    return RunConfig(
        specs=specs,
        input_size=input_size,
        in_neurons=in_neurons,
        training=training,
        task=task,
        dataset=dataset,
        output_dir=output_dir,
        base_dir=base_dir,
    )


def build_folds(cfg: RunConfig):
    """Materialize the dataset as folds of samples, validating geometry."""
    if "manifest" in cfg.dataset:
        mpath = cfg.dataset["manifest"]
        if not os.path.isabs(mpath):
            mpath = os.path.join(cfg.base_dir, mpath)
        task_kind, folds = td.load_dataset(mpath)
        if task_kind != cfg.task:
            raise ConfigError(
                f"manifest task {task_kind!r} does not match config task {cfg.task!r}"
            )
    else:
        gen = cfg.dataset["generator"]
        count = gen["count"]
        seed = gen.get("seed", 0)
        size = cfg.input_size
        if cfg.task == "toy_rotate180":
            if size[0] != size[1]:
                raise ConfigError("toy_rotate180 needs square inputs")
            samples = td.make_toy_rotate180(count, seed=seed, size=size[0])
            folds = [td.Fold(train=samples, test=[], seed=seed)]
        elif cfg.task == "denoise":
            corpus = td.build_denoise_corpus(
                count, gen.get("noise_snr_db", 0.0), size, seed
            )
            folds = td.make_folds(
                corpus, gen.get("n_folds", 10), gen.get("train_fraction", 0.10), seed
            )
        elif cfg.task == "segment":
            corpus = td.build_segment_corpus(count, size, seed)
            folds = td.make_folds(
                corpus, gen.get("n_folds", 10), gen.get("train_fraction", 0.10), seed
            )
        elif cfg.task == "synthesize":
            folds = td.build_synthesize_folds(count, gen.get("per_fold", 8), size, seed)
        else:
            folds = td.build_transform_folds(count, gen.get("per_fold", 4), size, seed)
        if "max_folds" in gen:
            folds = folds[: gen["max_folds"]]
    for fold in folds:
        for s in fold.train + fold.test:
            if s.input.shape != tuple(cfg.input_size):
                raise ConfigError(
                    f"sample {s.id} shape {s.input.shape} does not match "
                    f"network input_size {tuple(cfg.input_size)}"
                )
    return folds


def expected_output_shape(cfg: RunConfig):
    sizes = chain_sizes(cfg.specs, cfg.input_size, cfg.in_neurons)
    return (cfg.specs[-1].neurons,) + sizes[-1].post


def draw_gradcheck_samples(cfg: RunConfig, count: int, salt: int = 0):
    """Random bounded input/target pairs sized for the configured network.

    ``salt`` varies the draw when the harness has to step away from a
    non-smooth configuration.
    """
    out_shape = expected_output_shape(cfg)
    samples = []
    for i in range(count):
        rng = np.random.default_rng([cfg.training.seed, 65537, salt, i])
        x = rng.uniform(-1.0, 1.0, tuple(cfg.input_size))
        t = rng.uniform(-1.0, 1.0, out_shape)
        samples.append(td.Sample(x, t if t.shape[0] > 1 else t[0], f"gradcheck-{i}"))
    return samples
