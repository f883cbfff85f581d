"""Layer specifications, parameter stacks, and the forward pass.

A network is a chain of operational layers. Each layer slides a
``kernel[r, t]`` window over every input map, applies a nodal transform to
each windowed value, pools the transformed terms, sums over input maps,
adds a bias, applies the activation, and optionally resamples
(block-average down, zero-order-hold up) -- in that order. With
``pool=sum, nodal=mul, q_order=1`` a layer reduces to an ordinary
valid-convolution CNN layer.

Two forward routes produce identical numbers (tested to tight tolerance):

* fast: for sum-pooled polynomial/linear layers the pooled response is a
  plain dot product between kernel weights and cached power-map windows,
  evaluated as one matrix multiply per layer;
* generic: dispatches through the scalar operator functions for any
  pool/nodal pair, windows iterated per input map.

The forward pass caches whatever back-propagation will need (power maps,
window matrices, activation derivatives, median pick positions).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import operators as ops
from . import tensor_core as tc

SAMPLING_MODES = frozenset({"none", "down", "up"})

#: Pool/nodal pairs the single-matmul route can evaluate.
FAST_NODALS = frozenset({"maclaurin", "mul"})


@dataclass(frozen=True)
class OperatorSet:
    """Pool + activation + nodal identifiers for one layer."""

    pool: str = "sum"
    activation: str = "tanh"
    nodal: str = "maclaurin"

    def __post_init__(self):
        if self.pool not in ops.POOL_IDS:
            raise ValueError(f"unknown pool operator {self.pool!r}")
        if self.activation not in ops.ACTIVATION_IDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.nodal not in ops.NODAL_IDS:
            raise ValueError(f"unknown nodal operator {self.nodal!r}")


@dataclass(frozen=True)
class Sampling:
    """Post-activation resampling: none, block-average down, or ZOH up."""

    mode: str = "none"
    factors: tuple = (1, 1)

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        fx, fy = self.factors
        object.__setattr__(self, "factors", (int(fx), int(fy)))
        if self.factors[0] < 1 or self.factors[1] < 1:
            raise ValueError(f"sampling factors must be >= 1, got {self.factors}")
        if self.mode == "none" and self.factors != (1, 1):
            raise ValueError("sampling mode 'none' requires factors (1, 1)")


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer (no learned state)."""

    neurons: int
    kernel: tuple
    q_order: int = 1
    operators: OperatorSet = OperatorSet()
    sampling: Sampling = Sampling()

    def __post_init__(self):
        if self.neurons < 1:
            raise ValueError(f"neurons must be >= 1, got {self.neurons}")
        kx, ky = self.kernel
        object.__setattr__(self, "kernel", (int(kx), int(ky)))
        if self.kernel[0] < 1 or self.kernel[1] < 1:
            raise ValueError(f"kernel dims must be >= 1, got {self.kernel}")
        if self.q_order < 1:
            raise ValueError(f"q_order must be >= 1, got {self.q_order}")
        if self.operators.nodal != "maclaurin" and self.q_order != 1:
            raise ValueError(
                f"nodal {self.operators.nodal!r} carries one weight per kernel "
                f"element; q_order must be 1, got {self.q_order}"
            )


@dataclass
class LayerParams:
    """Learned state: kernel stack ``weights[i, k, r, t, q]`` and biases.

    Axes: target neuron i, source map k, kernel row r, kernel column t,
    power index q (0-based; slot q holds the coefficient of ``y**(q+1)``).
    """

    weights: np.ndarray
    biases: np.ndarray

    def check(self, spec: LayerSpec, in_neurons: int) -> None:
        expected = (spec.neurons, in_neurons) + spec.kernel + (spec.q_order,)
        if self.weights.shape != expected:
            raise tc.ShapeError(
                f"weight stack shape {self.weights.shape} != spec shape {expected}"
            )
        if self.biases.shape != (spec.neurons,):
            raise tc.ShapeError(
                f"bias shape {self.biases.shape} != ({spec.neurons},)"
            )

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy())


@dataclass
class LayerForward:
    """Per-layer forward cache consumed by back-propagation."""

    inputs: np.ndarray              # (n_in, H, W) maps entering the layer
    x: np.ndarray                   # (neurons, oh, ow) pre-activation
    fprime: np.ndarray              # activation derivative at x
    outputs: np.ndarray             # (neurons, H', W') post-sampling
    input_powers: np.ndarray | None = None  # (n_in, Q, H, W); polynomial layers
    window_matrix: np.ndarray | None = None  # (n_in*Q*kx*ky, oh*ow); fast path
    pool_dfield: np.ndarray | None = None    # (neurons, n_in, oh, ow, kx, ky); median


@dataclass
class ForwardPass:
    """Everything one forward run computed, layer by layer."""

    layers: list = field(default_factory=list)

    @property
    def outputs(self) -> np.ndarray:
        return self.layers[-1].outputs


def layer_route(spec: LayerSpec) -> str:
    """Which forward/backward route a layer's operators admit."""
    if spec.operators.pool == "sum" and spec.operators.nodal in FAST_NODALS:
        return "fast"
    return "generic"


# ---------------------------------------------------------------------------
# Shape bookkeeping, parameter and MAC counting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSizes:
    pre: tuple   # (oh, ow) after the valid window, before sampling
    post: tuple  # (h', w') after sampling


def chain_sizes(specs: Sequence[LayerSpec], input_size, in_neurons: int = 1):
    """Walk map sizes through the chain, validating every layer.

    Raises ShapeError naming the offending layer when a kernel no longer
    fits or a down-sampling factor does not divide the map.
    """
    h, w = int(input_size[0]), int(input_size[1])
    if h < 1 or w < 1 or in_neurons < 1:
        raise tc.ShapeError(f"bad input geometry {(in_neurons, h, w)}")
    sizes = []
    for idx, spec in enumerate(specs):
        kx, ky = spec.kernel
        oh, ow = h - kx + 1, w - ky + 1
        if oh < 1 or ow < 1:
            raise tc.ShapeError(
                f"layer {idx}: kernel {spec.kernel} does not fit map {(h, w)}"
            )
        fx, fy = spec.sampling.factors
        if spec.sampling.mode == "down":
            if oh % fx or ow % fy:
                raise tc.ShapeError(
                    f"layer {idx}: down factors {spec.sampling.factors} do not "
                    f"divide map {(oh, ow)}"
                )
            h, w = oh // fx, ow // fy
        elif spec.sampling.mode == "up":
            h, w = oh * fx, ow * fy
        else:
            h, w = oh, ow
        sizes.append(LayerSizes(pre=(oh, ow), post=(h, w)))
    return sizes


def count_params(specs: Sequence[LayerSpec], in_neurons: int = 1) -> int:
    """Trainable scalars: each layer has n*(n_prev*kx*ky*Q + 1)."""
    total = 0
    prev = in_neurons
    for spec in specs:
        kx, ky = spec.kernel
        total += spec.neurons * (prev * kx * ky * spec.q_order + 1)
        prev = spec.neurons
    return total


def count_macs(specs: Sequence[LayerSpec], input_size, in_neurons: int = 1):
    """Multiply-accumulate count of one forward pass, per layer and total.

    Each pre-sampling output pixel of each neuron costs
    ``n_prev*kx*ky*Q`` kernel MACs plus one for the bias, so a layer costs
    ``|Y| * (n_prev*kx*ky*Q + 1)`` with ``|Y|`` counted before sampling.
    """
    sizes = chain_sizes(specs, input_size, in_neurons)
    per_layer = []
    prev = in_neurons
    for spec, size in zip(specs, sizes):
        kx, ky = spec.kernel
        y_count = spec.neurons * size.pre[0] * size.pre[1]
        per_layer.append(y_count * (prev * kx * ky * spec.q_order + 1))
        prev = spec.neurons
    return per_layer, sum(per_layer)


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

INIT_RULES = ("glorot_uniform", "glorot_uniform_qdamp")


def init_params(
    specs: Sequence[LayerSpec],
    in_neurons: int = 1,
    seed=0,
    init_rule: str = "glorot_uniform",
    dtype=np.float64,
):
    """Seeded uniform initialization, biases zero.

    Bound per layer is sqrt(6 / (fan_in + fan_out)) with fan counts taken
    over all kernel elements and powers. The qdamp variant shrinks the
    bound for power q to bound/q, which tames high-order terms at high Q.
    """
    if init_rule not in INIT_RULES:
        raise ValueError(f"unknown init rule {init_rule!r}")
    rng = np.random.default_rng(seed)
    params = []
    prev = in_neurons
    for spec in specs:
        kx, ky = spec.kernel
        q = spec.q_order
        fan_in = prev * kx * ky * q
        fan_out = spec.neurons * kx * ky * q
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(spec.neurons, prev, kx, ky, q))
        if init_rule == "glorot_uniform_qdamp":
            w /= np.arange(1, q + 1, dtype=np.float64)
        params.append(
            LayerParams(w.astype(dtype), np.zeros(spec.neurons, dtype=dtype))
        )
        prev = spec.neurons
    return params


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """A layer chain with its parameters.

    ``forward`` accepts a single 2D map or an ``(in_neurons, H, W)`` stack
    and returns a :class:`ForwardPass` carrying every per-layer cache.
    """

    def __init__(self, specs, params, in_neurons: int = 1, dtype=np.float64):
        self.specs = list(specs)
        self.params = list(params)
        self.in_neurons = int(in_neurons)
        self.dtype = np.dtype(dtype)
        if len(self.specs) != len(self.params):
            raise ValueError(
                f"{len(self.specs)} specs but {len(self.params)} parameter stacks"
            )
        prev = self.in_neurons
        for spec, p in zip(self.specs, self.params):
            p.check(spec, prev)
            prev = spec.neurons

    @classmethod
    def from_specs(
        cls, specs, in_neurons: int = 1, seed=0,
        init_rule: str = "glorot_uniform", dtype=np.float64,
    ) -> "Network":
        params = init_params(specs, in_neurons, seed, init_rule, dtype)
        return cls(specs, params, in_neurons, dtype)

    # -- forward ------------------------------------------------------------

    def _coerce_input(self, maps) -> np.ndarray:
        maps = np.asarray(maps, dtype=self.dtype)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.ndim != 3 or maps.shape[0] != self.in_neurons:
            raise tc.ShapeError(
                f"expected ({self.in_neurons}, H, W) input, got {maps.shape}"
            )
        return maps

    def forward(self, maps, path: str = "auto") -> ForwardPass:
        """Run all layers; ``path`` in {auto, fast, generic}."""
        if path not in ("auto", "fast", "generic"):
            raise ValueError(f"unknown forward path {path!r}")
        current = self._coerce_input(maps)
        fp = ForwardPass()
        for idx, (spec, p) in enumerate(zip(self.specs, self.params)):
            route = layer_route(spec) if path != "generic" else "generic"
            if path == "fast" and layer_route(spec) != "fast":
                raise ValueError(
                    f"layer {idx} ({spec.operators}) has no fast route"
                )
            lf = _forward_layer(current, spec, p, route)
            fp.layers.append(lf)
            current = lf.outputs
        return fp

    def __call__(self, maps, path: str = "auto") -> np.ndarray:
        return self.forward(maps, path).outputs

    def forward_from(self, maps, start: int, path: str = "auto") -> np.ndarray:
        """Run layers ``start..end`` on an intermediate map stack.

        Used by the finite-difference checks to perturb a hidden layer's
        outputs directly.
        """
        current = np.asarray(maps, dtype=self.dtype)
        for spec, p in zip(self.specs[start:], self.params[start:]):
            route = layer_route(spec) if path != "generic" else "generic"
            current = _forward_layer(current, spec, p, route).outputs
        return current

    def copy(self) -> "Network":
        return Network(
            self.specs, [p.copy() for p in self.params], self.in_neurons, self.dtype
        )


def _sample(maps: np.ndarray, sampling: Sampling) -> np.ndarray:
    if sampling.mode == "none":
        return maps
    fx, fy = sampling.factors
    if sampling.mode == "down":
        return np.stack([tc.downsample_avg(m, fx, fy) for m in maps])
    return np.stack([tc.upsample_zero_order(m, fx, fy) for m in maps])


def _forward_layer(inputs, spec: LayerSpec, p: LayerParams, route: str) -> LayerForward:
    n_in, h, w = inputs.shape
    kx, ky = spec.kernel
    if h < kx or w < ky:
        raise tc.ShapeError(f"kernel {spec.kernel} does not fit map {(h, w)}")
    if spec.operators.nodal == "maclaurin":
        ops.check_nodal_domain(inputs)
    if route == "fast":
        lf = _forward_layer_fast(inputs, spec, p)
    else:
        lf = _forward_layer_generic(inputs, spec, p)
    act = spec.operators.activation
    activated = ops.activation(act, lf.x)
    lf.fprime = ops.activation_dx(act, lf.x)
    lf.outputs = _sample(activated, spec.sampling)
    return lf


def _forward_layer_fast(inputs, spec: LayerSpec, p: LayerParams) -> LayerForward:
    # sum pool + polynomial terms collapse to one weight/window dot product
    n_in = inputs.shape[0]
    kx, ky = spec.kernel
    q = spec.q_order
    powers = tc.power_stack(inputs, q)                     # (n_in, Q, H, W)
    win = sliding_window_view(powers, (kx, ky), axis=(2, 3))
    oh, ow = win.shape[2], win.shape[3]
    amat = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n_in * q * kx * ky, oh * ow
    )
    wmat = p.weights.transpose(0, 1, 4, 2, 3).reshape(spec.neurons, -1)
    x = (wmat @ amat).reshape(spec.neurons, oh, ow) + p.biases[:, None, None]
    return LayerForward(
        inputs=inputs, x=x, fprime=None, outputs=None,
        input_powers=powers, window_matrix=amat,
    )


def _forward_layer_generic(inputs, spec: LayerSpec, p: LayerParams) -> LayerForward:
    n_in = inputs.shape[0]
    kx, ky = spec.kernel
    q = spec.q_order
    o = spec.operators
    powers = tc.power_stack(inputs, q) if o.nodal == "maclaurin" else None
    win = sliding_window_view(inputs, (kx, ky), axis=(1, 2))  # (n_in, oh, ow, kx, ky)
    oh, ow = win.shape[1], win.shape[2]
    x = np.broadcast_to(p.biases[:, None, None], (spec.neurons, oh, ow)).copy()
    dfield = None
    if o.pool == "median":
        dfield = np.empty((spec.neurons, n_in, oh, ow, kx, ky))
    for k in range(n_in):
        if o.nodal == "maclaurin":
            pow_win = sliding_window_view(powers[k], (kx, ky), axis=(1, 2))
            # terms[i, m, n, r, t] = sum_q w[i,k,r,t,q] * y_k(m+r, n+t)**(q+1)
            terms = np.einsum("irtq,qmnrt->imnrt", p.weights[:, k], pow_win)
        else:
            wk = p.weights[:, k, :, :, 0][:, None, None, :, :]  # (i,1,1,kx,ky)
            terms = ops.nodal_fixed(o.nodal, wk, win[k][None])
        x += ops.pool_windows(o.pool, terms)
        if dfield is not None:
            dfield[:, k] = ops.pool_dterm_windows(o.pool, terms)
    return LayerForward(
        inputs=inputs, x=x, fprime=None, outputs=None,
        input_powers=powers, pool_dfield=dfield,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "selfonn-checkpoint"
CHECKPOINT_VERSION = 1


def _spec_to_dict(spec: LayerSpec) -> dict:
    return {
        "neurons": spec.neurons,
        "kernel": list(spec.kernel),
        "q_order": spec.q_order,
        "operators": {
            "pool": spec.operators.pool,
            "activation": spec.operators.activation,
            "nodal": spec.operators.nodal,
        },
        "sampling": {
            "mode": spec.sampling.mode,
            "factors": list(spec.sampling.factors),
        },
    }


def spec_from_dict(d: dict) -> LayerSpec:
    o = d.get("operators", {})
    s = d.get("sampling", {})
    return LayerSpec(
        neurons=int(d["neurons"]),
        kernel=tuple(d["kernel"]),
        q_order=int(d.get("q_order", 1)),
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


def _emit_json(obj, out: list) -> None:
    # fixed-format writer so float text is stable across runs and platforms
    if isinstance(obj, dict):
        out.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _emit_json(val, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, val in enumerate(obj):
            if i:
                out.append(",")
            _emit_json(val, out)
        out.append("]")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        # 17 significant digits: round-trips any binary64 value exactly
        out.append(format(float(obj), ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif obj is None:
        out.append("null")
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def dumps_stable(obj) -> str:
    parts: list = []
    _emit_json(obj, parts)
    return "".join(parts)


def save_checkpoint(path, network: Network) -> None:
    """Write the network to JSON with exact float64 round-trip fidelity.

    Weights are flattened in (i, k, r, t, q) index order; reals carry 17
    significant digits so loading reproduces every bit.
    """
    layers = []
    for p in network.params:
        tc.ensure_finite(p.weights, "weights")
        tc.ensure_finite(p.biases, "biases")
        layers.append(
            {
                "weights": [float(v) for v in p.weights.ravel()],
                "biases": [float(v) for v in p.biases.ravel()],
            }
        )
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "in_neurons": network.in_neurons,
        "dtype": "f32" if network.dtype == np.float32 else "f64",
        "specs": [_spec_to_dict(s) for s in network.specs],
        "layers": layers,
    }
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_stable(doc))
        fh.write("\n")


def load_checkpoint(path) -> Network:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    dtype = np.float32 if doc.get("dtype") == "f32" else np.float64
    in_neurons = int(doc["in_neurons"])
    specs = [spec_from_dict(d) for d in doc["specs"]]
    if len(specs) != len(doc["layers"]):
        raise ValueError(f"{path}: {len(specs)} specs but {len(doc['layers'])} layers")
    params = []
    prev = in_neurons
    for spec, entry in zip(specs, doc["layers"]):
        kx, ky = spec.kernel
        shape = (spec.neurons, prev, kx, ky, spec.q_order)
        w = np.asarray(entry["weights"], dtype=dtype).reshape(shape)
        b = np.asarray(entry["biases"], dtype=dtype)
        params.append(LayerParams(w, b))
        prev = spec.neurons
    return Network(specs, params, in_neurons, dtype)
