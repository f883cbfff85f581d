"""Hand-derived back-propagation through operational layers.

Everything here is written against the forward definition in
:mod:`selfonn.network` and validated by finite differences; no autodiff.

Chain, per layer (output to input):

1. the output stage turns the mean-squared error into
   ``dE/dy = (2/size) * (y - target)``;
2. ``intra_delta`` pulls that through sampling and the activation to the
   pre-activation sensitivity ``delta = dE/dx``;
3. weight/bias sensitivities contract ``delta`` against the layer's cached
   input power maps (or the generic pool/nodal derivative fields);
4. ``backprop_inter_*`` pushes ``delta`` across the connection to the
   previous layer's outputs, a boundary-padded convolution with either the
   flipped kernel stack (fast route) or a position-dependent kernel built
   from pool and nodal derivatives (generic route).

Fast and generic routes agree to floating-point noise for the layer types
both can handle; the test suite holds them together.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import operators as ops
from . import tensor_core as tc
from .network import ForwardPass, LayerForward, LayerParams, LayerSpec, Network, Sampling, layer_route


class StaleCacheError(ValueError):
    """Forward-pass caches do not match the network being differentiated."""


def loss_mse(outputs, target) -> float:
    """Mean of squared differences over every output entry."""
    outputs = np.asarray(outputs)
    target = np.asarray(target)
    if outputs.shape != target.shape:
        raise tc.ShapeError(f"output {outputs.shape} vs target {target.shape}")
    err = outputs - target
    return float(np.mean(err * err))


def output_delta(outputs, target, x, activation_id: str):
    """dE/dx at the output layer (no sampling):
    ``(2/size) * (y - target) * f'(x)``."""
    outputs = np.asarray(outputs)
    target = np.asarray(target)
    if outputs.shape != target.shape:
        raise tc.ShapeError(f"output {outputs.shape} vs target {target.shape}")
    d_y = (2.0 / outputs.size) * (outputs - target)
    return d_y * ops.activation_dx(activation_id, x)


def intra_delta(d_y, x, activation_id: str, sampling: Sampling, fprime=None):
    """Map dE/d(layer output) back to dE/d(pre-activation).

    Down-sampling averaged fx*fy activations into each output pixel, so the
    incoming sensitivity is replicated and scaled by 1/(fx*fy); up-sampling
    replicated each activation into an fx*fy block, so block sums (mean
    times block size) come back. Then multiply by f'(x).
    """
    d_y = np.asarray(d_y)
    fp = ops.activation_dx(activation_id, x) if fprime is None else fprime
    mode, (fx, fy) = sampling.mode, sampling.factors
    if mode == "none":
        pre = d_y
    elif mode == "down":
        pre = np.stack([tc.upsample_zero_order(m, fx, fy) for m in d_y]) / (fx * fy)
    else:
        pre = np.stack([tc.downsample_avg(m, fx, fy) for m in d_y]) * (fx * fy)
    if pre.shape != fp.shape:
        raise tc.ShapeError(f"delta {pre.shape} vs pre-activation {fp.shape}")
    return pre * fp


# ---------------------------------------------------------------------------
# Inter-layer sensitivity (delta of the previous layer's outputs)
# ---------------------------------------------------------------------------


def backprop_inter_selfonn(delta, lf: LayerForward, spec: LayerSpec, p: LayerParams):
    """Previous-layer output sensitivity for sum-pooled polynomial layers.

    dE/dy_k(m,n) = sum_q q * y_k(m,n)**(q-1)
                   * sum_i sum_{r,t} delta_i(m-r, n-t) * w_ik(r,t,q)

    The inner double sum is a boundary-padded convolution with the flipped
    kernels, batched into one matrix multiply over (i, r, t); the power
    factor reuses the forward pass's cached power maps.
    """
    n_out, oh, ow = delta.shape
    kx, ky = spec.kernel
    q_order = spec.q_order
    n_in = lf.inputs.shape[0]
    padded = np.pad(delta, ((0, 0), (kx - 1, kx - 1), (ky - 1, ky - 1)))
    win = sliding_window_view(padded, (kx, ky), axis=(1, 2))
    m_size, n_size = win.shape[1], win.shape[2]
    bmat = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
        n_out * kx * ky, m_size * n_size
    )
    flipped = p.weights[:, :, ::-1, ::-1, :]
    wmat = np.ascontiguousarray(flipped.transpose(1, 4, 0, 2, 3)).reshape(
        n_in * q_order, n_out * kx * ky
    )
    conv = (wmat @ bmat).reshape(n_in, q_order, m_size, n_size)
    if spec.operators.nodal == "mul":
        return conv[:, 0]
    powers = lf.input_powers
    if powers is None:
        powers = tc.power_stack(lf.inputs, q_order)
    dpow = np.empty_like(powers)
    dpow[:, 0] = 1.0
    dpow[:, 1:] = powers[:, :-1]
    qs = np.arange(1, q_order + 1, dtype=conv.dtype)[None, :, None, None]
    return (conv * dpow * qs).sum(axis=1)


def _valid_position_mask(m_size, n_size, oh, ow, kx, ky):
    # mask[m, n, r, t] = 1 where (m - r, n - t) is a real output position
    mask = np.zeros((m_size, n_size, kx, ky))
    for r in range(kx):
        for t in range(ky):
            mask[r : r + oh, t : t + ow, r, t] = 1.0
    return mask


def backprop_inter_generic(delta, lf: LayerForward, spec: LayerSpec, p: LayerParams):
    """Previous-layer output sensitivity via position-dependent kernels.

    For every connection (i, k) builds the 4D field
    ``dP/dterm * dpsi/dy`` indexed at the previous layer's coordinates and
    applies :func:`tensor_core.conv2dvar_full`. Works for any pool/nodal
    pair; quadratic in neuron count, meant for reference and small nets.
    """
    n_out, oh, ow = delta.shape
    kx, ky = spec.kernel
    q_order = spec.q_order
    o = spec.operators
    n_in, m_size, n_size = lf.inputs.shape
    mask = _valid_position_mask(m_size, n_size, oh, ow, kx, ky)
    out = np.zeros((n_in, m_size, n_size))
    qs = np.arange(1, q_order + 1, dtype=np.float64)
    for k in range(n_in):
        y = lf.inputs[k]
        if o.nodal == "maclaurin":
            powers = lf.input_powers[k] if lf.input_powers is not None else tc.power_maps(y, q_order)
            dpow = np.empty_like(powers)
            dpow[0] = 1.0
            dpow[1:] = powers[:-1]
        acc = np.zeros((m_size, n_size))
        for i in range(n_out):
            if o.nodal == "maclaurin":
                dpsi = np.einsum("rtq,qmn->mnrt", p.weights[i, k] * qs, dpow)
            else:
                dpsi = ops.nodal_fixed_dy(
                    o.nodal,
                    p.weights[i, k, :, :, 0][None, None, :, :],
                    y[:, :, None, None],
                )
            if lf.pool_dfield is not None:
                dpool = np.zeros((m_size, n_size, kx, ky))
                for r in range(kx):
                    for t in range(ky):
                        dpool[r : r + oh, t : t + ow, r, t] = lf.pool_dfield[i, k, :, :, r, t]
            else:
                dpool = mask
            acc += tc.conv2dvar_full(delta[i], dpool * dpsi)
        out[k] = acc
    return out


# ---------------------------------------------------------------------------
# Weight and bias sensitivities
# ---------------------------------------------------------------------------


def _window_matrix(lf: LayerForward, spec: LayerSpec):
    if lf.window_matrix is not None:
        return lf.window_matrix
    kx, ky = spec.kernel
    powers = lf.input_powers
    if powers is None:
        powers = tc.power_stack(lf.inputs, spec.q_order)
    win = sliding_window_view(powers, (kx, ky), axis=(2, 3))
    n_in, q_order = powers.shape[0], powers.shape[1]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n_in * q_order * kx * ky, -1
    )


def weight_bias_grads_fast(delta, lf: LayerForward, spec: LayerSpec, p: LayerParams):
    """Sum-pool polynomial sensitivities.

    dE/dw_ik(r,t,q) = sum_{m,n} delta_i(m,n) * y_k(m+r, n+t)**q -- a valid
    cross-correlation of the cached q-th power map with delta, realized as
    one matrix product against the forward window matrix.
    """
    n_out, oh, ow = delta.shape
    kx, ky = spec.kernel
    n_in = lf.inputs.shape[0]
    amat = _window_matrix(lf, spec)
    g = delta.reshape(n_out, -1) @ amat.T
    gw = g.reshape(n_out, n_in, spec.q_order, kx, ky).transpose(0, 1, 3, 4, 2)
    gb = delta.sum(axis=(1, 2))
    return np.ascontiguousarray(gw), gb


def weight_bias_grads_generic(delta, lf: LayerForward, spec: LayerSpec, p: LayerParams):
    """Triple-sum sensitivities through pool and nodal derivative fields:

    dE/dw_ik(r,t,[q]) = sum_{m,n} delta_i(m,n)
                        * dP/dterm(i,k,m,n,r,t) * dpsi/dw(k, m+r, n+t).
    """
    n_out, oh, ow = delta.shape
    kx, ky = spec.kernel
    o = spec.operators
    n_in = lf.inputs.shape[0]
    gw = np.zeros_like(p.weights, dtype=np.float64)
    win = sliding_window_view(lf.inputs, (kx, ky), axis=(1, 2))
    for k in range(n_in):
        if o.nodal == "maclaurin":
            powers = lf.input_powers[k] if lf.input_powers is not None else tc.power_maps(lf.inputs[k], spec.q_order)
            pow_win = sliding_window_view(powers, (kx, ky), axis=(1, 2))
            if lf.pool_dfield is None:
                gw[:, k] = np.einsum("imn,qmnrt->irtq", delta, pow_win)
            else:
                gw[:, k] = np.einsum(
                    "imn,imnrt,qmnrt->irtq", delta, lf.pool_dfield[:, k], pow_win
                )
        else:
            wk = p.weights[:, k, :, :, 0][:, None, None, :, :]
            dw = ops.nodal_fixed_dw(o.nodal, wk, win[k][None])
            if lf.pool_dfield is None:
                gw[:, k, :, :, 0] = np.einsum("imn,imnrt->irt", delta, dw)
            else:
                gw[:, k, :, :, 0] = np.einsum(
                    "imn,imnrt,imnrt->irt", delta, lf.pool_dfield[:, k], dw
                )
    gb = delta.sum(axis=(1, 2))
    return gw, gb


# ---------------------------------------------------------------------------
# Full-network backward pass
# ---------------------------------------------------------------------------


def backward_pass(network: Network, fpass: ForwardPass, target, path: str = "auto"):
    """Loss and per-layer gradients for one sample.

    ``target`` may be a single map or an ``(n_out, th, tw)`` stack; it is
    center-cropped to the network's output size. Returns
    ``(loss, [LayerParams gradients per layer])``.
    """
    loss, grads, _ = backward_pass_deltas(network, fpass, target, path)
    return loss, grads


def backward_pass_deltas(network: Network, fpass: ForwardPass, target, path: str = "auto"):
    """Like :func:`backward_pass` but also returns the inter-layer output
    sensitivities: ``dys[l] = dE/d(outputs of layer l)`` for ``l < L-1``.

    The finite-difference harness perturbs hidden outputs directly and
    needs these maps; they fall out of the backward sweep for free.
    """
    if path not in ("auto", "generic"):
        raise ValueError(f"unknown backward path {path!r}")
    if len(fpass.layers) != len(network.specs):
        raise StaleCacheError(
            f"pass has {len(fpass.layers)} layers, network {len(network.specs)}"
        )
    outputs = fpass.outputs
    target = np.asarray(target, dtype=outputs.dtype)
    if target.ndim == 2:
        target = target[None]
    if target.shape[0] != outputs.shape[0]:
        raise tc.ShapeError(
            f"target stack {target.shape} vs output stack {outputs.shape}"
        )
    target = tc.crop_center(target, outputs.shape[1:])
    err = outputs - target
    loss = float(np.mean(err * err))
    d_y = (2.0 / outputs.size) * err

    grads: list = [None] * len(network.specs)
    dys: list = [None] * max(len(network.specs) - 1, 0)
    for idx in reversed(range(len(network.specs))):
        spec = network.specs[idx]
        p = network.params[idx]
        lf = fpass.layers[idx]
        if lf.x.shape[0] != spec.neurons:
            raise StaleCacheError(f"layer {idx} cache does not match its spec")
        route = "generic" if path == "generic" else layer_route(spec)
        delta = intra_delta(
            d_y, lf.x, spec.operators.activation, spec.sampling, fprime=lf.fprime
        )
        if route == "fast":
            gw, gb = weight_bias_grads_fast(delta, lf, spec, p)
        else:
            gw, gb = weight_bias_grads_generic(delta, lf, spec, p)
        grads[idx] = LayerParams(gw, gb)
        if idx:
            if route == "fast":
                d_y = backprop_inter_selfonn(delta, lf, spec, p)
            else:
                d_y = backprop_inter_generic(delta, lf, spec, p)
            dys[idx - 1] = d_y
    return loss, grads, dys


def batch_gradients(network: Network, samples, path: str = "auto"):
    """Sum of per-sample gradients and the mean loss over ``samples``.

    Samples are consumed in the order given; each contributes a full
    forward/backward pass. Returns ``(mean_loss, grads, outputs)`` where
    ``outputs`` keeps each sample's network output for metric reporting.
    """
    total: list = None
    losses = []
    outputs = []
    for sample in samples:
        fp = network.forward(sample.input, path="generic" if path == "generic" else "auto")
        loss, grads = backward_pass(network, fp, sample.target, path)
        losses.append(loss)
        outputs.append(fp.outputs)
        if total is None:
            total = grads
        else:
            for acc, g in zip(total, grads):
                acc.weights += g.weights
                acc.biases += g.biases
    if total is None:
        raise ValueError("empty batch")
    return float(np.mean(losses)), total, outputs
