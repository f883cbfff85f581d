"""Finite-difference verification of the analytic gradients.

Central differences with a magnitude-scaled step,
``h = h_scale * max(1, |w|)``; a parameter passes when
``|analytic - numeric| <= max(rel_tol * max(|a|, |n|), abs_tol)``.

The comparison only makes sense away from the engine's declared
subgradient points (lincut corners, median ties), so a margin probe
reports how close a forward pass sits to any of them; harnesses resample
the configuration when the margin is below ``NONSMOOTH_MARGIN``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import operators as ops
from . import tensor_core as tc
from .backprop import backward_pass_deltas
from .network import Network

REL_TOL = 1e-5
ABS_TOL = 1e-8
H_SCALE = 1e-5
#: Smallest distance to a lincut corner or median tie the FD suite accepts.
NONSMOOTH_MARGIN = 1e-4

REPORT_COLUMNS = ("layer", "i", "k", "r", "t", "q", "analytic", "numeric", "rel_err")


@dataclass
class GradCheckResult:
    """Report rows plus pass/fail rollups from one FD run."""

    rows: list = field(default_factory=list)
    layer_max_rel: list = field(default_factory=list)
    delta_max_rel: list = field(default_factory=list)
    n_failed: int = 0

    @property
    def passed(self) -> bool:
        return self.n_failed == 0

    @property
    def max_rel(self) -> float:
        vals = self.layer_max_rel + self.delta_max_rel
        return max(vals) if vals else 0.0


def effective_rel_err(analytic: float, numeric: float,
                      rel_tol: float = REL_TOL, abs_tol: float = ABS_TOL) -> float:
    """Relative error, reported as 0 when the absolute fallback absorbs it."""
    err = abs(analytic - numeric)
    if err <= abs_tol:
        return 0.0
    denom = max(abs(analytic), abs(numeric))
    return err / denom if denom > 0 else np.inf


def _cropped_targets(network: Network, samples):
    out_shape = network(samples[0].input).shape
    targets = []
    for s in samples:
        t = np.asarray(s.target, dtype=np.float64)
        if t.ndim == 2:
            t = t[None]
        targets.append(tc.crop_center(t, out_shape[1:]))
    return targets


def _total_loss(network: Network, inputs, targets) -> float:
    total = 0.0
    for x, t in zip(inputs, targets):
        out = network(x)
        err = out - t
        total += float(np.mean(err * err))
    return total


def check_network(
    network: Network,
    samples,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
    h_scale: float = H_SCALE,
    check_deltas: bool = True,
    inject_error: bool = False,
) -> GradCheckResult:
    """Compare every parameter gradient (and optionally every hidden-output
    sensitivity) against central finite differences of the summed batch loss.

    ``inject_error`` corrupts the first analytic weight gradient before the
    comparison -- the negative control proving the harness can fail.
    """
    if network.dtype != np.float64:
        raise ValueError("finite-difference checks require the 64-bit path")
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    inputs = [s.input for s in samples]
    targets = _cropped_targets(network, samples)

    acc_grads = None
    acc_dys = None
    for x, t in zip(inputs, targets):
        fp = network.forward(x)
        _, grads, dys = backward_pass_deltas(network, fp, t)
        if acc_grads is None:
            acc_grads = grads
            acc_dys = dys
        else:
            for a, g in zip(acc_grads, grads):
                a.weights += g.weights
                a.biases += g.biases
            acc_dys = [a + d for a, d in zip(acc_dys, dys)]
    if inject_error:
        acc_grads[0].weights.flat[0] += 1e-2

    result = GradCheckResult()
    for li, p in enumerate(network.params):
        layer_max = 0.0
        for idx in np.ndindex(p.weights.shape):
            w0 = p.weights[idx]
            h = h_scale * max(1.0, abs(w0))
            p.weights[idx] = w0 + h
            ep = _total_loss(network, inputs, targets)
            p.weights[idx] = w0 - h
            em = _total_loss(network, inputs, targets)
            p.weights[idx] = w0
            numeric = (ep - em) / (2.0 * h)
            analytic = float(acc_grads[li].weights[idx])
            rel = effective_rel_err(analytic, numeric, rel_tol, abs_tol)
            if rel > rel_tol:
                result.n_failed += 1
            layer_max = max(layer_max, rel)
            result.rows.append((li,) + tuple(int(v) for v in idx) + (analytic, numeric, rel))
        for i in range(p.biases.size):
            b0 = p.biases[i]
            h = h_scale * max(1.0, abs(b0))
            p.biases[i] = b0 + h
            ep = _total_loss(network, inputs, targets)
            p.biases[i] = b0 - h
            em = _total_loss(network, inputs, targets)
            p.biases[i] = b0
            numeric = (ep - em) / (2.0 * h)
            analytic = float(acc_grads[li].biases[i])
            rel = effective_rel_err(analytic, numeric, rel_tol, abs_tol)
            if rel > rel_tol:
                result.n_failed += 1
            layer_max = max(layer_max, rel)
            # bias rows use -1 sentinels for the kernel indices
            result.rows.append((li, i, -1, -1, -1, -1, analytic, numeric, rel))
        result.layer_max_rel.append(layer_max)

    if check_deltas and len(network.specs) > 1:
        fps = [network.forward(x) for x in inputs]
        per_sample_dys = [
            backward_pass_deltas(network, fp, t)[2] for fp, t in zip(fps, targets)
        ]
        for li in range(len(network.specs) - 1):
            boundary_max = 0.0
            for si, t in enumerate(targets):
                maps = fps[si].layers[li].outputs.copy()
                analytic_map = per_sample_dys[si][li]
                for idx in np.ndindex(maps.shape):
                    y0 = maps[idx]
                    h = h_scale * max(1.0, abs(y0))
                    maps[idx] = y0 + h
                    outp = network.forward_from(maps, li + 1)
                    maps[idx] = y0 - h
                    outm = network.forward_from(maps, li + 1)
                    maps[idx] = y0
                    ep = float(np.mean((outp - t) ** 2))
                    em = float(np.mean((outm - t) ** 2))
                    numeric = (ep - em) / (2.0 * h)
                    analytic = float(analytic_map[idx])
                    rel = effective_rel_err(analytic, numeric, rel_tol, abs_tol)
                    if rel > rel_tol:
                        result.n_failed += 1
                    boundary_max = max(boundary_max, rel)
            result.delta_max_rel.append(boundary_max)
    return result


def write_report_csv(path, rows) -> None:
    """Gradient report: layer,i,k,r,t,q,analytic,numeric,rel_err.

    Gradients span many decades, so the float columns use fixed 6-decimal
    scientific notation rather than plain fixed-point.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(
                [str(v) for v in row[:6]] + [f"{v:.6e}" for v in row[6:]]
            )


# ---------------------------------------------------------------------------
# Non-smoothness margin probe
# ---------------------------------------------------------------------------


def nonsmooth_margin(network: Network, samples) -> float:
    """Distance of the nearest forward value to a subgradient point.

    Considers lincut pre-activations (distance of |x| to 1), median pools
    (gap between the picked median term and the closest other term in each
    window), and hidden outputs feeding a polynomial layer (distance of |y|
    to the domain edge 1, which output perturbations must not cross).
    Returns +inf for networks with none of these.
    """
    margin = np.inf
    for s in samples:
        fp = network.forward(s.input, path="generic")
        for li, (spec, p, lf) in enumerate(zip(network.specs, network.params, fp.layers)):
            if spec.operators.activation == "lincut":
                margin = min(margin, float(np.min(np.abs(1.0 - np.abs(lf.x)))))
            if spec.operators.pool == "median":
                margin = min(margin, _median_gap(lf.inputs, spec, p))
            if spec.operators.nodal == "maclaurin" and li > 0:
                hidden = fp.layers[li - 1].outputs
                margin = min(margin, float(np.min(1.0 - np.abs(hidden))))
    return margin


def _median_gap(inputs, spec, p) -> float:
    kx, ky = spec.kernel
    win = sliding_window_view(inputs, (kx, ky), axis=(1, 2))
    gap = np.inf
    for k in range(inputs.shape[0]):
        if spec.operators.nodal == "maclaurin":
            pw = sliding_window_view(
                tc.power_maps(inputs[k], spec.q_order), (kx, ky), axis=(1, 2)
            )
            terms = np.einsum("irtq,qmnrt->imnrt", p.weights[:, k], pw)
        else:
            wk = p.weights[:, k, :, :, 0][:, None, None, :, :]
            terms = ops.nodal_fixed(spec.operators.nodal, wk, win[k][None])
        flat = np.sort(terms.reshape(terms.shape[:-2] + (-1,)), axis=-1)
        j = (flat.shape[-1] - 1) // 2
        if j > 0:
            gap = min(gap, float(np.min(flat[..., j] - flat[..., j - 1])))
        if j + 1 < flat.shape[-1]:
            gap = min(gap, float(np.min(flat[..., j + 1] - flat[..., j])))
    return gap
