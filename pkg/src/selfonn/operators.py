"""Nodal, pool, and activation operators and their derivatives.

Operator identifiers are lowercase strings (the same spelling used in
configs and checkpoints). Every derivative here is checked against central
finite differences in the test suite; back-propagation consumes these
functions directly, so their smoothness conventions (clamp derivative zero
at the boundary, lower-median subgradient on the first matching term) are
part of the contract.
"""

from __future__ import annotations

import numpy as np

NODAL_IDS = frozenset({"mul", "sin", "exp", "chirp", "maclaurin"})
POOL_IDS = frozenset({"sum", "median"})
ACTIVATION_IDS = frozenset({"tanh", "lincut"})

#: Tolerance on the bounded-activation domain check for polynomial inputs.
DOMAIN_EPS = 1e-9


class DomainError(ValueError):
    """Polynomial nodal input outside [-1, 1]: upstream activation missing."""


def check_nodal_domain(y) -> None:
    """Reject inputs outside ``[-1 - eps, 1 + eps]``.

    Polynomial kernel transforms are only well-behaved on the bounded range
    produced by tanh/lincut activations; values beyond it mean a layer was
    wired without a squashing activation in front.
    """
    y = np.asarray(y)
    bad = np.max(np.abs(y), initial=0.0)
    if not np.isfinite(bad) or bad > 1.0 + DOMAIN_EPS:
        raise DomainError(
            f"nodal input magnitude {bad!r} exceeds 1 + {DOMAIN_EPS}; "
            "expected activation-bounded values"
        )


# ---------------------------------------------------------------------------
# Maclaurin (generative) nodal operator
# ---------------------------------------------------------------------------


def maclaurin_eval(y, weights):
    """Truncated power series ``sum_{q=1..Q} w_q * y**q``.

    ``weights[q-1]`` multiplies ``y**q``; there is no constant term (the
    layer bias absorbs it). Evaluated in ascending powers by repeated
    multiplication, mirroring how cached power maps are consumed.
    ``y`` may be a scalar or an array; ``weights`` is a length-Q vector.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size < 1:
        raise ValueError("weights must be a non-empty 1D vector")
    check_nodal_domain(y)
    y = np.asarray(y)
    power = y
    acc = weights[0] * y
    for q in range(1, weights.size):
        power = power * y
        acc = acc + weights[q] * power
    return acc


def maclaurin_dy(y, weights):
    """Derivative of :func:`maclaurin_eval` in ``y``:
    ``sum_{q=1..Q} q * w_q * y**(q-1)``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size < 1:
        raise ValueError("weights must be a non-empty 1D vector")
    check_nodal_domain(y)
    y = np.asarray(y)
    power = np.ones_like(y, dtype=np.result_type(y, np.float64))
    acc = weights[0] * power
    for q in range(1, weights.size):
        power = power * y
        acc = acc + (q + 1) * weights[q] * power
    return acc


def maclaurin_dw(y, q: int):
    """Derivative of :func:`maclaurin_eval` in ``w_q``: just ``y**q``."""
    if q < 1:
        raise ValueError(f"power index must be >= 1, got {q}")
    check_nodal_domain(y)
    return np.asarray(y) ** q


# ---------------------------------------------------------------------------
# Fixed nodal operators (single weight per kernel element)
# ---------------------------------------------------------------------------


def nodal_fixed(nodal_id: str, w, y):
    """Fixed single-weight nodal term: value of psi(w, y).

    mul:   w * y
    sin:   sin(w * y)
    exp:   exp(w * y) - 1     (zero at w = 0, like the others)
    chirp: sin(w * y**2)
    """
    w = np.asarray(w)
    y = np.asarray(y)
    if nodal_id == "mul":
        return w * y
    if nodal_id == "sin":
        return np.sin(w * y)
    if nodal_id == "exp":
        return np.exp(w * y) - 1.0
    if nodal_id == "chirp":
        return np.sin(w * y * y)
    if nodal_id == "maclaurin":
        raise ValueError("maclaurin takes a weight vector; use maclaurin_eval")
    raise ValueError(f"unknown nodal operator {nodal_id!r}")


def nodal_fixed_dy(nodal_id: str, w, y):
    """d psi / d y for the fixed nodal operators."""
    w = np.asarray(w)
    y = np.asarray(y)
    if nodal_id == "mul":
        return w * np.ones_like(y, dtype=np.result_type(w, y))
    if nodal_id == "sin":
        return w * np.cos(w * y)
    if nodal_id == "exp":
        return w * np.exp(w * y)
    if nodal_id == "chirp":
        return 2.0 * w * y * np.cos(w * y * y)
    raise ValueError(f"unknown nodal operator {nodal_id!r}")


def nodal_fixed_dw(nodal_id: str, w, y):
    """d psi / d w for the fixed nodal operators."""
    w = np.asarray(w)
    y = np.asarray(y)
    if nodal_id == "mul":
        return y * np.ones_like(w, dtype=np.result_type(w, y))
    if nodal_id == "sin":
        return y * np.cos(w * y)
    if nodal_id == "exp":
        return y * np.exp(w * y)
    if nodal_id == "chirp":
        return y * y * np.cos(w * y * y)
    raise ValueError(f"unknown nodal operator {nodal_id!r}")


# ---------------------------------------------------------------------------
# Pool operators
# ---------------------------------------------------------------------------


def pool_apply(pool_id: str, terms) -> float:
    """Reduce one window's nodal terms to a scalar."""
    terms = np.asarray(terms, dtype=np.float64).ravel()
    if terms.size == 0:
        raise ValueError("cannot pool an empty term list")
    if pool_id == "sum":
        return float(np.sum(terms))
    if pool_id == "median":
        # lower median: element at sorted index (n - 1) // 2
        return float(np.sort(terms)[(terms.size - 1) // 2])
    raise ValueError(f"unknown pool operator {pool_id!r}")


def pool_dterm(pool_id: str, terms, index: int) -> float:
    """Subgradient of the pooled value in the term at ``index``.

    sum: always 1. median: 1 on the first term (scan order) equal to the
    lower median, 0 elsewhere — a fixed tie-break so the derivative field
    sums to exactly one per window.
    """
    terms = np.asarray(terms, dtype=np.float64).ravel()
    if not 0 <= index < terms.size:
        raise IndexError(f"term index {index} out of range for {terms.size} terms")
    if pool_id == "sum":
        return 1.0
    if pool_id == "median":
        med = np.sort(terms)[(terms.size - 1) // 2]
        first = int(np.flatnonzero(terms == med)[0])
        return 1.0 if index == first else 0.0
    raise ValueError(f"unknown pool operator {pool_id!r}")


def pool_windows(pool_id: str, terms: np.ndarray) -> np.ndarray:
    """Apply :func:`pool_apply` across the trailing (kx, ky) axes.

    ``terms`` has shape ``(..., kx, ky)``; the result drops those axes.
    """
    terms = np.asarray(terms)
    if terms.ndim < 2:
        raise ValueError("windowed terms need at least the two kernel axes")
    if pool_id == "sum":
        return terms.sum(axis=(-2, -1))
    if pool_id == "median":
        flat = terms.reshape(terms.shape[:-2] + (-1,))
        k = (flat.shape[-1] - 1) // 2
        return np.partition(flat, k, axis=-1)[..., k]
    raise ValueError(f"unknown pool operator {pool_id!r}")


def pool_dterm_windows(pool_id: str, terms: np.ndarray) -> np.ndarray:
    """Per-term pool subgradients across the trailing (kx, ky) axes.

    Same shape as ``terms``; agrees elementwise with :func:`pool_dterm`
    (first-match tie-break included).
    """
    terms = np.asarray(terms)
    if pool_id == "sum":
        return np.ones_like(terms, dtype=np.float64)
    if pool_id == "median":
        flat = terms.reshape(terms.shape[:-2] + (-1,))
        k = (flat.shape[-1] - 1) // 2
        med = np.partition(flat, k, axis=-1)[..., k : k + 1]
        eq = flat == med
        first = eq & (np.cumsum(eq, axis=-1) == 1)
        return first.astype(np.float64).reshape(terms.shape)
    raise ValueError(f"unknown pool operator {pool_id!r}")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def activation(act_id: str, x):
    """Output nonlinearity: tanh, or the hard clamp to [-1, 1] (lincut)."""
    x = np.asarray(x)
    if act_id == "tanh":
        return np.tanh(x)
    if act_id == "lincut":
        return np.clip(x, -1.0, 1.0)
    raise ValueError(f"unknown activation {act_id!r}")


def activation_dx(act_id: str, x):
    """Derivative of :func:`activation`; lincut uses 0 at |x| >= 1."""
    x = np.asarray(x)
    if act_id == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if act_id == "lincut":
        return np.where(np.abs(x) < 1.0, 1.0, 0.0)
    raise ValueError(f"unknown activation {act_id!r}")
