"""Deterministic float64 tensor primitives shared by every other module.

All tensors are 2-D C-contiguous float64 numpy arrays.  Reference paths are
kept bit-reproducible across runs: matmul accumulates the inner dimension
strictly left to right instead of delegating to BLAS, and masks use a large
finite sentinel instead of -inf so that no operation ever produces NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Additive attention-mask values.  The blocked sentinel is finite (half the
# most negative float64) so that sums with ordinary scores stay finite, yet
# exp(sentinel - rowmax) underflows to exactly 0.0.
MASK_FREE = 0.0
MASK_BLOCKED = np.finfo(np.float64).min / 2.0


def as_tensor(x) -> np.ndarray:
    """Coerce input to a 2-D C-contiguous float64 array."""
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got ndim={a.ndim}")
    return a


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise if any entry is NaN or infinite."""
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite entries")
    return a


@dataclass
class NormParams:
    """Per-feature affine parameters for a normalization layer.

    alpha is the per-feature gain, beta the per-feature offset.  RMS-style
    normalization ignores beta.  eps must be strictly positive.
    """

    alpha: np.ndarray
    beta: np.ndarray
    eps: float = 1e-6

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if self.alpha.shape != self.beta.shape:
            raise ValueError(
                f"alpha and beta length mismatch: {self.alpha.shape[0]} vs {self.beta.shape[0]}"
            )
        if not self.eps > 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic matrix product.

    Accumulates over the inner dimension strictly left to right (one rank-1
    update per inner index), which is bit-identical to the naive triple loop
    with the inner-dimension loop innermost.  BLAS order is not reproducible
    across builds, so it is deliberately avoided here.

    Args:
        a: left operand, shape (m, k).
        b: right operand, shape (k, n).

    Returns:
        Product of shape (m, n).
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: ({a.shape[0]}, {a.shape[1]}) x ({b.shape[0]}, {b.shape[1]})"
        )
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return check_finite(out, "matmul result")


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax of scores + mask with max subtraction.

    Mask entries must be MASK_FREE or MASK_BLOCKED.  Blocked positions get
    exactly zero probability because exp underflows.  A row with every
    position blocked has no valid distribution and raises.

    Args:
        scores: attention scores, shape (m, n).
        mask: additive mask of the same shape.

    Returns:
        Row-stochastic matrix of shape (m, n).
    """
    scores = as_tensor(scores)
    mask = as_tensor(mask)
    if scores.shape != mask.shape:
        raise ValueError(f"scores shape {scores.shape} != mask shape {mask.shape}")
    if np.any((mask != MASK_FREE) & (mask != MASK_BLOCKED)):
        raise ValueError("mask entries must be MASK_FREE or MASK_BLOCKED")
    fully_blocked = np.all(mask == MASK_BLOCKED, axis=1)
    if fully_blocked.any():
        raise ValueError(
            f"row {int(np.argmax(fully_blocked))} has every position masked"
        )
    s = scores + mask
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    out = e / e.sum(axis=1, keepdims=True)
    return check_finite(out, "softmax result")


def layer_norm(x: np.ndarray, params: NormParams) -> np.ndarray:
    """Per-row LayerNorm: recenter, scale by 1/sqrt(var + eps), affine.

    The variance is computed as |x|^2/d - mu^2, clamped at zero to guard the
    constant-row case where cancellation can leave a tiny negative value.
    """
    x = as_tensor(x)
    d = x.shape[1]
    if params.alpha.shape[0] != d:
        raise ValueError(f"norm params have {params.alpha.shape[0]} features, input has {d}")
    mu = x.mean(axis=1, keepdims=True)
    var = np.maximum((x * x).sum(axis=1, keepdims=True) / d - mu * mu, 0.0)
    out = (x - mu) / np.sqrt(var + params.eps) * params.alpha + params.beta
    return check_finite(out, "layer_norm result")


def rms_norm(x: np.ndarray, params: NormParams) -> np.ndarray:
    """Per-row RMS normalization: scale by 1/sqrt(mean(x^2) + eps), gain only.

    beta is carried in params for structural symmetry with layer_norm but is
    ignored, matching gain-only RMS layers.
    """
    x = as_tensor(x)
    d = x.shape[1]
    if params.alpha.shape[0] != d:
        raise ValueError(f"norm params have {params.alpha.shape[0]} features, input has {d}")
    ms = (x * x).sum(axis=1, keepdims=True) / d
    out = x / np.sqrt(ms + params.eps) * params.alpha
    return check_finite(out, "rms_norm result")


def frobenius_norm(a: np.ndarray) -> float:
    """Frobenius norm of a 2-D tensor."""
    a = as_tensor(a)
    return float(np.sqrt((a * a).sum()))
