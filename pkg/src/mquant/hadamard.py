"""Walsh-Hadamard transforms and weight incoherence diagnostics.

The normalized Hadamard matrix here is the Sylvester construction scaled by
1/sqrt(n), so it is symmetric, orthogonal, and involutory.  Its first row is
uniform, which is what makes the first-row projection identity and the
outlier trigger below work.
"""

from __future__ import annotations

import numpy as np

from .numerics import as_tensor, check_finite, frobenius_norm, matmul


def _check_pow2(n: int) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"size must be a positive power of two, got {n}")


def walsh_hadamard(n: int) -> np.ndarray:
    """Dense normalized Hadamard matrix of size n (power of two)."""
    _check_pow2(n)
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def fht(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Fast Hadamard transform along one axis, O(n log n).

    Equivalent to multiplying by walsh_hadamard(n) on that axis: axis=0
    computes H @ x, axis=1 computes x @ H (H is symmetric).  The axis length
    must be a power of two.
    """
    x = np.asarray(x, dtype=np.float64)
    vec = x.ndim == 1
    if vec:
        x = x[None, :] if axis in (1, -1) else x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D input, got ndim={x.ndim}")
    if axis not in (0, 1, -1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    work = x.copy() if axis == 0 else x.T.copy()
    n = work.shape[0]
    _check_pow2(n)
    h = 1
    while h < n:
        for start in range(0, n, 2 * h):
            a = work[start : start + h].copy()
            b = work[start + h : start + 2 * h]
            work[start : start + h] = a + b
            work[start + h : start + 2 * h] = a - b
        h *= 2
    work /= np.sqrt(n)
    out = work if axis == 0 else work.T
    if vec:
        out = out.reshape(-1)
    return check_finite(out, "fht result")


def incoherence(w: np.ndarray) -> float:
    """mu(W) = max|W| * sqrt(m*n) / ||W||_F, the outlier concentration measure.

    Equals 1 for an all-equal matrix and sqrt(m*n) for a single spike.
    """
    w = as_tensor(w)
    fro = frobenius_norm(w)
    if fro == 0.0:
        raise ValueError("incoherence is undefined for an all-zero matrix")
    m, n = w.shape
    return float(np.abs(w).max() * np.sqrt(m * n) / fro)


def incoherence_ratio(w: np.ndarray) -> float:
    """mu(HW) / mu(W): below 1 means rotation flattened outliers.

    Because H preserves the Frobenius norm, this also equals
    max|HW| / max|W|.
    """
    w = as_tensor(w)
    _check_pow2(w.shape[0])
    return incoherence(fht(w, axis=0)) / incoherence(w)


def first_row_projection_check(w: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Row 0 of H @ w, verified against sqrt(n) * column means.

    The uniform first row of H turns the first output row into scaled column
    means, which is the identity the outlier split relies on.

    Args:
        w: weight matrix of shape (n, m) with n a power of two.
        tol: max absolute deviation tolerated between the two computations.

    Returns:
        The first row of H @ w, shape (m,).
    """
    w = as_tensor(w)
    n = w.shape[0]
    _check_pow2(n)
    row0 = fht(w, axis=0)[0, :]
    expected = np.sqrt(n) * w.mean(axis=0)
    err = float(np.abs(row0 - expected).max())
    if err > tol:
        raise AssertionError(
            f"first-row projection mismatch: max deviation {err:.3e} > {tol:.1e}"
        )
    return row0
