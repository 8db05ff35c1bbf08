"""GPTQ weight quantization with Hessian accumulation and error feedback.

Weights are (input_dims, output_channels); the Hessian is the mean Gram
matrix of the layer inputs, so the sweep runs over input-dim rows. Scales
are frozen from the original weights before the sweep, the act-order
permutation is applied to both the weight rows and the Hessian, and the
output codes are un-permuted before packing.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CholeskyFailureError
from .numerics import as_matrix
from .quantizers import FixedGridQuantizer, QuantScheme, QuantizedTensor, dequantize


@dataclass(frozen=True)
class HessianState:
    h: np.ndarray
    nsamples: int


def hessian_init(n: int) -> HessianState:
    return HessianState(h=np.zeros((n, n)), nsamples=0)


def accumulate(state: HessianState, x_batch) -> HessianState:
    """Add a batch of rows to the Gram accumulator (pure, order-insensitive)."""
    x = as_matrix(x_batch, "x_batch")
    n = state.h.shape[0]
    if x.shape[1] != n:
        raise ValueError(f"batch has {x.shape[1]} cols, accumulator expects {n}")
    return HessianState(h=state.h + x.T @ x, nsamples=state.nsamples + x.shape[0])


def finalize(state: HessianState, damping_frac: float = 0.01) -> np.ndarray:
    """Mean Gram matrix plus damping_frac * mean(diag) on the diagonal."""
    if state.nsamples < 1:
        raise ValueError("finalize requires at least one accumulated sample")
    h = state.h / state.nsamples
    if damping_frac:
        h = h + (damping_frac * np.mean(np.diag(h))) * np.eye(h.shape[0])
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailureError(
            "Hessian not positive definite; calibration data is degenerate"
        ) from exc
    return h


def act_order_permutation(h) -> np.ndarray:
    """Indices sorted by the Hessian diagonal, descending, stable ties."""
    h = as_matrix(h, "h")
    if h.shape[0] != h.shape[1]:
        raise ValueError("h must be square")
    return np.argsort(-np.diag(h), kind="stable")


def gptq_quantize(w, h, scheme: QuantScheme, act_order: bool = False,
                  block: int = 128) -> QuantizedTensor:
    """Sequential quantization with error feedback via the inverse Cholesky.

    With an identity Hessian the output equals plain round-to-nearest under
    the same frozen grid, bit for bit.
    """
    w = as_matrix(w, "w")
    h = as_matrix(h, "h")
    n = w.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"h must be ({n}, {n}), got {h.shape}")
    grid = FixedGridQuantizer(w, scheme)
    perm = act_order_permutation(h) if act_order else np.arange(n)
    wp = w[perm, :].copy()
    hp = h[np.ix_(perm, perm)]
    try:
        np.linalg.cholesky(hp)
        hinv = np.linalg.inv(hp)
        u = np.linalg.cholesky(hinv).T  # upper, hinv = u.T @ u
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailureError("Hessian not positive definite") from exc

    code_rows = np.zeros((n, w.shape[1]),
                         dtype=np.int8 if scheme.kind == "int4_sym_per_channel"
                         else np.uint8)
    for i1 in range(0, n, block):
        i2 = min(i1 + block, n)
        errs = np.zeros((i2 - i1, w.shape[1]))
        for i in range(i1, i2):
            codes_i, deq = grid.quantize_row(int(perm[i]), wp[i, :])
            code_rows[perm[i], :] = codes_i
            err = (wp[i, :] - deq) / u[i, i]
            if i + 1 < i2:
                wp[i + 1:i2, :] -= np.outer(u[i, i + 1:i2], err)
            errs[i - i1, :] = err
        if i2 < n:
            wp[i2:, :] -= u[i1:i2, i2:].T @ errs
    return grid.assemble(code_rows)


@dataclass(frozen=True)
class ReconstructionError:
    per_column: np.ndarray
    frobenius: float


def reconstruction_error(x, w, q: QuantizedTensor) -> ReconstructionError:
    """||X W - X dequant(q)|| per output column and in Frobenius total."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    dq = dequantize(q)
    if x.shape[1] != w.shape[0] or dq.shape != w.shape:
        raise ValueError("incompatible shapes for reconstruction error")
    e = x @ (w - dq)
    per_col = np.sqrt(np.sum(e * e, axis=0))
    return ReconstructionError(per_column=per_col,
                               frobenius=float(np.linalg.norm(e)))
