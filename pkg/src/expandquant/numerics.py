"""Minimal dense linear algebra used by every other module.

All functions are pure, operate on 2-D float64 arrays, and are safe to call
concurrently. The default rank tolerance (1e-8, relative to the largest
singular value) is exposed wherever ranks are taken.
"""

import numpy as np

from ._kernels import matmul_det

DEFAULT_RANK_TOL = 1e-8

# columns whose residual falls below this fraction of their original norm
# are treated as linearly dependent during the QR sweep
_QR_DEP_TOL = 1e-13


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def matmul(a, b) -> np.ndarray:
    """Standard product with a fixed accumulation order.

    The fixed loop order makes results bit-reproducible across runs,
    independent of BLAS threading.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return matmul_det(np.ascontiguousarray(a), np.ascontiguousarray(b))


def qr_thin(a) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR via Householder reflections.

    Returns (Q, R) with a = Q @ R, Q of shape (m, n) with orthonormal
    columns, and R upper triangular with nonnegative diagonal. Columns that
    are numerically dependent on their predecessors contribute no pivot, so
    a rank-r input yields exactly n - r all-zero trailing rows in R.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        raise ValueError(f"qr_thin requires rows >= cols, got {a.shape}")
    r_mat = a.copy()
    col_norms = np.sqrt(np.sum(a * a, axis=0))
    vs: list[np.ndarray] = []   # reflector vectors, one per pivot row
    betas: list[float] = []
    rank = 0
    for j in range(n):
        x = r_mat[rank:, j]
        norm_x = np.sqrt(np.sum(x * x))
        if norm_x <= _QR_DEP_TOL * max(col_norms[j], 1e-300):
            r_mat[rank:, j] = 0.0
            continue
        # reflector sign chosen to avoid cancellation in v[0]
        alpha = -norm_x if x[0] >= 0 else norm_x
        v = x.copy()
        v[0] -= alpha
        beta = 2.0 / np.sum(v * v)
        r_mat[rank:, j:] -= np.outer(beta * v, v @ r_mat[rank:, j:])
        r_mat[rank, j] = alpha
        r_mat[rank + 1:, j] = 0.0
        vs.append(v)
        betas.append(beta)
        rank += 1
    r_mat[rank:, :] = 0.0
    q = np.zeros((m, n))
    q[:n, :n] = np.eye(n)
    for i in range(rank - 1, -1, -1):
        v, beta = vs[i], betas[i]
        q[i:, :] -= np.outer(beta * v, v @ q[i:, :])
    flip = np.diag(r_mat[:n, :n]) < 0
    r_mat[flip, :] *= -1.0
    q[:, flip] *= -1.0
    return q, r_mat[:n, :]


def numeric_rank(a, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above tol * sigma_max."""
    a = as_matrix(a, "a")
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def nullity(a, tol: float = DEFAULT_RANK_TOL) -> int:
    """Dimension of the nullspace (cols - rank)."""
    a = as_matrix(a, "a")
    return a.shape[1] - numeric_rank(a, tol)


def orth_complement_projector(cols, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """P = I - Q Q^T for an orthonormal basis Q of the column space.

    The basis is taken from the left singular vectors above the rank
    tolerance, so rank-deficient and zero-column inputs are handled
    gracefully (empty span gives P = I).
    """
    cols = as_matrix(cols, "cols")
    d = cols.shape[0]
    if d < 1:
        raise ValueError("cols must have at least one row")
    if cols.shape[1] == 0 or not np.any(cols):
        return np.eye(d)
    u, s, _ = np.linalg.svd(cols, full_matrices=False)
    q = u[:, s > tol * s[0]]
    return np.eye(d) - q @ q.T
