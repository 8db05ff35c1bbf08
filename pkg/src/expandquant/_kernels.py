"""Hot numeric kernels: numba-jitted with pure-numpy fallbacks.

Every public function here dispatches on the backend chosen in `_backend`.
The two implementations of each kernel perform the same arithmetic in the
same order, so results agree bitwise for the butterfly/codec kernels and to
rounding order for the matmul (each backend is individually deterministic
across runs).
"""

import numpy as np

from ._backend import USE_NUMBA

# E2M1 element codebook (nonnegative half) and the midpoints between
# consecutive entries. A tie at a midpoint resolves to the even code index.
E2M1_VALUES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
_E2M1_MIDS = np.array([0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0])
E2M1_LUT = np.concatenate([E2M1_VALUES, -E2M1_VALUES])


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _fwht_rows_numpy(x: np.ndarray) -> np.ndarray:
    d, n = x.shape
    h = 1
    while h < n:
        y = x.reshape(d, n // (2 * h), 2, h)
        a = y[:, :, 0, :].copy()
        b = y[:, :, 1, :]
        y[:, :, 0, :] = a + b
        y[:, :, 1, :] = a - b
        h *= 2
    return x


def _matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum without optimize keeps a fixed C-order accumulation loop
    return np.einsum("ik,kj->ij", a, b)


def _e2m1_encode_numpy(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    idx = np.searchsorted(_E2M1_MIDS, mag, side="left").astype(np.uint8)
    for k in (1, 3, 5):  # ties at odd midpoints round up to the even index
        idx[mag == _E2M1_MIDS[k]] += 1
    codes = np.where(v < 0.0, idx + np.uint8(8), idx)
    return np.where(idx == 0, np.uint8(0), codes).astype(np.uint8)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def _fwht_rows_numba(x):
        d, n = x.shape
        for r in prange(d):
            h = 1
            while h < n:
                for start in range(0, n, 2 * h):
                    for i in range(start, start + h):
                        a = x[r, i]
                        b = x[r, i + h]
                        x[r, i] = a + b
                        x[r, i + h] = a - b
                h *= 2
        return x

    @njit(cache=True, parallel=True)
    def _matmul_numba(a, b):
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in prange(m):
            for l in range(k):
                ail = a[i, l]
                for j in range(n):
                    out[i, j] += ail * b[l, j]
        return out

    @njit(cache=True, parallel=True)
    def _e2m1_encode_numba(v):
        flat = v.ravel()
        codes = np.empty(flat.shape[0], dtype=np.uint8)
        mids = (0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0)
        for t in prange(flat.shape[0]):
            x = flat[t]
            mag = abs(x)
            idx = 0
            for k in range(7):
                m = mids[k]
                if mag > m or (mag == m and k % 2 == 1):
                    idx = k + 1
                else:
                    break
            if idx == 0:
                codes[t] = 0
            elif x < 0.0:
                codes[t] = 8 + idx
            else:
                codes[t] = idx
        return codes.reshape(v.shape)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def fwht_rows_inplace(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard butterfly applied to each row in place.

    `x` must be C-contiguous float64 with a power-of-two number of columns
    (validated by callers).
    """
    if USE_NUMBA:
        return _fwht_rows_numba(x)
    return _fwht_rows_numpy(x)


def matmul_det(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product with a fixed accumulation order (bit-reproducible)."""
    if USE_NUMBA:
        return _matmul_numba(a, b)
    return _matmul_numpy(a, b)


def e2m1_encode(v: np.ndarray) -> np.ndarray:
    """Nearest E2M1 code for each element of `v` (already scale-divided).

    Codes are sign<<3 | magnitude-index; magnitudes clamp to 6; ties choose
    the even magnitude index; zero is canonical (code 0, never 8).
    """
    if USE_NUMBA:
        return _e2m1_encode_numba(np.ascontiguousarray(v, dtype=np.float64))
    return _e2m1_encode_numpy(np.asarray(v, dtype=np.float64))


def e2m1_decode(codes: np.ndarray) -> np.ndarray:
    """Exact values of E2M1 codes (0..15)."""
    return E2M1_LUT[codes]
