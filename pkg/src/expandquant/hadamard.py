"""Square and expanded (row-selected) Hadamard rotations with fast apply.

An order m = 2^k * b factorizes into a Sylvester part (handled by the
Walsh-Hadamard butterfly) and a base table B of order b (embedded ±1 data,
Paley constructions pregenerated by tools/gen_hadamard_tables.py). The
logical m x m matrix is H_m = S_{2^k} (x) B under the row-major Kronecker
convention, and the expanded rotation keeps its first n rows scaled by
gamma = 1/sqrt(m), so the rows are orthonormal and the left inverse is the
transpose.
"""

import importlib.resources
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._kernels import fwht_rows_inplace
from .errors import UnsupportedOrderError
from .numerics import as_matrix


@lru_cache(maxsize=1)
def _base_tables() -> dict[int, np.ndarray]:
    ref = importlib.resources.files("expandquant").joinpath(
        "data/hadamard_bases.npz"
    )
    with ref.open("rb") as fh:
        with np.load(fh) as npz:
            return {int(k): npz[k].astype(np.int8) for k in npz.files}


def base_orders() -> tuple[int, ...]:
    """Orders of the embedded base Hadamard tables, ascending."""
    return tuple(sorted(_base_tables()))


def base_matrix(order: int) -> np.ndarray:
    """The embedded ±1 Hadamard table of the given order (a copy)."""
    tables = _base_tables()
    if order not in tables:
        raise UnsupportedOrderError(f"no embedded base table of order {order}")
    return tables[order].copy()


def sylvester(size: int) -> np.ndarray:
    """Sylvester Hadamard matrix (±1 int8) of power-of-two size."""
    if size < 1 or size & (size - 1):
        raise UnsupportedOrderError(f"Sylvester order must be a power of two, got {size}")
    h = np.array([[1]], dtype=np.int8)
    while h.shape[0] < size:
        h = np.block([[h, h], [h, -h]]).astype(np.int8)
    return h


def factorize_order(m: int) -> tuple[int, int]:
    """Split m = 2^k * b with maximal k and b an embedded base order (or 1)."""
    if m < 1:
        raise UnsupportedOrderError(f"order must be >= 1, got {m}")
    bases = _base_tables()
    for k in range(m.bit_length() - 1, -1, -1):
        if m % (1 << k):
            continue
        b = m >> k
        if b == 1 or b in bases:
            return k, b
    raise UnsupportedOrderError(
        f"order {m} does not factor as 2^k * b with b in {base_orders()}"
    )


@dataclass(frozen=True)
class ExpandedRotation:
    """Row-selected scaled Hadamard: the n x m matrix gamma * H_m[:n, :]."""

    n: int
    m: int
    gamma: float
    k: int
    b: int
    sign_flips: np.ndarray | None = None

    @property
    def is_square(self) -> bool:
        return self.n == self.m


def build_expanded(n: int, m: int, sign_flips: np.ndarray | None = None) -> ExpandedRotation:
    """Construct the expanded rotation for n input and m >= n output channels."""
    if not 1 <= n <= m:
        raise ValueError(f"need m >= n >= 1, got n={n}, m={m}")
    k, b = factorize_order(m)
    if sign_flips is not None:
        sign_flips = np.asarray(sign_flips, dtype=np.float64)
        if sign_flips.shape != (m,) or not np.all(np.abs(sign_flips) == 1.0):
            raise ValueError("sign_flips must be a ±1 vector of length m")
    return ExpandedRotation(n=n, m=m, gamma=1.0 / np.sqrt(m), k=k, b=b,
                            sign_flips=sign_flips)


def materialize(rot: ExpandedRotation) -> np.ndarray:
    """Dense n x m matrix of the rotation (for audits and small-m tests)."""
    h = np.kron(sylvester(1 << rot.k), base_matrix(rot.b)) if rot.b > 1 \
        else sylvester(rot.m)
    out = rot.gamma * h[:rot.n, :].astype(np.float64)
    if rot.sign_flips is not None:
        out = out * rot.sign_flips[np.newaxis, :]
    return out


def _transform_rows(x: np.ndarray, k: int, b: int) -> np.ndarray:
    """Right-multiply each row of x (width 2^k * b) by H_m, unnormalized."""
    d, m = x.shape
    big = 1 << k
    if b == 1:
        return fwht_rows_inplace(x)
    base = _base_tables()[b].astype(np.float64)
    t = x.reshape(d, big, b) @ base
    if k == 0:
        return t.reshape(d, m)
    cols = np.ascontiguousarray(t.transpose(0, 2, 1)).reshape(d * b, big)
    fwht_rows_inplace(cols)
    return np.ascontiguousarray(
        cols.reshape(d, b, big).transpose(0, 2, 1)
    ).reshape(d, m)


def apply_right(x, rot: ExpandedRotation) -> np.ndarray:
    """X @ H-hat, computed by zero-padding plus the fast transform."""
    x = as_matrix(x, "x")
    if x.shape[1] != rot.n:
        raise ValueError(f"x has {x.shape[1]} cols, rotation expects {rot.n}")
    padded = np.zeros((x.shape[0], rot.m))
    padded[:, :rot.n] = x
    out = rot.gamma * _transform_rows(padded, rot.k, rot.b)
    if rot.sign_flips is not None:
        out *= rot.sign_flips[np.newaxis, :]
    return out


def apply_left_transpose(w, rot: ExpandedRotation) -> np.ndarray:
    """H-hat^T @ W (the m x N' merged weight), via the same fast transform."""
    w = as_matrix(w, "w")
    if w.shape[0] != rot.n:
        raise ValueError(f"w has {w.shape[0]} rows, rotation expects {rot.n}")
    padded = np.zeros((w.shape[1], rot.m))
    padded[:, :rot.n] = w.T
    out = rot.gamma * _transform_rows(padded, rot.k, rot.b)
    if rot.sign_flips is not None:
        out *= rot.sign_flips[np.newaxis, :]
    return np.ascontiguousarray(out.T)


def fwht_inplace(rows) -> np.ndarray:
    """Unnormalized Walsh-Hadamard butterfly on each row.

    Transforms in place when given a C-contiguous float64 array; otherwise
    transforms and returns a float64 copy. Applying twice scales by the
    width.
    """
    arr = np.asarray(rows)
    width = arr.shape[-1] if arr.ndim else 0
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D tensor of rows, got shape {arr.shape}")
    if width < 1 or width & (width - 1):
        raise ValueError(f"row width must be a power of two, got {width}")
    if arr.dtype != np.float64 or not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
    return fwht_rows_inplace(arr)


def constructible_orders(limit: int) -> list[int]:
    """All supported orders m <= limit, ascending."""
    out = set()
    p = 1
    while p <= limit:
        out.add(p)
        p *= 2
    for b in base_orders():
        m = b
        while m <= limit:
            out.add(m)
            m *= 2
    return sorted(out)
