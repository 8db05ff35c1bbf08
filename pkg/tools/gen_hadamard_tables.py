#!/usr/bin/env python3
"""Generate the embedded base Hadamard tables shipped with expandquant.

Run once from the repository root:

    python3 tools/gen_hadamard_tables.py

Writes src/expandquant/data/hadamard_bases.npz containing one int8 ±1 matrix
per base order. Every table is verified exactly (B @ B.T == order * I in
int64 arithmetic) before being written, so the package can trust the data
blindly at runtime.

Constructions used:
  * Paley I  (order q+1,    q = 3 mod 4 prime power): 12, 20, 44, 60, 108,
    140, 312, 344 (q = 343 = 7^3 uses GF(343)).
  * Paley II (order 2(q+1), q = 1 mod 4 prime power): 28, 36, 52 (GF(25)), 76.
  * Sylvester doubling: 40 = 2 * 20.
"""

from __future__ import annotations

import os

import numpy as np


def _gf_elements(p: int, k: int, modulus: tuple[int, ...]):
    """All q = p**k field elements as degree-<k coefficient tuples."""
    if k == 1:
        return [(a,) for a in range(p)]
    elems = [()]
    for _ in range(k):
        elems = [e + (c,) for e in elems for c in range(p)]
    return elems


def _gf_mul(a, b, p, modulus):
    """Multiply two GF(p^k) elements given a monic irreducible modulus.

    Elements are coefficient tuples (low degree first); modulus is the full
    coefficient tuple of the monic irreducible polynomial of degree k.
    """
    k = len(modulus) - 1
    prod = [0] * (len(a) + len(b) - 1)
    for i, ai in enumerate(a):
        if ai == 0:
            continue
        for j, bj in enumerate(b):
            prod[i + j] = (prod[i + j] + ai * bj) % p
    # reduce modulo the monic irreducible polynomial
    for deg in range(len(prod) - 1, k - 1, -1):
        coef = prod[deg]
        if coef == 0:
            continue
        prod[deg] = 0
        for j in range(k):
            prod[deg - k + j] = (prod[deg - k + j] - coef * modulus[j]) % p
    return tuple(prod[:k])


def _gf_sub(a, b, p):
    return tuple((x - y) % p for x, y in zip(a, b))


def _quadratic_character(p: int, k: int, modulus):
    """chi(a) for every element of GF(p^k): 0 at 0, +1 squares, -1 others."""
    elems = _gf_elements(p, k, modulus)
    squares = {_gf_mul(e, e, p, modulus) for e in elems if any(e)}
    chi = {}
    for e in elems:
        if not any(e):
            chi[e] = 0
        elif e in squares:
            chi[e] = 1
        else:
            chi[e] = -1
    return elems, chi


def jacobsthal(p: int, k: int = 1, modulus=None):
    """Jacobsthal matrix Q[i, j] = chi(a_i - a_j) over GF(p^k)."""
    if modulus is None:
        modulus = (0, 1)  # placeholder, unused for k == 1
    if k == 1:
        modulus = tuple([0] * 1 + [1])
    elems, chi = _quadratic_character(p, k, modulus)
    q = len(elems)
    out = np.zeros((q, q), dtype=np.int8)
    for i, a in enumerate(elems):
        for j, b in enumerate(elems):
            out[i, j] = chi[_gf_sub(a, b, p)]
    return out


def paley_one(p: int, k: int = 1, modulus=None) -> np.ndarray:
    """Hadamard matrix of order q+1 for prime power q = p^k, q = 3 mod 4."""
    q = p**k
    assert q % 4 == 3, q
    Q = jacobsthal(p, k, modulus)
    n = q + 1
    h = np.empty((n, n), dtype=np.int8)
    h[0, :] = 1
    h[1:, 0] = -1
    h[1:, 1:] = Q + np.eye(q, dtype=np.int8)
    return h

def paley_two(p: int, k: int = 1, modulus=None) -> np.ndarray:
    """Hadamard matrix of order 2(q+1) for prime power q = p^k, q = 1 mod 4."""
    q = p**k
    assert q % 4 == 1, q
    Q = jacobsthal(p, k, modulus)
    n = q + 1
    c = np.zeros((n, n), dtype=np.int8)  # symmetric conference matrix
    c[0, 1:] = 1
    c[1:, 0] = 1
    c[1:, 1:] = Q
    pos = np.array([[1, 1], [1, -1]], dtype=np.int8)
    diag = np.array([[1, -1], [-1, -1]], dtype=np.int8)
    h = np.kron(c, pos) + np.kron(np.eye(n, dtype=np.int8), diag)
    return h


def verify(h: np.ndarray) -> None:
    n = h.shape[0]
    assert h.shape == (n, n)
    assert set(np.unique(h)) <= {-1, 1}, "entries must be +-1"
    gram = h.astype(np.int64) @ h.astype(np.int64).T
    assert np.array_equal(gram, n * np.eye(n, dtype=np.int64)), f"order {n} failed"


def build_all() -> dict[str, np.ndarray]:
    tables = {
        12: paley_one(11),
        20: paley_one(19),
        28: paley_two(13),
        36: paley_two(17),
        44: paley_one(43),
        52: paley_two(5, 2, (3, 0, 1)),      # GF(25), x^2 - 2 irreducible
        60: paley_one(59),
        76: paley_two(37),
        108: paley_one(107),
        140: paley_one(139),
        312: paley_one(311),
        344: paley_one(7, 3, (5, 0, 0, 1)),  # GF(343), x^3 - 2 irreducible
    }
    h2 = np.array([[1, 1], [1, -1]], dtype=np.int8)
    tables[40] = np.kron(h2, tables[20])
    for order, mat in sorted(tables.items()):
        verify(mat)
        print(f"order {order:4d}: ok")
    return {str(k): v for k, v in tables.items()}


def main() -> None:
    out_path = os.path.join(
        os.path.dirname(__file__), "..", "src", "expandquant", "data",
        "hadamard_bases.npz",
    )
    tables = build_all()
    np.savez_compressed(out_path, **tables)
    print(f"wrote {os.path.abspath(out_path)} ({os.path.getsize(out_path)} bytes)")


if __name__ == "__main__":
    main()
