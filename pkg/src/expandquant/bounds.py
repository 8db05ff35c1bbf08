"""Numerical verification of the nullity and GPTQ error-bound claims.

The bound checked here is, for each output column w of the (rotated) weight
matrix and its quantized counterpart q,

    ||XH w - XH q||_2  <=  delta * sqrt(N) * min(max_j ||P_j (XH)_j||_2,
                                                 sqrt(||X||_F^2 / N))

where P_j projects onto the orthogonal complement of the span of the
rotated-input columns after j (the GPTQ processing order), N is the
original channel count, and delta is the quantizer's maximum rounding
error. Expansion leaves N and the energy term unchanged while shrinking
every rotated column norm to sqrt(n/m), which is the supremum-reduction
mechanism verified by `supremum_factor_check`.
"""

from dataclasses import dataclass

import numpy as np

from . import gptq as gptq_mod
from .errors import BoundViolationError, RankDeficientError
from .hadamard import ExpandedRotation, apply_left_transpose, apply_right
from .numerics import (
    DEFAULT_RANK_TOL,
    as_matrix,
    numeric_rank,
    orth_complement_projector,
    qr_thin,
)
from .quantizers import QuantScheme, max_rounding_error

REL_SLACK = 1e-8  # satisfied <=> empirical <= bound * (1 + REL_SLACK)


@dataclass(frozen=True)
class NullityReport:
    rank_x: int
    nullity_x: int
    rank_xh: int
    nullity_xh: int


@dataclass
class BoundReport:
    delta: float
    term_max_proj: float
    term_energy: float
    bound: float
    empirical_error: float | None = None
    satisfied: bool | None = None
    per_column_terms: np.ndarray | None = None
    per_column_error: np.ndarray | None = None


def _rotate(x: np.ndarray, rot) -> np.ndarray:
    if rot is None:
        return x
    if isinstance(rot, ExpandedRotation):
        return apply_right(x, rot)
    mat = as_matrix(rot, "rot")
    return x @ mat


def nullity_report(x, rot: ExpandedRotation,
                   tol: float = DEFAULT_RANK_TOL) -> NullityReport:
    """Ranks/nullities of X and X H-hat; raises if the rank-nullity
    identity (rank preserved, nullity up by exactly m - n) fails."""
    x = as_matrix(x, "x")
    if x.shape[1] != rot.n:
        raise ValueError(f"x has {x.shape[1]} cols, rotation expects {rot.n}")
    xh = apply_right(x, rot)
    rank_x = numeric_rank(x, tol)
    rank_xh = numeric_rank(xh, tol)
    rep = NullityReport(
        rank_x=rank_x, nullity_x=x.shape[1] - rank_x,
        rank_xh=rank_xh, nullity_xh=xh.shape[1] - rank_xh,
    )
    if rep.rank_xh != rep.rank_x:
        raise BoundViolationError(
            f"rank changed under expansion: {rep.rank_x} -> {rep.rank_xh}")
    if rep.nullity_xh - rep.nullity_x != rot.m - rot.n:
        raise BoundViolationError(
            f"nullity grew by {rep.nullity_xh - rep.nullity_x}, "
            f"expected {rot.m - rot.n}")
    return rep


def trailing_projection_norms(xh: np.ndarray) -> np.ndarray:
    """||P_j (XH)_j||_2 for every column j, P_j from the columns after j.

    Computed as the diagonal of the R factor of the column-reversed QR:
    the Householder residual of column j against the later columns.
    """
    xh = np.asarray(xh, dtype=np.float64)
    d, m = xh.shape
    rev = xh[:, ::-1]
    if d < m:  # qr_thin needs rows >= cols; zero rows change nothing
        rev = np.vstack([rev, np.zeros((m - d, m))])
    _, r = qr_thin(rev)
    return np.abs(np.diag(r))[::-1].copy()


def trailing_projection_norms_reference(xh: np.ndarray,
                                        basis: np.ndarray | None = None) -> np.ndarray:
    """Definitional per-column projections (small-instance oracle).

    With `basis` given, the projector at step j uses basis columns j+1..end
    instead of the rotated matrix's own trailing columns (the alternative
    subscript reading); steps beyond the basis width use the identity.
    """
    xh = as_matrix(xh, "xh")
    src = xh if basis is None else as_matrix(basis, "basis")
    m = xh.shape[1]
    out = np.empty(m)
    for j in range(m):
        trailing = src[:, j + 1:]
        if trailing.shape[1] == 0:
            out[j] = np.linalg.norm(xh[:, j])
        else:
            p = orth_complement_projector(trailing)
            out[j] = np.linalg.norm(p @ xh[:, j])
    return out


def gptq_bound(x, rot, delta: float, projector_basis: str = "rotated") -> BoundReport:
    """Both min-terms of the error bound for inputs x under a rotation.

    `rot` may be None (identity), a square orthogonal array, or an
    ExpandedRotation. `projector_basis` selects the subscript reading:
    "rotated" (default) projects against trailing rotated columns,
    "original" against trailing columns of x itself.
    """
    x = as_matrix(x, "x")
    d, n = x.shape
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if d < n or numeric_rank(x) < n:
        raise RankDeficientError(
            f"x must be full column rank with D >= N, got shape {x.shape} "
            f"rank {numeric_rank(x)}")
    xh = _rotate(x, rot)
    if projector_basis == "rotated":
        terms = trailing_projection_norms(xh)
    elif projector_basis == "original":
        terms = trailing_projection_norms_reference(xh, basis=x)
    else:
        raise ValueError("projector_basis must be 'rotated' or 'original'")
    term_max = float(np.max(terms))
    term_energy = float(np.sqrt(np.sum(x * x) / n))
    return BoundReport(
        delta=float(delta),
        term_max_proj=term_max,
        term_energy=term_energy,
        bound=float(delta * np.sqrt(n) * min(term_max, term_energy)),
        per_column_terms=terms,
    )


@dataclass(frozen=True)
class SupremumStats:
    ratios: np.ndarray          # term_max_proj(expanded) / term_max_proj(square)
    mean_ratio: float
    analytic_factor: float      # sqrt(n / m)
    max_column_norm_dev: float  # worst |  ||H_j||_2 - sqrt(n/m) |


def supremum_factor_check(n: int, m: int, seeds: int, d: int = 128,
                          seed0: int = 0) -> SupremumStats:
    """Distribution of the expanded/square max-projection ratio.

    Per seed, asserts the chained spectral-norm ceiling
    ||P_j X H-hat_j|| <= ||P_j X||_2 * sqrt(n/m) for every column, and the
    exact column-norm identity of the expanded rotation.
    """
    from .hadamard import build_expanded, materialize

    if m < n:
        raise ValueError("m must be >= n")
    rot_sq = build_expanded(n, n)
    rot_ex = build_expanded(n, m)
    hhat = materialize(rot_ex)
    col_norms = np.linalg.norm(hhat, axis=0)
    factor = np.sqrt(n / m)
    col_dev = float(np.max(np.abs(col_norms - factor)))
    if col_dev > 1e-12:
        raise BoundViolationError(
            f"column norm deviates from sqrt(n/m) by {col_dev:.2e}")
    ratios = np.empty(seeds)
    for s in range(seeds):
        rng = np.random.default_rng(seed0 + s)
        x = rng.normal(size=(d, n))
        t_sq = trailing_projection_norms(apply_right(x, rot_sq))
        xh = apply_right(x, rot_ex)
        t_ex = trailing_projection_norms(xh)
        ratios[s] = np.max(t_ex) / np.max(t_sq)
        # chained ceiling, column by column, same projector both sides
        for j in range(m):
            trailing = xh[:, j + 1:]
            p = orth_complement_projector(trailing) if trailing.shape[1] \
                else np.eye(d)
            lhs = np.linalg.norm(p @ xh[:, j])
            ceil = np.linalg.norm(p @ x, 2) * factor
            if lhs > ceil * (1 + 1e-9) + 1e-12:
                raise BoundViolationError(
                    f"spectral-norm ceiling violated at seed {s} col {j}: "
                    f"{lhs:.6e} > {ceil:.6e}")
    return SupremumStats(ratios=ratios, mean_ratio=float(np.mean(ratios)),
                         analytic_factor=float(factor),
                         max_column_norm_dev=col_dev)


def empirical_vs_bound(x, w, rot, scheme: QuantScheme,
                       damping_frac: float = 0.01,
                       act_order: bool = False) -> BoundReport:
    """Run GPTQ on the rotated weights and compare against the bound.

    The Hessian comes from the rotated inputs; delta comes from the frozen
    quantizer grid GPTQ actually used. act_order defaults to off so the
    bound's column order matches the processing order.
    """
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    if x.shape[1] != w.shape[0]:
        raise ValueError("x and w disagree on the channel count")
    xh = _rotate(x, rot)
    if rot is None:
        what = w
    elif isinstance(rot, ExpandedRotation):
        what = apply_left_transpose(w, rot)
    else:
        what = as_matrix(rot, "rot").T @ w
    state = gptq_mod.accumulate(gptq_mod.hessian_init(xh.shape[1]), xh)
    h = gptq_mod.finalize(state, damping_frac)
    qt = gptq_mod.gptq_quantize(what, h, scheme, act_order=act_order)
    delta = max_rounding_error(qt)
    report = gptq_bound(x, rot, delta)
    errs = gptq_mod.reconstruction_error(xh, what, qt).per_column
    report.per_column_error = errs
    report.empirical_error = float(np.max(errs))
    report.satisfied = bool(report.empirical_error
                            <= report.bound * (1 + REL_SLACK))
    return report
