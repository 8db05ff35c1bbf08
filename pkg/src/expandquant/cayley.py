"""Cayley-transform optimization of square rotations.

The objective is the layer-wise quantization error of the rotated weights,
summed over the linears a rotation touches: reading-side linears contribute
||(X R)(R^T W - q(R^T W))||_F^2 and writing-side linears ||X (W R - q(W R))||_F^2.
Gradients pass straight through the quantizer (identity inside the clip
range, zero outside); scales are treated as constants per evaluation. Every
update stays exactly on the orthogonal group via the Cayley map, so no
re-orthonormalization is needed.
"""

from dataclasses import dataclass, field

import numpy as np

from ._kernels import e2m1_decode, e2m1_encode
from .errors import ExpandQuantError
from .hadamard import build_expanded, materialize
from .numerics import as_matrix
from .quantizers import INT4_SYM, MXFP4_GROUP, QuantScheme, mxfp4_shared_exponents


class CayleyDivergenceError(ExpandQuantError):
    def __init__(self, trace):
        super().__init__("objective diverged (NaN)")
        self.trace = list(trace)


@dataclass
class CayleyOptState:
    r: np.ndarray
    lr: float
    iter: int = 0
    objective_trace: list[float] = field(default_factory=list)


def skew_project(g, r) -> np.ndarray:
    """A = g r^T - r g^T, the skew generator of the manifold step."""
    g = as_matrix(g, "g")
    r = as_matrix(r, "r")
    if g.shape != r.shape or g.shape[0] != g.shape[1]:
        raise ValueError("g and r must be square and the same size")
    return g @ r.T - r @ g.T


def cayley_update(r, a, lr: float) -> np.ndarray:
    """r' = (I - (lr/2) a)^(-1) (I + (lr/2) a) r; exactly orthogonal for skew a."""
    r = as_matrix(r, "r")
    a = as_matrix(a, "a")
    n = r.shape[0]
    half = 0.5 * lr
    return np.linalg.solve(np.eye(n) - half * a, (np.eye(n) + half * a) @ r)


def _quantize_ste(w: np.ndarray, scheme: QuantScheme):
    """Dequantized values plus the clipped-element mask (STE zero region)."""
    if scheme.kind == "int4_sym_per_channel":
        amax = np.max(np.abs(w), axis=0)
        s = np.where(amax > 0.0, amax / 7.0, 1.0)
        v = w / s
        q = np.clip(np.round(v), -8, 7) * s
        mask = (v > 7.5) | (v < -8.5)
        return q, mask.astype(np.float64)
    if scheme.kind == "mxfp4":
        exps = mxfp4_shared_exponents(w, group_axis=0)
        s = np.repeat(np.ldexp(1.0, exps.astype(np.int32)),
                      MXFP4_GROUP, axis=0)[:w.shape[0], :]
        v = w / s
        q = e2m1_decode(e2m1_encode(v)) * s
        mask = np.abs(v) > 6.0
        return q, mask.astype(np.float64)
    raise ValueError(f"{scheme.kind} is not a weight scheme")


@dataclass
class RotationObjective:
    """Quantization-error objective over the linears a rotation affects.

    reading: (X, W) pairs where the pair rotates to (X R, R^T W)
    writing: (X, W) pairs where the weight rotates to W R with X unchanged
    frozen_q: map id(W) -> fixed dequantized matrix; when set, the quantizer
    is replaced by that constant (smooth surrogate used for gradient audits)
    """

    reading: list
    writing: list
    scheme: QuantScheme = INT4_SYM
    frozen_q: dict | None = None

    def _quant(self, key, w_rot):
        if self.frozen_q is not None:
            return self.frozen_q[key], np.ones_like(w_rot)
        return _quantize_ste(w_rot, self.scheme)

    def value(self, r: np.ndarray) -> float:
        return self.value_and_grad(r, want_grad=False)[0]

    def value_and_grad(self, r: np.ndarray, want_grad: bool = True):
        n = r.shape[0]
        total = 0.0
        grad = np.zeros((n, n)) if want_grad else None
        for key, (x, w) in enumerate(self.reading):
            w_rot = r.T @ w
            q, mask = self._quant(("r", key), w_rot)
            resid = w_rot - q
            xr = x @ r
            err = xr @ resid
            total += float(np.sum(err * err))
            if want_grad:
                grad += 2.0 * (x.T @ err) @ resid.T
                gw = 2.0 * (xr.T @ err) * mask
                grad += w @ gw.T
        for key, (x, w) in enumerate(self.writing):
            w_rot = w @ r
            q, mask = self._quant(("w", key), w_rot)
            resid = w_rot - q
            err = x @ resid
            total += float(np.sum(err * err))
            if want_grad:
                gw = 2.0 * (x.T @ err) * mask
                grad += w.T @ gw
        return total, grad

    def grad_fd(self, r: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        """Central-difference gradient (audit fallback; O(n^2) evaluations)."""
        n = r.shape[0]
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                e = np.zeros((n, n))
                e[i, j] = eps
                out[i, j] = (self.value(r + e) - self.value(r - e)) / (2 * eps)
        return out


def optimize(objective: RotationObjective, r0: np.ndarray, iters: int = 100,
             lr: float = 1.5, max_backtracks: int = 5) -> CayleyOptState:
    """Backtracking Cayley descent; the recorded trace is non-increasing."""
    r = as_matrix(r0, "r0").copy()
    state = CayleyOptState(r=r, lr=lr)
    current, grad = objective.value_and_grad(r)
    if not np.isfinite(current):
        raise CayleyDivergenceError([current])
    state.objective_trace.append(current)
    for _ in range(iters):
        a = skew_project(grad, r)
        accepted = False
        for _bt in range(max_backtracks + 1):
            r_try = cayley_update(r, a, -state.lr)
            val = objective.value(r_try)
            if not np.isfinite(val):
                raise CayleyDivergenceError(state.objective_trace + [val])
            if val <= current:
                accepted = True
                break
            state.lr *= 0.5
        if accepted:
            r = r_try
            current, grad = objective.value_and_grad(r)
        state.objective_trace.append(current)
        state.iter += 1
        state.r = r
        drift = np.linalg.norm(r.T @ r - np.eye(r.shape[0]))
        if drift > 1e-5:
            raise ExpandQuantError(f"orthogonality drift {drift:.2e} exceeds 1e-5")
    return state


def _collect_pairs(model, captures, target: str):
    reading, writing = [], []
    c = model.config
    for li, lw in enumerate(model.layers):
        if target == "r1":
            for nm in ("wq", "wk", "wv", "w_gate", "w_up"):
                reading.append((captures[f"layers.{li}.{nm}"], getattr(lw, nm)))
            writing.append((captures[f"layers.{li}.wo"], lw.wo))
            writing.append((captures[f"layers.{li}.w_down"], lw.w_down))
        elif target == "r2":
            hd = model.head_dim_v
            h_in = captures[f"layers.{li}.wv"]
            ctx = captures[f"layers.{li}.wo"]
            for kv in range(c.n_kv_heads):
                writing.append((h_in, lw.wv[:, kv * hd:(kv + 1) * hd]))
            for qh in range(c.n_heads):
                reading.append((ctx[:, qh * hd:(qh + 1) * hd],
                                lw.wo[qh * hd:(qh + 1) * hd, :]))
        else:
            raise ValueError(f"unknown rotation target {target!r}")
    return reading, writing


def optimize_rotation(model, calib_tokens, target: str = "r1",
                      iters: int = 100, lr: float = 1.5, n_samples: int = 800,
                      seq_len: int = 64, scheme: QuantScheme = INT4_SYM,
                      init: str = "hadamard") -> CayleyOptState:
    """Optimize a square rotation against the layer-wise quantization error.

    The model must be folded (and not yet rotated); `n_samples` calibration
    token rows are captured through it to build the objective. Returns the
    final state; merge state.r with model.merge_r1 / merge_r2_square.
    """
    from .model import capture_layer_inputs  # local import avoids a cycle

    tokens = np.asarray(calib_tokens)
    n_windows = max(1, -(-n_samples // seq_len))
    captures = capture_layer_inputs(model, tokens, n_windows, seq_len)
    captures = {k: v[:n_samples] for k, v in captures.items()}
    reading, writing = _collect_pairs(model, captures, target)
    size = model.config.d_model if target == "r1" else model.head_dim_v
    if init == "identity":
        r0 = np.eye(size)
    elif init == "hadamard":
        r0 = materialize(build_expanded(size, size))
    else:
        r0 = as_matrix(init, "init")
    objective = RotationObjective(reading=reading, writing=writing, scheme=scheme)
    return optimize(objective, r0, iters=iters, lr=lr)
