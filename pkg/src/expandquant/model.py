"""Tiny Llama-style decoder runtime plus rotation-plan rewriting.

The graph is plain numpy in double precision: RMSNorm, RoPE attention with
grouped KV heads, SiLU-gated MLP, tied or separate LM head. Rewrite passes
(fold_norm_weights, merge_r1, expand_r2, expand_r4) are pre-quantization
equivalences: logits are preserved to float tolerance. Weight matrices are
stored (input_dims, output_dims) so a forward step is `x @ w`.
"""

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import gptq as gptq_mod
from . import hadamard
from .hadamard import ExpandedRotation, apply_left_transpose, apply_right, build_expanded
from .quantizers import (
    INT4_ASYM,
    MXFP4,
    QuantScheme,
    dequantize,
    quantize_int4_sym_per_channel,
    quantize_mxfp4,
    round_trip,
)

RMS_EPS = 1e-6

LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass(frozen=True)
class TinyLlmConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ffn: int
    vocab_size: int
    rope_theta: float = 10000.0
    tied_embeddings: bool = True

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError("d_model must equal n_heads * head_dim")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be divisible by n_kv_heads")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class RotationPlan:
    r1: np.ndarray | None = None
    r2: ExpandedRotation | None = None
    r4: ExpandedRotation | None = None


@dataclass
class ModelGraph:
    config: TinyLlmConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray | None = None  # None while tied to the embedding
    rotation_plan: RotationPlan = field(default_factory=RotationPlan)
    head_dim_v: int = 0          # value-path head dim (R2 may expand it)
    d_ffn_eff: int = 0           # down-projection input dim (R4 may expand it)
    act_scheme: QuantScheme | None = None  # fake-quant on linear inputs

    def __post_init__(self):
        if self.head_dim_v == 0:
            self.head_dim_v = self.config.head_dim
        if self.d_ffn_eff == 0:
            self.d_ffn_eff = self.config.d_ffn

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)


def random_model(config: TinyLlmConfig, outlier_frac: float = 0.0,
                 outlier_gain: float = 1.0, seed: int = 0) -> ModelGraph:
    """Random fixture model with optional injected per-channel outliers.

    Outlier channels (a seeded random subset of embedding columns and of
    gate/up output columns, per layer) are scaled by outlier_gain to emulate
    the activation-outlier phenomenon that makes low-bit quantization hard.
    """
    rng = np.random.default_rng(seed)
    c = config
    emb = rng.normal(0.0, 1.0, size=(c.vocab_size, c.d_model))

    def lin(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    n_out_d = max(1, int(round(outlier_frac * c.d_model))) if outlier_frac > 0 else 0
    n_out_f = max(1, int(round(outlier_frac * c.d_ffn))) if outlier_frac > 0 else 0
    if n_out_d:
        emb[:, rng.choice(c.d_model, size=n_out_d, replace=False)] *= outlier_gain

    layers = []
    for _ in range(c.n_layers):
        lw = LayerWeights(
            attn_norm=np.abs(rng.normal(1.0, 0.1, size=c.d_model)),
            wq=lin(c.d_model, c.n_heads * c.head_dim),
            wk=lin(c.d_model, c.n_kv_heads * c.head_dim),
            wv=lin(c.d_model, c.n_kv_heads * c.head_dim),
            wo=lin(c.n_heads * c.head_dim, c.d_model),
            mlp_norm=np.abs(rng.normal(1.0, 0.1, size=c.d_model)),
            w_gate=lin(c.d_model, c.d_ffn),
            w_up=lin(c.d_model, c.d_ffn),
            w_down=lin(c.d_ffn, c.d_model),
        )
        if n_out_f:
            idx = rng.choice(c.d_ffn, size=n_out_f, replace=False)
            lw.w_gate[:, idx] *= outlier_gain
            lw.w_up[:, idx] *= outlier_gain
        layers.append(lw)
    final_norm = np.abs(rng.normal(1.0, 0.1, size=c.d_model))
    lm_head = None if c.tied_embeddings else lin(c.d_model, c.vocab_size)
    return ModelGraph(config=c, embedding=emb, layers=layers,
                      final_norm=final_norm, lm_head=lm_head)


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------

def _rmsnorm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return (x / rms) * weight


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope_tables(t: int, head_dim: int, theta: float):
    inv = theta ** (-np.arange(0, head_dim, 2) / head_dim)
    ang = np.arange(t)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (T, heads, head_dim), rotate-half convention
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos[:, None, :]
    s = sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def _fake_quant_act(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.kind == "mxfp4":
        return round_trip(x, scheme, group_axis=1)
    return round_trip(x, INT4_ASYM)


def forward_logits(model: ModelGraph, tokens, captures: dict | None = None) -> np.ndarray:
    """Logits per position; causal, deterministic.

    When ``captures`` is given, the input activation of every linear is
    appended to captures[name] (post-rotation, pre-quantization).
    """
    tokens = np.asarray(tokens)
    c = model.config
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-D sequence")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
        raise ValueError("token id out of range")
    t = tokens.size
    aq = model.act_scheme
    x = model.embedding[tokens]
    cos, sin = _rope_tables(t, c.head_dim, c.rope_theta)
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    group = c.n_heads // c.n_kv_heads

    for li, lw in enumerate(model.layers):
        h = _rmsnorm(x, lw.attn_norm)
        if captures is not None:
            for nm in ("wq", "wk", "wv"):
                captures.setdefault(f"layers.{li}.{nm}", []).append(h)
        hq = _fake_quant_act(h, aq) if aq else h
        q = (hq @ lw.wq).reshape(t, c.n_heads, c.head_dim)
        k = (hq @ lw.wk).reshape(t, c.n_kv_heads, c.head_dim)
        v = (hq @ lw.wv).reshape(t, c.n_kv_heads, model.head_dim_v)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        k = np.repeat(k, group, axis=1)
        v = np.repeat(v, group, axis=1)
        scores = np.einsum("thd,shd->hts", q, k) / np.sqrt(c.head_dim)
        scores = scores + mask[None, :, :]
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hts,shd->thd", w, v).reshape(t, c.n_heads * model.head_dim_v)
        if captures is not None:
            captures.setdefault(f"layers.{li}.wo", []).append(ctx)
        ctxq = _fake_quant_act(ctx, aq) if aq else ctx
        x = x + ctxq @ lw.wo

        h2 = _rmsnorm(x, lw.mlp_norm)
        if captures is not None:
            for nm in ("w_gate", "w_up"):
                captures.setdefault(f"layers.{li}.{nm}", []).append(h2)
        h2q = _fake_quant_act(h2, aq) if aq else h2
        a = _silu(h2q @ lw.w_gate) * (h2q @ lw.w_up)
        if model.rotation_plan.r4 is not None:
            a = apply_right(a, model.rotation_plan.r4)
        if captures is not None:
            captures.setdefault(f"layers.{li}.w_down", []).append(a)
        aq_in = _fake_quant_act(a, aq) if aq else a
        x = x + aq_in @ lw.w_down

    x = _rmsnorm(x, model.final_norm)
    head = model.lm_head if model.lm_head is not None else model.embedding.T
    return x @ head


def _windows(tokens: np.ndarray, seq_len: int):
    t = tokens.size
    for start in range(0, t, seq_len):
        w = tokens[start:start + seq_len]
        if w.size >= 2:
            yield w


def perplexity(model: ModelGraph, tokens, seq_len: int = 2048) -> float:
    """exp(mean next-token NLL) over non-overlapping windows."""
    tokens = np.asarray(tokens)
    if tokens.size < 2:
        raise ValueError("need at least 2 tokens")
    total_nll = 0.0
    total = 0
    for w in _windows(tokens, seq_len):
        logits = forward_logits(model, w)[:-1]
        targets = w[1:]
        lse = np.log(np.sum(np.exp(logits - logits.max(axis=1, keepdims=True)),
                            axis=1)) + logits.max(axis=1)
        total_nll += float(np.sum(lse - logits[np.arange(targets.size), targets]))
        total += targets.size
    return float(np.exp(total_nll / total))


# ---------------------------------------------------------------------------
# rewrite passes (all return a new ModelGraph; logits preserved)
# ---------------------------------------------------------------------------

def fold_norm_weights(model: ModelGraph) -> ModelGraph:
    """Absorb RMSNorm elementwise weights into the following linears."""
    out = model.clone()
    for lw in out.layers:
        for nm in ("wq", "wk", "wv"):
            setattr(lw, nm, lw.attn_norm[:, None] * getattr(lw, nm))
        lw.attn_norm = np.ones_like(lw.attn_norm)
        for nm in ("w_gate", "w_up"):
            setattr(lw, nm, lw.mlp_norm[:, None] * getattr(lw, nm))
        lw.mlp_norm = np.ones_like(lw.mlp_norm)
    head = out.lm_head if out.lm_head is not None else out.embedding.T
    out.lm_head = out.final_norm[:, None] * head
    out.final_norm = np.ones_like(out.final_norm)
    return out


def _check_folded(model: ModelGraph, op: str) -> None:
    ok = all(np.allclose(lw.attn_norm, 1.0) and np.allclose(lw.mlp_norm, 1.0)
             for lw in model.layers) and np.allclose(model.final_norm, 1.0)
    if not ok:
        raise ValueError(f"{op} requires fold_norm_weights first")


def merge_r1(model: ModelGraph, r1) -> ModelGraph:
    """Fold a square orthogonal residual-stream rotation into the linears."""
    r1 = np.asarray(r1, dtype=np.float64)
    d = model.config.d_model
    if r1.shape != (d, d):
        raise ValueError(f"r1 must be ({d}, {d}), got {r1.shape}")
    gram = r1.T @ r1
    if np.max(np.abs(gram - np.eye(d))) > 1e-6:
        raise ValueError("r1 failed the orthogonality check at 1e-6")
    _check_folded(model, "merge_r1")
    out = model.clone()
    out.embedding = out.embedding @ r1
    if out.lm_head is not None:
        out.lm_head = r1.T @ out.lm_head
    for lw in out.layers:
        for nm in ("wq", "wk", "wv", "w_gate", "w_up"):
            setattr(lw, nm, r1.T @ getattr(lw, nm))
        lw.wo = lw.wo @ r1
        lw.w_down = lw.w_down @ r1
    out.rotation_plan.r1 = r1.copy()
    return out


def expand_r2(model: ModelGraph, expanded_head_dim: int) -> ModelGraph:
    """Expand the per-head value space via a merged rectangular rotation."""
    c = model.config
    if model.rotation_plan.r2 is not None:
        raise ValueError("r2 already applied")
    if expanded_head_dim < c.head_dim:
        raise ValueError("expanded_head_dim must be >= head_dim")
    rot = build_expanded(c.head_dim, expanded_head_dim)
    out = model.clone()
    hd, ehd = c.head_dim, expanded_head_dim
    for lw in out.layers:
        v_blocks = [apply_right(lw.wv[:, i * hd:(i + 1) * hd], rot)
                    for i in range(c.n_kv_heads)]
        lw.wv = np.concatenate(v_blocks, axis=1)
        o_blocks = [apply_left_transpose(lw.wo[i * hd:(i + 1) * hd, :], rot)
                    for i in range(c.n_heads)]
        lw.wo = np.concatenate(o_blocks, axis=0)
    out.head_dim_v = ehd
    out.rotation_plan.r2 = rot
    return out


def merge_r2_square(model: ModelGraph, r2) -> ModelGraph:
    """Fold a square orthogonal value-space rotation into wv/wo per head."""
    c = model.config
    hd = model.head_dim_v
    r2 = np.asarray(r2, dtype=np.float64)
    if r2.shape != (hd, hd):
        raise ValueError(f"r2 must be ({hd}, {hd}), got {r2.shape}")
    if np.max(np.abs(r2.T @ r2 - np.eye(hd))) > 1e-6:
        raise ValueError("r2 failed the orthogonality check at 1e-6")
    out = model.clone()
    for lw in out.layers:
        for kv in range(c.n_kv_heads):
            lw.wv[:, kv * hd:(kv + 1) * hd] = lw.wv[:, kv * hd:(kv + 1) * hd] @ r2
        for qh in range(c.n_heads):
            lw.wo[qh * hd:(qh + 1) * hd, :] = r2.T @ lw.wo[qh * hd:(qh + 1) * hd, :]
    return out


def expand_r4(model: ModelGraph, expanded_ffn: int) -> ModelGraph:
    """Expand the down-projection input via an online rotation.

    The rotation of the activations happens in the forward pass; the weight
    side is merged here, so the pass adds exactly one online transform and
    (expanded_ffn - d_ffn) * d_model parameters per layer.
    """
    c = model.config
    if model.rotation_plan.r4 is not None:
        raise ValueError("r4 already applied")
    if expanded_ffn < c.d_ffn:
        raise ValueError("expanded_ffn must be >= d_ffn")
    rot = build_expanded(c.d_ffn, expanded_ffn)
    out = model.clone()
    for lw in out.layers:
        lw.w_down = apply_left_transpose(lw.w_down, rot)
    out.d_ffn_eff = expanded_ffn
    out.rotation_plan.r4 = rot
    return out


# ---------------------------------------------------------------------------
# calibration and quantization
# ---------------------------------------------------------------------------

def capture_layer_inputs(model: ModelGraph, tokens, n_samples: int = 128,
                         seq_len: int = 2048) -> dict[str, np.ndarray]:
    """Stacked per-linear input activations over calibration windows."""
    tokens = np.asarray(tokens)
    needed = n_samples * seq_len
    if tokens.size < needed:
        raise ValueError(
            f"need {needed} calibration tokens, got {tokens.size}")
    captures: dict[str, list] = {}
    for s in range(n_samples):
        forward_logits(model, tokens[s * seq_len:(s + 1) * seq_len], captures)
    return {k: np.concatenate(v, axis=0) for k, v in captures.items()}


def quantize_model(model: ModelGraph, scheme: QuantScheme, use_gptq: bool,
                   act_order: bool = False,
                   calib: dict[str, np.ndarray] | None = None,
                   damping_frac: float = 0.01,
                   quantize_activations: bool = True) -> ModelGraph:
    """Replace every per-layer linear with its dequantized quantized weights.

    GPTQ needs `calib` from capture_layer_inputs on the rewritten model.
    Norms, embedding, LM head and the KV cache stay in high precision.
    Activation fake-quantizers (per-token asym INT4, or MXFP4) are enabled
    on all linear inputs unless quantize_activations is False.
    """
    if scheme.kind not in ("int4_sym_per_channel", "mxfp4"):
        raise ValueError(f"{scheme.kind} is not a weight scheme")
    if use_gptq and calib is None:
        raise ValueError("GPTQ requires captured calibration activations")
    out = model.clone()
    for li, lw in enumerate(out.layers):
        for nm in LINEAR_NAMES:
            w = getattr(lw, nm)
            if use_gptq:
                x = calib[f"layers.{li}.{nm}"]
                state = gptq_mod.accumulate(gptq_mod.hessian_init(w.shape[0]), x)
                h = gptq_mod.finalize(state, damping_frac)
                qt = gptq_mod.gptq_quantize(w, h, scheme, act_order=act_order)
            else:
                qt = (quantize_int4_sym_per_channel(w)
                      if scheme.kind == "int4_sym_per_channel"
                      else quantize_mxfp4(w, group_axis=0))
            setattr(lw, nm, dequantize(qt))
    if quantize_activations:
        out.act_scheme = MXFP4 if scheme.kind == "mxfp4" else INT4_ASYM
    return out


def count_params(model: ModelGraph) -> int:
    """Total parameters; the tied LM head is excluded (shared weights)."""
    total = model.embedding.size + model.final_norm.size
    for lw in model.layers:
        for nm in ("attn_norm", "mlp_norm") + LINEAR_NAMES:
            total += getattr(lw, nm).size
    if model.lm_head is not None and not model.config.tied_embeddings:
        total += model.lm_head.size
    return int(total)


def weight_volume_items(model: ModelGraph, scheme: QuantScheme | None):
    """(count, scheme, channels) accounting entries for volume_bits.

    Per-layer linears quantize under `scheme`; embedding, norms and the
    (tied-excluded) LM head stay 16-bit. scheme None = all 16-bit.
    """
    items = [(model.embedding.size, None), (model.final_norm.size, None)]
    if model.lm_head is not None and not model.config.tied_embeddings:
        items.append((model.lm_head.size, None))
    for lw in model.layers:
        items.append((lw.attn_norm.size + lw.mlp_norm.size, None))
        for nm in LINEAR_NAMES:
            w = getattr(lw, nm)
            if scheme is None:
                items.append((w.size, None))
            elif scheme.kind == "int4_sym_per_channel":
                items.append((w.size, scheme, w.shape[1]))
            else:
                items.append((w.size, scheme))
    return items
