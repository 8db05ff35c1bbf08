"""Bit-exact quantize/dequantize for INT4 and OCP MXFP4 schemes.

Conventions (shared across the package):

  * weight matrices are (input_dims, output_channels); per-channel symmetric
    scales live on output channels, MXFP4 weight groups run along the input
    axis (group_axis=0)
  * activation matrices are (tokens, features); per-token asymmetric scales
    live on rows, MXFP4 activation groups run along the feature axis
    (group_axis=1)
  * rounding is round-half-to-even everywhere; all-zero channels / tokens /
    groups use the sentinel scale 1 (E8M0 code 127) so zero reconstructs
    exactly
"""

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ._kernels import E2M1_VALUES, e2m1_decode, e2m1_encode
from .numerics import as_matrix

MXFP4_GROUP = 32
E8M0_BIAS = 127


@dataclass(frozen=True)
class QuantScheme:
    kind: str  # int4_sym_per_channel | int4_asym_per_token | mxfp4
    group_size: int = 0

    def __post_init__(self):
        kinds = ("int4_sym_per_channel", "int4_asym_per_token", "mxfp4")
        if self.kind not in kinds:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "mxfp4" and self.group_size != MXFP4_GROUP:
            raise ValueError("mxfp4 requires group_size=32")


INT4_SYM = QuantScheme("int4_sym_per_channel")
INT4_ASYM = QuantScheme("int4_asym_per_token")
MXFP4 = QuantScheme("mxfp4", MXFP4_GROUP)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Pack 4-bit codes (flat row-major) two per byte, low nibble first."""
    flat = (np.asarray(codes).ravel() & 0xF).astype(np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int, signed: bool) -> np.ndarray:
    """Inverse of pack_nibbles; sign-extends when the codes are int4."""
    packed = np.asarray(packed, dtype=np.uint8)
    lo = packed & 0xF
    hi = packed >> 4
    flat = np.empty(packed.size * 2, dtype=np.uint8)
    flat[0::2] = lo
    flat[1::2] = hi
    flat = flat[:count]
    if signed:
        out = flat.astype(np.int8)
        out[out > 7] -= 16
        return out
    return flat


@dataclass
class QuantizedTensor:
    """Packed 4-bit codes plus the metadata needed for exact dequantization."""

    codes: np.ndarray                       # packed uint8
    scales: np.ndarray                      # per channel / token / group grid
    scheme: QuantScheme
    rows: int
    cols: int
    zero_points: np.ndarray | None = None   # per token, asym only
    scale_exponents: np.ndarray | None = None  # E8M0 codes, mxfp4 only
    group_axis: int = 0                     # mxfp4 only

    def unpacked(self) -> np.ndarray:
        signed = self.scheme.kind == "int4_sym_per_channel"
        flat = unpack_nibbles(self.codes, self.rows * self.cols, signed)
        return flat.reshape(self.rows, self.cols)


def _rne(x: np.ndarray) -> np.ndarray:
    return np.round(x)  # numpy rounds half to even


def quantize_int4_sym_per_channel(w) -> QuantizedTensor:
    """Symmetric INT4, one scale per output channel (column)."""
    w = as_matrix(w, "w")
    amax = np.max(np.abs(w), axis=0)
    scales = np.where(amax > 0.0, amax / 7.0, 1.0)
    codes = np.clip(_rne(w / scales), -8, 7).astype(np.int8)
    return QuantizedTensor(
        codes=pack_nibbles(codes), scales=scales, scheme=INT4_SYM,
        rows=w.shape[0], cols=w.shape[1],
    )


def quantize_int4_asym_per_token(x) -> QuantizedTensor:
    """Asymmetric INT4, one (scale, zero point) per token (row)."""
    x = as_matrix(x, "x")
    mn = np.min(x, axis=1)
    mx = np.max(x, axis=1)
    scales = np.where(mx > mn, (mx - mn) / 15.0, 1.0)
    zps = np.clip(_rne(-mn / scales), 0, 15).astype(np.uint8)
    codes = np.clip(
        _rne(x / scales[:, None]) + zps[:, None], 0, 15
    ).astype(np.uint8)
    return QuantizedTensor(
        codes=pack_nibbles(codes), scales=scales, scheme=INT4_ASYM,
        rows=x.shape[0], cols=x.shape[1], zero_points=zps,
    )


def _group_reduce_shape(length: int) -> int:
    return -(-length // MXFP4_GROUP)


def mxfp4_shared_exponents(t: np.ndarray, group_axis: int) -> np.ndarray:
    """E8M0 exponents per 32-element group (axis conceptually zero-padded)."""
    work = t if group_axis == 1 else t.T
    rows, length = work.shape
    ngroups = _group_reduce_shape(length)
    padded = np.zeros((rows, ngroups * MXFP4_GROUP))
    padded[:, :length] = np.abs(work)
    amax = padded.reshape(rows, ngroups, MXFP4_GROUP).max(axis=2)
    _, exp = np.frexp(amax)
    exps = np.clip(exp - 1 - 2, -127, 127).astype(np.int16)  # floor(log2)-emax
    exps[amax == 0.0] = 0  # sentinel: scale 1, E8M0 code 127
    return exps if group_axis == 1 else exps.T


def quantize_mxfp4(t, group_axis: int = 0) -> QuantizedTensor:
    """OCP MXFP4: E2M1 elements with one E8M0 scale per group of 32."""
    t = as_matrix(t, "t")
    if not np.all(np.isfinite(t)):
        raise ValueError("mxfp4 input must be finite (no NaN/Inf)")
    if group_axis not in (0, 1):
        raise ValueError(f"group_axis must be 0 or 1, got {group_axis}")
    exps = mxfp4_shared_exponents(t, group_axis)
    scales = np.ldexp(1.0, exps.astype(np.int32))
    elem_scales = _broadcast_groups(scales, t.shape, group_axis)
    codes = e2m1_encode(t / elem_scales)
    return QuantizedTensor(
        codes=pack_nibbles(codes), scales=scales, scheme=MXFP4,
        rows=t.shape[0], cols=t.shape[1],
        scale_exponents=exps, group_axis=group_axis,
    )


def _broadcast_groups(grid: np.ndarray, shape: tuple, group_axis: int) -> np.ndarray:
    """Expand a per-group grid to per-element values of the given shape."""
    rows, cols = shape
    if group_axis == 1:
        return np.repeat(grid, MXFP4_GROUP, axis=1)[:, :cols]
    return np.repeat(grid, MXFP4_GROUP, axis=0)[:rows, :]


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Exact inverse of the affine/codebook maps."""
    kind = q.scheme.kind
    codes = q.unpacked()
    if kind == "int4_sym_per_channel":
        if codes.min() < -8 or codes.max() > 7:
            raise ValueError("corrupt int4 code range")
        return codes.astype(np.float64) * q.scales
    if kind == "int4_asym_per_token":
        return (codes.astype(np.float64) - q.zero_points[:, None]) \
            * q.scales[:, None]
    elem_scales = _broadcast_groups(q.scales, (q.rows, q.cols), q.group_axis)
    return e2m1_decode(codes) * elem_scales


def max_rounding_error(q: QuantizedTensor) -> float:
    """Largest |x - dequant(quant(x))| over in-range inputs (clamping excluded).

    int4: half the largest step; mxfp4: half the widest codebook gap (the
    4 -> 6 gap) at the largest group scale.
    """
    if q.scheme.kind == "mxfp4":
        return float(np.max(q.scales) * 1.0)
    return float(np.max(q.scales) / 2.0)


def round_trip(t, scheme: QuantScheme, group_axis: int = 0) -> np.ndarray:
    """Fake-quantization: dequantize(quantize(t)) under the given scheme."""
    if scheme.kind == "int4_sym_per_channel":
        return dequantize(quantize_int4_sym_per_channel(t))
    if scheme.kind == "int4_asym_per_token":
        return dequantize(quantize_int4_asym_per_token(t))
    return dequantize(quantize_mxfp4(t, group_axis=group_axis))


class FixedGridQuantizer:
    """Quantization grids frozen from a reference weight matrix.

    GPTQ computes scales on the original weights and keeps them fixed while
    the sweep rewrites values, so the row-at-a-time quantizer must reuse the
    frozen grid rather than refitting. Supports the two weight schemes.
    """

    def __init__(self, w_ref: np.ndarray, scheme: QuantScheme):
        w_ref = as_matrix(w_ref, "w_ref")
        self.scheme = scheme
        self.rows, self.cols = w_ref.shape
        if scheme.kind == "int4_sym_per_channel":
            amax = np.max(np.abs(w_ref), axis=0)
            self.scales = np.where(amax > 0.0, amax / 7.0, 1.0)
            self.scale_exponents = None
        elif scheme.kind == "mxfp4":
            self.scale_exponents = mxfp4_shared_exponents(w_ref, group_axis=0)
            self.scales = np.ldexp(1.0, self.scale_exponents.astype(np.int32))
        else:
            raise ValueError(f"{scheme.kind} is not a weight scheme")

    def _row_scales(self, i: int) -> np.ndarray:
        if self.scheme.kind == "int4_sym_per_channel":
            return self.scales
        return self.scales[i // MXFP4_GROUP, :]

    def quantize_row(self, i: int, values: np.ndarray):
        """Codes and exact dequantized values for input-dim row i."""
        s = self._row_scales(i)
        if self.scheme.kind == "int4_sym_per_channel":
            codes = np.clip(_rne(values / s), -8, 7).astype(np.int8)
            return codes, codes.astype(np.float64) * s
        codes = e2m1_encode(values / s)
        return codes, e2m1_decode(codes) * s

    def assemble(self, code_rows: np.ndarray) -> QuantizedTensor:
        """Wrap a full matrix of logical codes into a QuantizedTensor."""
        return QuantizedTensor(
            codes=pack_nibbles(code_rows), scales=self.scales,
            scheme=self.scheme, rows=self.rows, cols=self.cols,
            scale_exponents=self.scale_exponents, group_axis=0,
        )

    def max_rounding_error(self) -> float:
        if self.scheme.kind == "mxfp4":
            return float(np.max(self.scales) * 1.0)
        return float(np.max(self.scales) / 2.0)


def volume_bits(items: Iterable[tuple]) -> int:
    """Total stored bits for (count, scheme[, channels]) entries.

    Scheme None (or "bf16") counts 16 bits per parameter. Stored metadata:
    int4 per-channel adds 16 bits per channel scale (channel count required),
    per-token scales are runtime values and add nothing, mxfp4 adds 8 bits
    per group of 32.
    """
    total = 0
    for item in items:
        count, scheme = item[0], item[1]
        if count < 0:
            raise ValueError("parameter counts must be >= 0")
        if count == 0:
            continue
        if scheme is None or scheme == "bf16":
            total += 16 * count
            continue
        total += 4 * count
        if scheme.kind == "int4_sym_per_channel":
            if len(item) < 3:
                raise ValueError("int4 per-channel entries need a channel count")
            total += 16 * item[2]
        elif scheme.kind == "mxfp4":
            total += 8 * _group_reduce_shape(count)
    return total


def bf16_reference_bits(params: int) -> int:
    return 16 * params
