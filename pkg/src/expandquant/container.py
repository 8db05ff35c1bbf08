"""EXQ1 tensor container: a trivially parseable little-endian binary format.

Layout (all integers little-endian):

    magic   4 bytes  "EXQ1" (0x45 0x58 0x51 0x31)
    version u32      currently 1
    count   u32      number of tensors
    per tensor manifest entry:
        name_len u16, name UTF-8 bytes,
        dtype u8 (0=f64, 1=f32, 2=u32, 3=packed-4bit, 4=u8),
        rank u8, dims rank*u64, data_offset u64 (absolute file offset)
    data section: each tensor's bytes, 64-byte aligned

dtype 3 stores two 4-bit codes per byte (low nibble = even flat index) with
logical dims; its byte length is ceil(prod(dims)/2). dtype 4 (u8) is an
extension used for E8M0 scale bytes. Model files carry a JSON sidecar
(path + ".json") with the architecture config and rewrite metadata.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"EXQ1"
VERSION = 1
ALIGN = 64

DT_F64, DT_F32, DT_U32, DT_PACKED4, DT_U8 = 0, 1, 2, 3, 4

_NUMPY_OF = {DT_F64: "<f8", DT_F32: "<f4", DT_U32: "<u4", DT_U8: "u1"}


@dataclass
class TensorEntry:
    name: str
    dtype: int
    dims: tuple[int, ...]
    payload: bytes


def entry_from_array(name: str, arr: np.ndarray) -> TensorEntry:
    """Entry for a dense array; dtype is taken from the array."""
    kind = {np.dtype("float64"): DT_F64, np.dtype("float32"): DT_F32,
            np.dtype("uint32"): DT_U32, np.dtype("uint8"): DT_U8}
    dt = kind.get(arr.dtype)
    if dt is None:
        raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    le = arr.astype(_NUMPY_OF[dt], copy=False)
    return TensorEntry(name, dt, tuple(arr.shape), np.ascontiguousarray(le).tobytes())


def entry_packed4(name: str, packed: np.ndarray, dims: tuple[int, ...]) -> TensorEntry:
    expected = (int(np.prod(dims)) + 1) // 2
    if packed.dtype != np.uint8 or packed.size != expected:
        raise ValueError(f"packed payload for {name!r} must be {expected} uint8 bytes")
    return TensorEntry(name, DT_PACKED4, tuple(dims), packed.tobytes())


def write_container(path, entries: list[TensorEntry]) -> None:
    manifest_size = len(MAGIC) + 8
    for e in entries:
        manifest_size += 2 + len(e.name.encode()) + 1 + 1 + 8 * len(e.dims) + 8
    offsets = []
    pos = manifest_size
    for e in entries:
        pos = (pos + ALIGN - 1) // ALIGN * ALIGN
        offsets.append(pos)
        pos += len(e.payload)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for e, off in zip(entries, offsets):
            name = e.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", e.dtype, len(e.dims)))
            for d in e.dims:
                fh.write(struct.pack("<Q", d))
            fh.write(struct.pack("<Q", off))
        for e, off in zip(entries, offsets):
            fh.write(b"\x00" * (off - fh.tell()))
            fh.write(e.payload)


def read_container(path) -> dict[str, TensorEntry]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, TensorEntry] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode()
        pos += name_len
        dtype, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        (off,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        numel = int(np.prod(dims)) if rank else 1
        nbytes = (numel + 1) // 2 if dtype == DT_PACKED4 \
            else numel * np.dtype(_NUMPY_OF[dtype]).itemsize
        out[name] = TensorEntry(name, dtype, tuple(int(d) for d in dims),
                                blob[off:off + nbytes])
    return out


def as_array(entry: TensorEntry) -> np.ndarray:
    if entry.dtype == DT_PACKED4:
        raise ValueError(f"{entry.name!r} is packed-4bit; unpack explicitly")
    arr = np.frombuffer(entry.payload, dtype=_NUMPY_OF[entry.dtype])
    return arr.reshape(entry.dims).copy()


def packed_bytes(entry: TensorEntry) -> np.ndarray:
    if entry.dtype != DT_PACKED4:
        raise ValueError(f"{entry.name!r} is not packed-4bit")
    return np.frombuffer(entry.payload, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# model and token file I/O
# ---------------------------------------------------------------------------

def _sidecar(path) -> str:
    return str(path) + ".json"


def save_model(model, path, extra_meta: dict | None = None) -> None:
    """Write a float model container plus its JSON config sidecar."""
    entries = [entry_from_array("embedding", model.embedding),
               entry_from_array("final_norm", model.final_norm)]
    if model.lm_head is not None:
        entries.append(entry_from_array("lm_head", model.lm_head))
    for i, lw in enumerate(model.layers):
        for nm in ("attn_norm", "wq", "wk", "wv", "wo",
                   "mlp_norm", "w_gate", "w_up", "w_down"):
            entries.append(entry_from_array(f"layers.{i}.{nm}", getattr(lw, nm)))
    write_container(path, entries)
    plan = model.rotation_plan
    meta = {
        "config": asdict(model.config),
        "format": "float",
        "head_dim_v": model.head_dim_v,
        "d_ffn_eff": model.d_ffn_eff,
        "r2_dim": plan.r2.m if plan.r2 is not None else None,
        "r4_dim": plan.r4.m if plan.r4 is not None else None,
        "act_scheme": model.act_scheme.kind if model.act_scheme else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(_sidecar(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Read a float model container written by save_model."""
    from .hadamard import build_expanded
    from .model import LayerWeights, ModelGraph, RotationPlan, TinyLlmConfig
    from .quantizers import INT4_ASYM, MXFP4

    with open(_sidecar(path)) as fh:
        meta = json.load(fh)
    config = TinyLlmConfig(**meta["config"])
    tensors = read_container(path)
    layers = []
    for i in range(config.n_layers):
        fields = {nm: as_array(tensors[f"layers.{i}.{nm}"])
                  for nm in ("attn_norm", "wq", "wk", "wv", "wo",
                             "mlp_norm", "w_gate", "w_up", "w_down")}
        layers.append(LayerWeights(**fields))
    plan = RotationPlan()
    if meta.get("r2_dim"):
        plan.r2 = build_expanded(config.head_dim, meta["r2_dim"])
    if meta.get("r4_dim"):
        plan.r4 = build_expanded(config.d_ffn, meta["r4_dim"])
    act = meta.get("act_scheme")
    model = ModelGraph(
        config=config,
        embedding=as_array(tensors["embedding"]),
        layers=layers,
        final_norm=as_array(tensors["final_norm"]),
        lm_head=as_array(tensors["lm_head"]) if "lm_head" in tensors else None,
        rotation_plan=plan,
        head_dim_v=meta.get("head_dim_v", 0),
        d_ffn_eff=meta.get("d_ffn_eff", 0),
        act_scheme={"int4_asym_per_token": INT4_ASYM, "mxfp4": MXFP4}.get(act),
    )
    return model


def save_quantized_artifact(model, quantized_tensors: dict, path) -> None:
    """Packed-code artifact: codes + scales per linear, float rest."""
    entries = [entry_from_array("embedding", model.embedding),
               entry_from_array("final_norm", model.final_norm)]
    if model.lm_head is not None:
        entries.append(entry_from_array("lm_head", model.lm_head))
    for i, lw in enumerate(model.layers):
        entries.append(entry_from_array(f"layers.{i}.attn_norm", lw.attn_norm))
        entries.append(entry_from_array(f"layers.{i}.mlp_norm", lw.mlp_norm))
    for name, qt in quantized_tensors.items():
        entries.append(entry_packed4(f"{name}.codes", qt.codes, (qt.rows, qt.cols)))
        entries.append(entry_from_array(f"{name}.scales",
                                        np.asarray(qt.scales, dtype=np.float32)))
        if qt.zero_points is not None:
            entries.append(entry_from_array(f"{name}.zero_points",
                                            qt.zero_points.astype(np.uint32)))
        if qt.scale_exponents is not None:
            e8m0 = (qt.scale_exponents.astype(np.int32) + 127).astype(np.uint8)
            entries.append(entry_from_array(f"{name}.scale_e8m0", e8m0))
    write_container(path, entries)


def save_tokens(tokens, path) -> None:
    np.asarray(tokens, dtype="<u4").tofile(path)


def load_tokens(path) -> np.ndarray:
    return np.fromfile(path, dtype="<u4").astype(np.int64)
