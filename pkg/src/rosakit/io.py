"""Binary artifact formats and CSV emission.

All multi-byte values are little-endian. Three magics:

  RSMK  mask file: u32 version, u32 rows, u32 cols, u64 nnz,
        row_offsets u32 x (rows+1), col_indices u32 x nnz,
        flag byte (1 = values follow), values f32 x nnz.
  RSQ4  quantized base block: u32 group_size, u32 rows, u32 cols,
        codes packed two per byte (two's-complement nibbles),
        scale codes u8 x n_groups, meta scales f32 x n_blocks.
  RSCK  adapter checkpoint: u32 version, u32 layer count; per layer a
        length-prefixed UTF-8 name, flags byte (bit0 low-rank, bit1 sparse,
        bit2 quantized base), u32 m, u32 n, u32 r, f32 lora_alpha, the B
        and A factors (f32 row-major) when bit0, an embedded RSMK block
        when bit1, and an embedded RSQ4 block when bit2.

Floats in CSV output are printed with 9 significant digits so reruns can
be diffed bytewise. Writes go through a temp file plus rename, so readers
never observe partial artifacts.
"""

from __future__ import annotations

import io as _io
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .models import ModelSpec
from .quant import QuantizedMatrix, _ceil_div
from .sparse import CsrMatrix

MASK_MAGIC = b"RSMK"
QUANT_MAGIC = b"RSQ4"
CKPT_MAGIC = b"RSCK"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_float(x) -> str:
    return "%.9g" % float(x)


def write_csv(path: str, header, rows) -> None:
    buf = _io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        cells = []
        for cell in row:
            if cell is None:
                cells.append("")
            elif isinstance(cell, (float, np.floating)):
                cells.append(format_float(cell))
            else:
                cells.append(str(cell))
        buf.write(",".join(cells) + "\n")
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _expect_magic(fh, magic: bytes, path: str) -> None:
    got = fh.read(4)
    if got != magic:
        raise FormatError(
            f"{path}: wrong file type, expected magic {magic.decode()} got {got!r}"
        )


def _read_exact(fh, count: int, path: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: truncated, wanted {count} bytes got {len(data)}")
    return data


# ---------------------------------------------------------------- masks


def mask_to_bytes(mask: CsrMatrix, include_values: bool = True) -> bytes:
    out = bytearray()
    out += MASK_MAGIC
    out += struct.pack("<IIIQ", FORMAT_VERSION, mask.rows, mask.cols, mask.nnz)
    out += mask.row_offsets.astype("<u4").tobytes()
    out += mask.col_indices.astype("<u4").tobytes()
    out += struct.pack("<B", 1 if include_values else 0)
    if include_values:
        out += mask.values.astype("<f4").tobytes()
    return bytes(out)


def mask_from_stream(fh, path: str = "<stream>") -> CsrMatrix:
    _expect_magic(fh, MASK_MAGIC, path)
    version, rows, cols, nnz = struct.unpack("<IIIQ", _read_exact(fh, 20, path))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported mask version {version}")
    row_offsets = np.frombuffer(_read_exact(fh, 4 * (rows + 1), path), dtype="<u4")
    col_indices = np.frombuffer(_read_exact(fh, 4 * nnz, path), dtype="<u4")
    (has_values,) = struct.unpack("<B", _read_exact(fh, 1, path))
    if has_values:
        values = np.frombuffer(_read_exact(fh, 4 * nnz, path), dtype="<f4").astype(np.float32)
    else:
        values = np.zeros(nnz, dtype=np.float32)
    try:
        return CsrMatrix(rows, cols, values, row_offsets.astype(np.int64), col_indices.astype(np.int64))
    except Exception as exc:
        raise FormatError(f"{path}: invalid CSR structure: {exc}") from exc


def write_mask(path: str, mask: CsrMatrix, include_values: bool = True) -> None:
    atomic_write_bytes(path, mask_to_bytes(mask, include_values))


def read_mask(path: str) -> CsrMatrix:
    with open(path, "rb") as fh:
        return mask_from_stream(fh, path)


# ------------------------------------------------------------ quantized


def quant_to_bytes(q: QuantizedMatrix) -> bytes:
    out = bytearray()
    out += QUANT_MAGIC
    out += struct.pack("<III", q.group_size, q.rows, q.cols)
    codes = q.codes
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.int8)])
    nibbles = codes.astype(np.int16) & 0xF
    packed = (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)
    out += packed.tobytes()
    out += q.scale_codes.astype("<u1").tobytes()
    out += q.meta_scales.astype("<f4").tobytes()
    return bytes(out)


def quant_from_stream(fh, path: str = "<stream>") -> QuantizedMatrix:
    _expect_magic(fh, QUANT_MAGIC, path)
    group_size, rows, cols = struct.unpack("<III", _read_exact(fh, 12, path))
    numel = rows * cols
    packed = np.frombuffer(_read_exact(fh, _ceil_div(numel, 2), path), dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.int8)
    nibbles[0::2] = (packed & 0xF).astype(np.int8)
    nibbles[1::2] = (packed >> 4).astype(np.int8)
    nibbles[nibbles >= 8] -= 16
    codes = nibbles[:numel]
    n_groups = _ceil_div(numel, group_size)
    n_blocks = _ceil_div(n_groups, 256)
    scale_codes = np.frombuffer(_read_exact(fh, n_groups, path), dtype="<u1")
    meta = np.frombuffer(_read_exact(fh, 4 * n_blocks, path), dtype="<f4")
    return QuantizedMatrix(rows, cols, group_size, codes, scale_codes, meta)


def write_quantized(path: str, q: QuantizedMatrix) -> None:
    atomic_write_bytes(path, quant_to_bytes(q))


def read_quantized(path: str) -> QuantizedMatrix:
    with open(path, "rb") as fh:
        return quant_from_stream(fh, path)


# ----------------------------------------------------------- checkpoint

FLAG_LOWRANK = 1
FLAG_SPARSE = 2
FLAG_QUANTIZED = 4


def checkpoint_to_bytes(model) -> bytes:
    """Serialize the adapters (and any quantized base) of a model."""
    layers = model.adapted_layers()
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<II", FORMAT_VERSION, len(layers))
    for name, rosa in layers:
        encoded = name.encode("utf-8")
        flags = 0
        if rosa.lowrank is not None:
            flags |= FLAG_LOWRANK
        if rosa.sparse is not None:
            flags |= FLAG_SPARSE
        if rosa.quantized:
            flags |= FLAG_QUANTIZED
        m, n = rosa.shape
        r = rosa.lowrank.rank if rosa.lowrank is not None else 0
        alpha = rosa.lowrank.lora_alpha if rosa.lowrank is not None else 0.0
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<BIIIf", flags, m, n, r, alpha)
        if rosa.lowrank is not None:
            out += rosa.lowrank.B.astype("<f4").tobytes()
            out += rosa.lowrank.A.astype("<f4").tobytes()
        if rosa.sparse is not None:
            out += mask_to_bytes(rosa.sparse.delta_s, include_values=True)
        if rosa.quantized:
            out += quant_to_bytes(rosa.base)
    return bytes(out)


def write_checkpoint(path: str, model) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(model))


def read_checkpoint(path: str) -> dict:
    """Parse a checkpoint into {layer_name: record} with keys m, n, r,
    lora_alpha, B, A, sparse (CsrMatrix), quant (QuantizedMatrix)."""
    layers: dict[str, dict] = {}
    with open(path, "rb") as fh:
        _expect_magic(fh, CKPT_MAGIC, path)
        version, count = struct.unpack("<II", _read_exact(fh, 8, path))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            flags, m, n, r, alpha = struct.unpack("<BIIIf", _read_exact(fh, 17, path))
            rec: dict = {"m": m, "n": n, "r": r, "lora_alpha": alpha,
                         "B": None, "A": None, "sparse": None, "quant": None}
            if flags & FLAG_LOWRANK:
                rec["B"] = np.frombuffer(_read_exact(fh, 4 * m * r, path), dtype="<f4").reshape(m, r).astype(np.float32)
                rec["A"] = np.frombuffer(_read_exact(fh, 4 * r * n, path), dtype="<f4").reshape(r, n).astype(np.float32)
            if flags & FLAG_SPARSE:
                rec["sparse"] = mask_from_stream(fh, path)
            if flags & FLAG_QUANTIZED:
                rec["quant"] = quant_from_stream(fh, path)
            layers[name] = rec
    return layers


def apply_checkpoint(model, records: dict) -> None:
    """Load adapter values from parsed checkpoint records into a model with
    matching architecture; sparse supports are attached where missing."""
    for name, layer in model.fc_layers():
        if name not in records:
            raise FormatError(f"checkpoint missing layer {name!r}")
        rec = records[name]
        rosa = layer.rosa
        if rosa.shape != (rec["m"], rec["n"]):
            raise FormatError(f"layer {name!r}: checkpoint shape {(rec['m'], rec['n'])} vs model {rosa.shape}")
        if rec["B"] is not None:
            np.copyto(rosa.lowrank.B, rec["B"])
            np.copyto(rosa.lowrank.A, rec["A"])
            rosa.lowrank.lora_alpha = rec["lora_alpha"]
        if rec["sparse"] is not None:
            if rosa.sparse is None:
                layer.attach_sparse(rec["sparse"])
            np.copyto(rosa.sparse.delta_s.values, rec["sparse"].values.astype(rosa.dtype))


# --------------------------------------------------------- model bundle


def save_model_bundle(path: str, spec: ModelSpec, weights: dict) -> None:
    """Dense model weights plus the architecture, as an npz."""
    meta = json.dumps(
        {
            "kind": spec.kind,
            "layer_dims": list(spec.layer_dims),
            "activation": spec.activation,
            "d_model": spec.d_model,
            "n_heads": spec.n_heads,
            "n_layers": spec.n_layers,
            "vocab": spec.vocab,
            "context": spec.context,
        }
    )
    buf = _io.BytesIO()
    np.savez(buf, __model_spec__=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **weights)
    atomic_write_bytes(path, buf.getvalue())


def load_model_bundle(path: str) -> tuple[ModelSpec, dict]:
    try:
        with np.load(path) as npz:
            if "__model_spec__" not in npz:
                raise FormatError(f"{path}: wrong file type, not a model bundle")
            meta = json.loads(bytes(npz["__model_spec__"]).decode("utf-8"))
            weights = {k: npz[k] for k in npz.files if k != "__model_spec__"}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read model bundle: {exc}") from exc
    spec = ModelSpec(
        kind=meta["kind"],
        layer_dims=tuple(meta["layer_dims"]),
        activation=meta["activation"],
        d_model=meta["d_model"],
        n_heads=meta["n_heads"],
        n_layers=meta["n_layers"],
        vocab=meta["vocab"],
        context=meta["context"],
    )
    return spec, weights


def read_matrix(path: str, shape=None) -> np.ndarray:
    """A dense f64 matrix from either a model-bundle npz (single weight or
    named via 'path::name') or a raw little-endian f32 binary with an
    explicit shape."""
    if "::" in path:
        file_part, key = path.split("::", 1)
        _, weights = load_model_bundle(file_part)
        if key not in weights:
            raise FormatError(f"{file_part}: no weight named {key!r} (have {sorted(weights)})")
        return np.asarray(weights[key], dtype=np.float64)
    if path.endswith(".npz"):
        _, weights = load_model_bundle(path)
        if len(weights) != 1:
            raise FormatError(f"{path}: has {len(weights)} weights, name one with '::<layer>'")
        return np.asarray(next(iter(weights.values())), dtype=np.float64)
    if shape is None:
        raise FormatError(f"{path}: raw binary input needs an explicit shape")
    data = np.fromfile(path, dtype="<f4")
    if data.size != shape[0] * shape[1]:
        raise FormatError(f"{path}: {data.size} floats, expected {shape[0] * shape[1]}")
    return data.reshape(shape).astype(np.float64)
