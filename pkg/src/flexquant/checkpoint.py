"""Weight container file.

Layout::

    flexquant-weights v1\\n
    key=value\\n ...            model config, one field per line
    end-config\\n
    record*                     until EOF

    record := u16 name_len | name (utf-8) | u8 dtype | u8 ndim | u32 dim * ndim
              | u64 nbytes | payload

All integers are little-endian. ``dtype`` 0 is float32 (row-major);
``dtype`` 1 is a quantized tensor in the quantizer's per-tensor encoding
(header ``bits:u8 mode:u8 rows:u32 cols:u32``, f32 scale per row, i32 zero
point per row, packed codes). Linear layer ``L`` stores ``L.weight``,
``L.bias``, ``L.w8`` and ``L.w4``.
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import FP_BITS, LINEAR_NAMES, Block, ModelConfig, MultiPrecisionLayer, TinyTransformer
from .quantizer import QuantizedTensor

WEIGHTS_HEADER = "flexquant-weights v1"
DTYPE_F32 = 0
DTYPE_QUANT = 1


def _encode_record(name: str, value) -> bytes:
    raw_name = name.encode("utf-8")
    if isinstance(value, QuantizedTensor):
        dtype, shape, payload = DTYPE_QUANT, value.shape, value.to_bytes()
    else:
        arr = np.ascontiguousarray(value, dtype="<f4")
        dtype, shape, payload = DTYPE_F32, arr.shape, arr.tobytes()
    return b"".join([
        struct.pack("<H", len(raw_name)), raw_name,
        struct.pack("<BB", dtype, len(shape)),
        struct.pack(f"<{len(shape)}I", *shape),
        struct.pack("<Q", len(payload)), payload,
    ])


def _config_lines(cfg: ModelConfig) -> list[str]:
    return [f"{k}={v}" for k, v in cfg.to_dict().items()]


def _parse_config(lines: list[str]) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    kwargs = {}
    for ln in lines:
        key, sep, val = ln.partition("=")
        if not sep or key not in types:
            raise FormatError(f"bad config line {ln!r}")
        if key == "tie_head":
            kwargs[key] = val == "True"
        elif key == "quant_mode":
            kwargs[key] = val
        else:
            kwargs[key] = int(val)
    return ModelConfig(**kwargs)


def model_tensors(model: TinyTransformer) -> dict[str, object]:
    out: dict[str, object] = {"tok_emb": model.tok_emb, "pos_emb": model.pos_emb}
    for i, blk in enumerate(model.blocks):
        for attr in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            out[f"blocks.{i}.{attr}"] = getattr(blk, attr)
    for lid, layer in model.linears.items():
        out[f"{lid}.weight"] = layer.available[FP_BITS]
        out[f"{lid}.bias"] = layer.bias
        for bits in (8, 4):
            out[f"{lid}.w{bits}"] = layer.available[bits]
    out["ln_f_g"] = model.ln_f_g
    out["ln_f_b"] = model.ln_f_b
    if model.head is not None:
        out["head"] = model.head
    return out


def dumps_model(model: TinyTransformer) -> bytes:
    text = "\n".join([WEIGHTS_HEADER, *_config_lines(model.config), "end-config"]) + "\n"
    return text.encode("ascii") + b"".join(_encode_record(k, v) for k, v in model_tensors(model).items())


def save_model(model: TinyTransformer, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def read_records(buf: bytes) -> tuple[ModelConfig, dict[str, object]]:
    lines, pos = [], 0
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise FormatError("unterminated config preamble")
        line = buf[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if not lines and line != WEIGHTS_HEADER:
            raise FormatError(f"weights file must start with {WEIGHTS_HEADER!r}")
        if line == "end-config":
            break
        lines.append(line)
    config = _parse_config(lines[1:])

    tensors: dict[str, object] = {}
    try:
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + nbytes > len(buf):
                raise FormatError(f"record {name!r} truncated")
            if dtype == DTYPE_F32:
                if nbytes != 4 * int(np.prod(shape)):
                    raise FormatError(f"record {name!r}: {nbytes} bytes for shape {shape}")
                tensors[name] = np.frombuffer(buf, "<f4", int(np.prod(shape)), pos).reshape(shape).astype(np.float32)
            elif dtype == DTYPE_QUANT:
                qt, end = QuantizedTensor.from_bytes(buf[:pos + nbytes], pos)
                if end != pos + nbytes or qt.shape != tuple(shape):
                    raise FormatError(f"record {name!r}: quantized body does not match its header")
                tensors[name] = qt
            else:
                raise FormatError(f"record {name!r}: unknown dtype tag {dtype}")
            pos += nbytes
    except struct.error as exc:
        raise FormatError("truncated record header") from exc
    return config, tensors


def loads_model(buf: bytes) -> TinyTransformer:
    config, t = read_records(buf)
    try:
        blocks = [
            Block(*(t[f"blocks.{i}.{a}"] for a in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")))
            for i in range(config.n_layers)
        ]
        linears = {}
        for name in sorted({k.rsplit(".", 1)[0] for k in t if k.endswith(".weight")}):
            linears[name] = MultiPrecisionLayer(
                name, t[f"{name}.weight"], t[f"{name}.bias"], config.quant_mode,
                quantized={8: t[f"{name}.w8"], 4: t[f"{name}.w4"]},
            )
        # keep forward order stable regardless of record order
        order = [f"blocks.{i}.{n}" for i in range(config.n_layers) for n in LINEAR_NAMES]
        linears = {k: linears[k] for k in order}
        return TinyTransformer(config, t["tok_emb"], t["pos_emb"], blocks, linears,
                               t["ln_f_g"], t["ln_f_b"], t.get("head"))
    except KeyError as exc:
        raise FormatError(f"weights file is missing tensor {exc.args[0]!r}") from exc


def load_model(path) -> TinyTransformer:
    return loads_model(Path(path).read_bytes())
