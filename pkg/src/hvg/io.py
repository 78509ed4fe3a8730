"""Named-tensor binary files, content hashes and run manifests.

The binary layout is: 4-byte magic ``HVGB``, a little-endian u32 header
length, a UTF-8 JSON header, then the raw little-endian payload. The header
carries a per-tensor manifest (name -> dtype, shape, byte offset into the
payload) plus arbitrary JSON metadata. Payload bytes are the tensors'
row-major little-endian data, so float tensors round-trip bit-exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np
import torch

MAGIC = b"HVGB"

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    "i64": np.int64,
    "i32": np.int32,
    "u8": np.uint8,
    "bool": np.bool_,
}
_TOKENS = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_named_tensors(path, tensors, meta: dict | None = None) -> None:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        token = _TOKENS.get(np.dtype(arr.dtype.name))
        if token is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries[name] = {"dtype": token, "shape": list(arr.shape), "offset": offset}
        data = arr.tobytes()
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_named_tensors(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a named-tensor file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for name, e in header["tensors"].items():
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"])
        tensors[name] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return tensors, header.get("meta", {})


def git_blob_hash(path) -> str:
    """sha1 of the file in git blob form (``blob <len>\\0<data>``)."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def checkpoint_hashes(ckpt_dir) -> dict:
    ckpt_dir = Path(ckpt_dir)
    out = {}
    for name in ("config.json", "weights.bin", "optimizer.bin", "bn_stats.json", "meta.json"):
        p = ckpt_dir / name
        if p.exists():
            out[name] = git_blob_hash(p)
    return out


def encode_rng_state(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def decode_rng_state(gen: torch.Generator, encoded: str) -> torch.Generator:
    raw = np.frombuffer(base64.b64decode(encoded), dtype=np.uint8)
    gen.set_state(torch.from_numpy(raw.copy()))
    return gen


def write_run_json(out_dir, command: str, payload: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), **payload}
    path = out_dir / "run.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path
