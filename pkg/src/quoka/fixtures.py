"""Binary tensor fixtures and QKV fixture streams.

Tensor files use a small framed format: magic ``QTNS``, u8 version (=1),
u8 rank, rank little-endian u32 dims, then the row-major float32 payload.
A QKV fixture directory holds one such file per (layer, role) plus a
``manifest.json`` recording layer count, sequence length and head layout.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .attention import HeadLayout
from .errors import StreamError, ValidationError
from .linalg import as_tensor

MAGIC = b"QTNS"
VERSION = 1


def save_tensor(path, x) -> None:
    """Write ``x`` to ``path`` in the QTNS framed format."""
    x = as_tensor(x)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(x.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a QTNS file back into a float32 array, validating the frame."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 6:
        raise ValidationError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<BB", raw, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)
    offset = 6 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = raw[offset:]
    if len(payload) != 4 * count:
        raise ValidationError(f"{path}: payload holds {len(payload) // 4} floats, header says {count}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return as_tensor(data)


def blob_hash(path) -> str:
    """Git-style blob hash (sha1 over ``blob <len>\\0`` + contents)."""
    raw = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(raw))
    h.update(raw)
    return h.hexdigest()


def _qkv_names(layer: int) -> dict[str, str]:
    return {role: f"layer{layer}_{role}.qtns" for role in ("q", "k", "v")}


def save_qkv_fixture(directory, layers_qkv, layout: HeadLayout) -> None:
    """Write per-layer (Q, K, V) arrays plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seq_len = layers_qkv[0][0].shape[1]
    for li, (q, k, v) in enumerate(layers_qkv):
        names = _qkv_names(li)
        save_tensor(directory / names["q"], q)
        save_tensor(directory / names["k"], k)
        save_tensor(directory / names["v"], v)
    manifest = {
        "layers": len(layers_qkv),
        "T": int(seq_len),
        "layout": layout.to_json(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_qkv_fixture(directory):
    """Load a QKV fixture directory.

    Returns ``(layers_qkv, layout, hashes)`` where ``layers_qkv`` is a list of
    per-layer (Q, K, V) arrays and ``hashes`` maps file name to its blob hash.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest: {exc}") from exc
    layout = HeadLayout.from_json(manifest["layout"])
    seq_len = int(manifest["T"])
    layers = int(manifest["layers"])
    out = []
    hashes = {"manifest.json": blob_hash(manifest_path)}
    for li in range(layers):
        names = _qkv_names(li)
        q = load_tensor(directory / names["q"])
        k = load_tensor(directory / names["k"])
        v = load_tensor(directory / names["v"])
        if q.shape != (layout.n_q, seq_len, layout.d):
            raise StreamError(f"layer {li}: Q shape {q.shape} does not match manifest")
        if k.shape != (layout.n_kv, seq_len, layout.d) or v.shape != k.shape:
            raise StreamError(f"layer {li}: K/V shapes {k.shape}/{v.shape} do not match manifest")
        for name in names.values():
            hashes[name] = blob_hash(directory / name)
        out.append((q, k, v))
    return out, layout, hashes
