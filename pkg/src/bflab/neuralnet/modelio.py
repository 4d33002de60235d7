"""Model files: magic ``BFNN0001``, a length-prefixed JSON manifest, then the
named float64 blobs in manifest order (little-endian).
"""
import json
import struct

import numpy as np

from .model import NetConfig, NetParams

MODEL_MAGIC = b"BFNN0001"


def save_model(path, params, extra=None):
    entries = []
    blobs = []
    for group in ("tensors", "buffers"):
        for name, arr in getattr(params, group).items():
            arr = np.asarray(arr, dtype="<f8")
            entries.append({"name": name, "group": group, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    manifest = {
        "format": "bfnn/1",
        "architecture": params.to_manifest(),
        "bn_running_stats_included": True,
        "unsupervised_bn_statistics": "batch",
        "blobs": entries,
        "extra": extra or {},
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def load_model(path, with_manifest=False):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    (n,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    pos = 16 + n
    groups = {"tensors": {}, "buffers": {}}
    for e in manifest["blobs"]:
        count = int(np.prod(e["shape"], dtype=int))
        arr = np.frombuffer(raw, "<f8", count, pos).reshape(e["shape"]).astype(np.float64)
        groups[e["group"]][e["name"]] = arr
        pos += 8 * count
    params = NetParams(NetConfig(**manifest["architecture"]), groups["tensors"], groups["buffers"])
    return (params, manifest) if with_manifest else params
