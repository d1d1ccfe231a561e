"""Binary checkpoints: magic, manifest length, JSON manifest, raw payload.

Layout::

    b"SNNCKPT1" | u32 LE manifest length | UTF-8 JSON manifest | payload

The payload holds every parameter and buffer as little-endian floats in
manifest order; each manifest entry records name, shape, dtype and byte
offset relative to the start of the payload.
"""

import json
import struct

import numpy as np

from .errors import CheckpointError
from .network import build_network

MAGIC = b"SNNCKPT1"
FORMAT_VERSION = 1


def _entry(name, kind, array, offset):
    return {"name": name, "kind": kind, "shape": list(array.shape), "dtype": array.dtype.str,
            "offset": offset, "nbytes": array.nbytes}


def save_checkpoint(net, path, config=None):
    """Write parameters, buffers and layer specs; ``config`` is echoed verbatim."""
    tensors, chunks, offset = [], [], 0
    items = [(n, "param", p.data) for n, p in net.named_parameters().items()]
    items += [(n, "buffer", b) for n, b in net.named_buffers().items()]
    for name, kind, value in items:
        arr = np.asarray(value)
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C")  # keeps 0-d shapes
        tensors.append(_entry(name, kind, arr, offset))
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "timesteps": net.timesteps,
        "dtype": net.dtype.name,
        "layers": [layer.spec() for layer in net.layers],
        "tensors": tensors,
        "config": config,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def read_manifest(raw):
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointError("truncated checkpoint header")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (length,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + length:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable manifest: {err}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}, expected {FORMAT_VERSION}")
    return manifest, start + length


def load_checkpoint(path):
    """Rebuild the network stored at ``path``; returns ``(net, manifest)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    manifest, base = read_manifest(raw)
    net = build_network(manifest["layers"], manifest["timesteps"], dtype=np.dtype(manifest["dtype"]))
    params = net.named_parameters()
    buffers = {}
    for entry in manifest["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        if entry["kind"] == "param":
            if entry["name"] not in params:
                raise CheckpointError(f"unknown parameter {entry['name']}")
            params[entry["name"]].data = arr.astype(arr.dtype.newbyteorder("="))
        else:
            buffers[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    for layer in net.layers:
        own = {k.split(".", 2)[2]: v for k, v in buffers.items() if k.startswith(layer.prefix + ".")}
        if own:
            layer.load_buffers(own)
    return net, manifest
