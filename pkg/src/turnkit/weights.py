"""Binary weight container shared by every model component.

Layout: 4-byte magic "TKWT", little-endian u32 version, u32 manifest
length, UTF-8 JSON manifest, then the raw payload. Each manifest entry
records the tensor name, shape, dtype (always f32), byte offset into the
payload, byte length, and a CRC32 of the bytes.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np
import torch

MAGIC = b"TKWT"
VERSION = 1


class WeightContainerError(ValueError):
    pass


def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f4")


def save_weights(params: dict, path) -> None:
    """Write named tensors; iteration order fixes payload layout."""
    entries = []
    blobs = []
    offset = 0
    for name, value in params.items():
        arr = _to_array(value)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_weights(path, expected_names=None) -> dict[str, np.ndarray]:
    """Read a container back into name -> float32 array.

    When ``expected_names`` is given, missing and unexpected tensors raise
    with both lists in the message. Payload corruption is caught by the
    per-tensor checksum and reported with the byte offset.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise WeightContainerError(f"{path}: bad magic {magic!r}")
        version, manifest_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise WeightContainerError(
                f"{path}: container version {version}, expected {VERSION}"
            )
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for entry in manifest["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        raw = payload[lo: lo + n]
        if len(raw) != n:
            raise WeightContainerError(
                f"{path}: truncated payload for {entry['name']} at offset {lo}"
            )
        if (zlib.crc32(raw) & 0xFFFFFFFF) != entry["crc32"]:
            raise WeightContainerError(
                f"{path}: checksum mismatch for {entry['name']} at offset {lo}"
            )
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
            entry["shape"]).copy()
    if expected_names is not None:
        have = set(tensors)
        want = set(expected_names)
        if have != want:
            missing = sorted(want - have)
            extra = sorted(have - want)
            raise WeightContainerError(
                f"{path}: tensor names do not match expectations; "
                f"missing={missing} extra={extra}"
            )
    return tensors


def state_dict_to_container(modules: dict[str, torch.nn.Module]) -> dict:
    """Flatten module state dicts into container names <prefix>.<param>."""
    flat = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            flat[f"{prefix}.{name}"] = tensor
    return flat


def load_into_modules(path, modules: dict[str, torch.nn.Module]) -> None:
    """Load a container into live modules (strict name and shape matching)."""
    expected = []
    for prefix, module in modules.items():
        expected.extend(f"{prefix}.{k}" for k in module.state_dict())
    tensors = load_weights(path, expected_names=expected)
    for prefix, module in modules.items():
        sd = {}
        for name, ref in module.state_dict().items():
            arr = tensors[f"{prefix}.{name}"]
            if tuple(arr.shape) != tuple(ref.shape):
                raise WeightContainerError(
                    f"{prefix}.{name}: shape {arr.shape} != {tuple(ref.shape)}"
                )
            sd[name] = torch.from_numpy(arr).to(ref.dtype)
        module.load_state_dict(sd)
