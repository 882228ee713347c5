"""Named-tensor checkpoint archives.

A checkpoint is a ZIP archive holding ``manifest.json`` (tensor names,
dtypes, shapes, byte offsets), ``tensors.bin`` (raw little-endian float32
payloads, concatenated in manifest order) and optionally ``meta.json``
(free-form JSON for architecture hyperparameters). Archive entries carry a
fixed timestamp so identical states serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactError

MANIFEST_NAME = "manifest.json"
DATA_NAME = "tensors.bin"
META_NAME = "meta.json"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    """Write a named-tensor archive. Tensors are stored as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().to(torch.float32).contiguous().cpu().numpy()
        raw = arr.astype("<f4", copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": "float32",
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, MANIFEST_NAME, json.dumps(manifest, indent=1).encode("utf-8"))
        _write_entry(zf, DATA_NAME, b"".join(chunks))
        if meta is not None:
            _write_entry(zf, META_NAME, json.dumps(meta, indent=1, sort_keys=True).encode("utf-8"))
    return path


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a named-tensor archive; returns (tensors, meta)."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
            blob = zf.read(DATA_NAME)
            meta = {}
            if META_NAME in zf.namelist():
                meta = json.loads(zf.read(META_NAME).decode("utf-8"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable checkpoint {path}: {exc}") from exc
    tensors = {}
    for entry in manifest:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors, meta


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Flatten a module state dict with an optional dotted prefix."""
    out = {}
    for name, value in module.state_dict().items():
        key = f"{prefix}.{name}" if prefix else name
        out[key] = value
    return out


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Load prefixed tensors back into a module (strict)."""
    state = {}
    lead = f"{prefix}." if prefix else ""
    for key, value in tensors.items():
        if key.startswith(lead):
            state[key[len(lead) :]] = value
    if not state:
        raise ArtifactError(f"checkpoint holds no tensors under prefix '{prefix}'")
    module.load_state_dict(state)


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over the module's tensors in sorted name order (bit-exact)."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode("utf-8"))
        arr = state[name].detach().contiguous().cpu().numpy()
        digest.update(str(arr.dtype).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()
