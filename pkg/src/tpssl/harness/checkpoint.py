"""Checkpoint directories: ``manifest.json`` plus one raw float32 blob per tensor.

Blobs are little-endian float32, named after the tensor, and verified against
their SHA-256 digest on every load. Manifests link to their parent checkpoint,
forming a provenance chain back to the initialization.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

STAGES = ("init", "generic_pretrain", "target_pretrain", "finetune")
MANIFEST = "manifest.json"


class CorruptionError(RuntimeError):
    """A blob digest did not match its manifest entry."""


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class CheckpointManifest:
    run_id: str
    stage: str
    parent: str | None
    config_hash: str
    epoch: int
    tensors: dict[str, dict] = field(default_factory=dict)
    created: float = field(default_factory=time.time)
    parent_path: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def digests(self) -> dict[str, str]:
        return {k: v["sha256"] for k, v in self.tensors.items()}


def digest_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def make_run_id(stage: str, config_hash: str, parent: str | None, seed: int, tag: str = "") -> str:
    key = json.dumps([stage, config_hash, parent, seed, tag])
    return digest_bytes(key.encode())[:16]


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(path, tensors: dict[str, torch.Tensor], stage: str, config_hash: str,
                    epoch: int, parent: "str | Path | None" = None, seed: int = 0,
                    extra: dict | None = None, tag: str = "") -> CheckpointManifest:
    """Write ``tensors`` under directory ``path``; ``parent`` is a checkpoint directory."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    parent_id = parent_path = None
    if parent is not None:
        pm = read_manifest(parent)
        parent_id = pm.run_id
        parent_path = str(Path(parent).resolve())
    entries = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        fname = _blob_name(name)
        (path / fname).write_bytes(blob)
        entries[name] = {"file": fname, "shape": list(arr.shape), "sha256": digest_bytes(blob)}
    run_id = make_run_id(stage, config_hash, parent_id, seed, tag)
    if parent_id == run_id:
        raise ValueError("checkpoint cannot be its own parent")
    manifest = CheckpointManifest(run_id=run_id, stage=stage, parent=parent_id,
                                  config_hash=config_hash, epoch=epoch, tensors=entries,
                                  parent_path=parent_path, extra=dict(extra or {}))
    (path / MANIFEST).write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True))
    return manifest


def read_manifest(path) -> CheckpointManifest:
    f = Path(path) / MANIFEST
    if not f.is_file():
        raise MissingCheckpointError(f"no checkpoint manifest at {f}")
    return CheckpointManifest(**json.loads(f.read_text()))


def load_checkpoint(path) -> tuple[CheckpointManifest, dict[str, torch.Tensor]]:
    """Read and verify every blob; raises CorruptionError on any digest mismatch."""
    path = Path(path)
    manifest = read_manifest(path)
    out = {}
    for name, entry in manifest.tensors.items():
        f = path / entry["file"]
        if not f.is_file():
            raise CorruptionError(f"missing blob {f}")
        blob = f.read_bytes()
        if digest_bytes(blob) != entry["sha256"]:
            raise CorruptionError(f"digest mismatch for tensor {name!r} in {path}")
        arr = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"])
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return manifest, out


def provenance_chain(path) -> list[CheckpointManifest]:
    """Manifests from ``path`` back to the root; raises on cycles or broken links."""
    chain, seen = [], set()
    cur = Path(path)
    while True:
        m = read_manifest(cur)
        if m.run_id in seen:
            raise CorruptionError(f"provenance cycle at run {m.run_id}")
        seen.add(m.run_id)
        chain.append(m)
        if m.parent is None:
            return chain
        if m.parent_path is None:
            raise CorruptionError(f"run {m.run_id} names parent {m.parent} without a path")
        cur = Path(m.parent_path)
        if read_manifest(cur).run_id != m.parent:
            raise CorruptionError(f"parent at {cur} is not run {m.parent}")


def prefixed(state_dict: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in state_dict.items()}


def unprefixed(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
