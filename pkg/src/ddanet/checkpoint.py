"""Single-file binary checkpoints.

Layout: 4-byte magic ``DDAN`` | format version as 4-byte little-endian
unsigned | 8-byte little-endian manifest length | UTF-8 JSON manifest |
concatenated raw little-endian IEEE-754 float32 tensor payloads. The
manifest carries configs, epoch, optimizer step, PRNG state, and an ordered
tensor table of {name, shape, offset, byte_length} with offsets relative to
the payload start. Round-tripping restores every tensor bitwise.

Tensor names are namespaced: ``param.*`` learnable parameters, ``buffer.*``
batch-norm running statistics, ``adam.m.*``/``adam.v.*`` optimizer moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DDANetParams, ModelConfig, build, named_buffers, named_parameters

MAGIC = b"DDAN"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file fails structural validation."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: "TrainConfig"
    epoch: int
    tensors: dict[str, np.ndarray]
    adam_step: int | None = None
    rng_state: dict | None = None

    def to_params(self, dtype=np.float32) -> DDANetParams:
        """Rebuild a parameter set carrying this checkpoint's tensor values."""
        params = build(self.model_config, seed=0, dtype=dtype)
        for name, tensor in named_parameters(params):
            key = f"param.{name}"
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key}")
            tensor.data = self.tensors[key].astype(dtype)
        for name, buf in named_buffers(params):
            key = f"buffer.{name}"
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key}")
            buf[...] = self.tensors[key].astype(buf.dtype)
        return params


def collect_tensors(params: DDANetParams, adam_moments: tuple[dict, dict] | None = None
                    ) -> dict[str, np.ndarray]:
    """Flatten params (+ optional Adam moments) into the namespaced table."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in named_parameters(params):
        tensors[f"param.{name}"] = t.data
    for name, buf in named_buffers(params):
        tensors[f"buffer.{name}"] = buf
    if adam_moments is not None:
        m, v = adam_moments
        for name, _ in named_parameters(params):
            tensors[f"adam.m.{name}"] = m[name]
            tensors[f"adam.v.{name}"] = v[name]
    return tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    records = []
    payloads = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "byte_length": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam_step,
        "rng_state": ckpt.rng_state,
        "tensors": records,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(b"".join(payloads))


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint; any structural defect raises
    CheckpointError naming the first field that failed."""
    from .training import TrainConfig

    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError("magic: file shorter than the fixed header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"magic: expected {MAGIC!r}, found {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format_version: unsupported version {version}")
    (manifest_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + manifest_len > len(raw):
        raise CheckpointError("manifest: length field exceeds file size")
    try:
        manifest = json.loads(raw[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest: not valid JSON ({exc})") from exc
    for key in ("model_config", "train_config", "epoch", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"manifest: missing key {key!r}")

    payload = raw[16 + manifest_len :]
    tensors: dict[str, np.ndarray] = {}
    for rec in manifest["tensors"]:
        name = rec.get("name", "<unnamed>")
        shape = tuple(rec["shape"])
        offset, byte_length = rec["offset"], rec["byte_length"]
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if byte_length != expected:
            raise CheckpointError(
                f"tensors[{name}]: byte_length {byte_length} != shape-implied {expected}"
            )
        if offset < 0 or offset + byte_length > len(payload):
            raise CheckpointError(f"tensors[{name}]: payload truncated")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=expected // 4, offset=offset)
            .reshape(shape)
            .copy()
        )

    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        epoch=manifest["epoch"],
        tensors=tensors,
        adam_step=manifest.get("adam_step"),
        rng_state=manifest.get("rng_state"),
    )
