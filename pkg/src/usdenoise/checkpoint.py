"""Checkpoint container and its on-disk format.

Layout::

    b"USDN" | version (1 byte) | index length (uint64 LE) | index JSON | tensor blobs

The JSON index holds configs, scheduler/optimizer counters, RNG state,
history rows and a ``tensors`` table mapping each name to dtype, shape and
byte offset into the blob area.  Blobs are little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatchError, FormatError
from .network import Denoiser, ModelConfig, build_model
from .optim import AdamState, PlateauState, TrainConfig

MAGIC = b"USDN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBQ")


def config_fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    doc = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    scheduler: PlateauState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.model_config, self.train_config)

    @classmethod
    def capture(cls, model: Denoiser, train_cfg: TrainConfig, adam: AdamState | None = None,
                scheduler: PlateauState | None = None, epoch: int = 0, rng_state: dict | None = None,
                history: list[dict] | None = None) -> "Checkpoint":
        def arr(t):
            return t.detach().cpu().numpy().astype("<f4", copy=True)

        return cls(
            model_config=model.config,
            train_config=train_cfg,
            params={k: arr(v) for k, v in model.state_dict().items()},
            adam_m={k: arr(v) for k, v in (adam.m if adam else {}).items()},
            adam_v={k: arr(v) for k, v in (adam.v if adam else {}).items()},
            adam_t=adam.t if adam else 0,
            scheduler=scheduler,
            epoch=epoch,
            rng_state=rng_state,
            history=list(history or []),
        )

    def build_model(self) -> Denoiser:
        model = build_model(self.model_config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise FormatError(f"params: missing {missing[:3]} unexpected {unexpected[:3]}")
        return model

    def adam_state(self, model: Denoiser) -> AdamState:
        params = dict(model.named_parameters())
        if not self.adam_m:
            return AdamState.zeros_like(params)
        return AdamState(
            m={k: torch.from_numpy(self.adam_m[k].copy()) for k in params},
            v={k: torch.from_numpy(self.adam_v[k].copy()) for k in params},
            t=self.adam_t,
        )

    def to_bytes(self) -> bytes:
        tensors = {}
        for prefix, group in (("param/", self.params), ("adam_m/", self.adam_m), ("adam_v/", self.adam_v)):
            for name, value in group.items():
                tensors[prefix + name] = np.ascontiguousarray(value, dtype="<f4")
        table = {}
        offset = 0
        for name in sorted(tensors):
            arr = tensors[name]
            table[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset}
            offset += arr.nbytes
        index = {
            "format_version": self.format_version,
            "fingerprint": self.fingerprint,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "adam_t": self.adam_t,
            "scheduler": None if self.scheduler is None else self.scheduler.to_dict(),
            "rng_state": self.rng_state,
            "history": self.history,
            "blob_bytes": offset,
            "tensors": table,
        }
        raw = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
        blobs = b"".join(tensors[name].tobytes() for name in sorted(tensors))
        return _HEADER.pack(MAGIC, self.format_version, len(raw)) + raw + blobs

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise FormatError(f"{source}: header: file truncated ({len(data)} bytes)")
        magic, version, n_index = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"{source}: magic: expected {MAGIC!r}, found {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{source}: format_version: unsupported version {version}")
        start = _HEADER.size
        if len(data) < start + n_index:
            raise FormatError(f"{source}: index: truncated ({len(data) - start} of {n_index} bytes)")
        try:
            index = json.loads(data[start:start + n_index])
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{source}: index: invalid JSON ({exc})") from exc
        blob = memoryview(data)[start + n_index:]

        def need(key):
            if key not in index:
                raise FormatError(f"{source}: {key}: field missing")
            return index[key]

        if need("format_version") != version:
            raise FormatError(f"{source}: format_version: header says {version}, index says {index['format_version']}")
        if len(blob) != need("blob_bytes"):
            raise FormatError(f"{source}: tensors: expected {index['blob_bytes']} blob bytes, found {len(blob)}")
        groups = {"param/": {}, "adam_m/": {}, "adam_v/": {}}
        for name, meta in need("tensors").items():
            if meta.get("dtype") != "float32":
                raise FormatError(f"{source}: tensors.{name}.dtype: unsupported {meta.get('dtype')!r}")
            shape = tuple(meta["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            off = meta["offset"]
            if off < 0 or off + 4 * count > len(blob):
                raise FormatError(f"{source}: tensors.{name}.offset: out of range")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            prefix = next((p for p in groups if name.startswith(p)), None)
            if prefix is None:
                raise FormatError(f"{source}: tensors.{name}: unknown tensor group")
            groups[prefix][name[len(prefix):]] = arr
        try:
            model_cfg = ModelConfig.from_dict(need("model_config"))
            train_cfg = TrainConfig.from_dict(need("train_config"))
        except ValueError as exc:
            raise FormatError(f"{source}: config: {exc}") from exc
        sched = need("scheduler")
        ckpt = cls(
            model_config=model_cfg,
            train_config=train_cfg,
            params=groups["param/"],
            adam_m=groups["adam_m/"],
            adam_v=groups["adam_v/"],
            adam_t=int(need("adam_t")),
            scheduler=None if sched is None else PlateauState.from_dict(sched),
            epoch=int(need("epoch")),
            rng_state=need("rng_state"),
            history=list(need("history")),
            format_version=version,
        )
        if ckpt.fingerprint != need("fingerprint"):
            raise FormatError(f"{source}: fingerprint: does not match the stored configs")
        return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(ckpt.to_bytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expected_model: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    ckpt = Checkpoint.from_bytes(path.read_bytes(), source=str(path))
    if expected_model is not None and expected_model != ckpt.model_config:
        want, have = expected_model.to_dict(), ckpt.model_config.to_dict()
        diff = sorted(k for k in want if want[k] != have.get(k))
        raise ConfigMismatchError(f"{path}: model_config: mismatch in {', '.join(diff)}")
    return ckpt
