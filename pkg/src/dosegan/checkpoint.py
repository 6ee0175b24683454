"""Binary checkpoint format.

Layout::

    b"DGCKPT\\0\\0"                magic, 8 bytes
    uint32 LE                      format version
    uint64 LE                      header length in bytes
    header                         UTF-8 JSON, sorted keys
    tensor blobs                   little-endian float32, C order, back to back

The header carries the configs, loop counters, scheduler and RNG state, Adam
step counts and a tensor index of ``[name, shape, offset]`` triples. Tensor
names are ``<network>/<param>`` for weights and running statistics and
``adam_g.m/<param>`` style for optimizer moments.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .nets import ConfigError, NetConfig, init_networks
from .optim import AdamState, PlateauScheduler
from .rng import Rng
from .trainer import TrainConfig, TrainState

MAGIC = b"DGCKPT\0\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Tensor names or shapes disagree with the networks being restored."""


def _adam_header(state: AdamState) -> dict:
    return {"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step, "steps": dict(sorted(state.steps.items()))}


def _tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for net_name, module in state.nets.modules().items():
        for name, arr in module.state_arrays().items():
            out[f"{net_name}/{name}"] = arr
    for tag, adam in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
        for name in sorted(adam.m):
            out[f"{tag}.m/{name}"] = adam.m[name]
            out[f"{tag}.v/{name}"] = adam.v[name]
    return out


def to_bytes(state: TrainState) -> bytes:
    tensors = _tensors(state)
    index = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        index.append([name, list(arr.shape), offset])
        offset += arr.size * 4
    header = {
        "net_config": state.net_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "epoch": state.epoch,
        "stage": state.stage,
        "finished": state.finished,
        "scheduler": state.scheduler.to_dict(),
        "rng": state.rng.get_state(),
        "adam_g": _adam_header(state.adam_g),
        "adam_d": _adam_header(state.adam_d),
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = [np.ascontiguousarray(tensors[name], dtype="<f4").tobytes() for name, _, _ in index]
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def _parse(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing prefix")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointVersionError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    body = memoryview(data)[start + head_len:]
    tensors = {}
    end = 0
    for name, shape, offset in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(body):
            raise CheckpointError(f"truncated checkpoint: tensor {name} cut short")
        tensors[name] = np.frombuffer(body[offset:end], dtype="<f4").astype(np.float32).reshape(shape)
    if end != len(body):
        raise CheckpointError(f"checkpoint has {len(body) - end} trailing bytes")
    return header, tensors


def _adam_from(header: dict, tensors: dict[str, np.ndarray], tag: str) -> AdamState:
    h = header[tag]
    st = AdamState(h["beta1"], h["beta2"], h["eps"], step=h["step"], steps=dict(h["steps"]))
    for name in h["steps"]:
        try:
            st.m[name] = tensors[f"{tag}.m/{name}"].copy()
            st.v[name] = tensors[f"{tag}.v/{name}"].copy()
        except KeyError as exc:
            raise CheckpointMismatchError(f"missing optimizer moment {exc}") from None
    return st


def from_bytes(data: bytes, expect_net_config: NetConfig | None = None) -> TrainState:
    header, tensors = _parse(data)
    try:
        net_config = NetConfig(**header["net_config"]).validate()
        train_config = TrainConfig.from_dict(header["train_config"]).validate()
    except (TypeError, ConfigError) as exc:
        raise CheckpointMismatchError(f"checkpoint config invalid: {exc}") from exc
    if expect_net_config is not None and expect_net_config != net_config:
        raise CheckpointMismatchError("checkpoint was written for a different network config")
    nets = init_networks(net_config, Rng(train_config.seed).split("init"))
    for net_name, module in nets.modules().items():
        prefix = f"{net_name}/"
        arrays = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            module.load_state_arrays(arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointMismatchError(f"{net_name}: {exc}") from exc
    return TrainState(
        net_config=net_config,
        train_config=train_config,
        nets=nets,
        adam_g=_adam_from(header, tensors, "adam_g"),
        adam_d=_adam_from(header, tensors, "adam_d"),
        scheduler=PlateauScheduler.from_dict(header["scheduler"]),
        rng=Rng.from_state(header["rng"]),
        epoch=header["epoch"],
        stage=header["stage"],
        finished=header["finished"],
    )


def load_into(data: bytes, state: TrainState) -> None:
    """Restore network tensors into existing networks, checking names and shapes."""
    restored = from_bytes(data)
    for net_name, module in state.nets.modules().items():
        src = restored.nets.modules()[net_name].state_arrays()
        try:
            module.load_state_arrays(src)
        except (KeyError, ValueError) as exc:
            raise CheckpointMismatchError(f"{net_name}: {exc}") from exc


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(state))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, expect_net_config: NetConfig | None = None) -> TrainState:
    return from_bytes(Path(path).read_bytes(), expect_net_config)
