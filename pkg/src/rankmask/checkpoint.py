"""Versioned binary checkpoints for policy networks.

Layout (all little-endian):

    magic "RKMK" | u32 version | u32 d | u32 n_blocks | u32 agent_feat_dim
    | u32 task_feat_dim | u8 variant code | f32 p_drop | u32 n_train
    | u32 k_train | u32 record count
    then per parameter: u16 name length | name utf-8 | u8 ndim
    | u32 extents... | row-major f32 payload

Loading rebuilds the network from the header and validates every record's
shape; `load_checkpoint_into` instead validates against a caller-supplied
network and rejects any mismatch.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .attention import VARIANTS, PolicyConfig, PolicyNet

MAGIC = b"RKMK"
VERSION = 1

_HEADER = struct.Struct("<4sIIIIIBfII")


class CheckpointError(ValueError):
    pass


def _read(f: BinaryIO, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def save_checkpoint(net: PolicyNet, path: str, n_train: int = 0, k_train: int = 0) -> None:
    cfg = net.config
    params = net.parameters()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(
            MAGIC, VERSION, cfg.d, cfg.n_blocks, cfg.agent_feat_dim, cfg.task_feat_dim,
            VARIANTS.index(cfg.variant), cfg.p_drop, n_train, k_train,
        ))
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", p.data.ndim))
            for extent in p.data.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_records(f: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read(f, 4, "record count"))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read(f, 2, "name length"))
        name = _read(f, name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", _read(f, 1, "ndim"))
        shape = tuple(
            struct.unpack("<I", _read(f, 4, f"extent of {name}"))[0] for _ in range(ndim)
        )
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = _read(f, 4 * n_items, f"payload of {name}")
        records[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if f.read(1):
        raise CheckpointError("trailing bytes after last record")
    return records


def _read_header(f: BinaryIO) -> tuple[PolicyConfig, dict]:
    raw = _read(f, _HEADER.size, "header")
    magic, version, d, n_blocks, fa, ft, vcode, p_drop, n_train, k_train = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if vcode >= len(VARIANTS):
        raise CheckpointError(f"unknown variant code {vcode}")
    cfg = PolicyConfig(d=d, n_blocks=n_blocks, agent_feat_dim=fa, task_feat_dim=ft,
                       variant=VARIANTS[vcode], p_drop=p_drop)
    return cfg, {"n_train": n_train, "k_train": k_train}


def load_checkpoint(path: str) -> tuple[PolicyNet, dict]:
    """Rebuild a network from a checkpoint; returns (net, meta)."""
    with open(path, "rb") as f:
        cfg, meta = _read_header(f)
        records = _read_records(f)
    net = PolicyNet(cfg, np.random.default_rng(0))
    _apply(net, records)
    return net, meta


def load_checkpoint_into(net: PolicyNet, path: str) -> dict:
    """Load parameters into an existing network; every shape must match."""
    with open(path, "rb") as f:
        cfg, meta = _read_header(f)
        records = _read_records(f)
    if cfg.d != net.config.d or cfg.n_blocks != net.config.n_blocks:
        raise CheckpointError(
            f"network mismatch: checkpoint d={cfg.d}, blocks={cfg.n_blocks}; "
            f"target d={net.config.d}, blocks={net.config.n_blocks}"
        )
    _apply(net, records)
    return meta


def _apply(net: PolicyNet, records: dict[str, np.ndarray]) -> None:
    own = {p.name: p for p in net.parameters()}
    if set(records) != set(own):
        missing = sorted(set(own) - set(records))
        extra = sorted(set(records) - set(own))
        raise CheckpointError(f"parameter records mismatch (missing={missing}, extra={extra})")
    for name, arr in records.items():
        if own[name].data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape}, network {own[name].data.shape}"
            )
    for name, arr in records.items():
        own[name].data = arr.copy()
