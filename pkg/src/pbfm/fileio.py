"""Binary envelope shared by dataset and checkpoint files.

Layout: ``b"PBFM"``, u32 LE format version, u64 LE header length, UTF-8 JSON
header, raw little-endian payload. Datasets store float32 (samples block,
then conditioning block); checkpoints store float64 arrays listed in the
header manifest with their element offsets.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PBFM"
VERSION = 1
_F32 = np.dtype("<f4")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """File is not a readable PBFM container."""


def _write_envelope(path, header, payload: bytes):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_envelope(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    return header, memoryview(raw)[start + hlen:]


# ------------------------------------------------------------------ datasets


def write_dataset(path, ds):
    """Write a :class:`pbfm.data.GridDataset`; values are stored as float32."""
    samples = np.ascontiguousarray(ds.samples, dtype=_F32)
    cond = None if ds.cond is None else np.ascontiguousarray(ds.cond, dtype=_F32)
    header = {
        "kind": "dataset",
        "shape": list(samples.shape),
        "channels": list(ds.channels),
        "cond_dim": 0 if cond is None else int(cond.shape[1]),
        "stats": ds.stats,
        "spec": ds.spec,
    }
    payload = samples.tobytes() + (b"" if cond is None else cond.tobytes())
    _write_envelope(path, header, payload)


def read_dataset(path):
    from .data import GridDataset

    header, body = _read_envelope(path)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: not a dataset file")
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    samples = np.frombuffer(body, dtype=_F32, count=count).reshape(shape).astype(np.float64)
    cond = None
    if header["cond_dim"]:
        ccount = shape[0] * header["cond_dim"]
        cond = np.frombuffer(body, dtype=_F32, count=ccount, offset=count * 4)
        cond = cond.reshape(shape[0], header["cond_dim"]).astype(np.float64)
    return GridDataset(samples, header["channels"], cond, header.get("stats"), header.get("spec") or {})


# --------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    net_config: dict
    train_config: dict
    step: int
    live: "OrderedDict[str, np.ndarray]"
    ema: "OrderedDict[str, np.ndarray] | None" = None
    ema_decay: float = 0.999
    opt_m: list = field(default_factory=list)
    opt_v: list = field(default_factory=list)
    opt_step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def write_checkpoint(path, ckpt: Checkpoint):
    names = list(ckpt.live)
    groups = [("live", [ckpt.live[k] for k in names])]
    if ckpt.ema is not None:
        groups.append(("ema", [ckpt.ema[k] for k in names]))
    if ckpt.opt_m:
        groups.append(("adam_m", ckpt.opt_m))
        groups.append(("adam_v", ckpt.opt_v))
    manifest, chunks, offset = [], [], 0
    for group, arrays in groups:
        for name, a in zip(names, arrays):
            a = np.ascontiguousarray(a, dtype=_F64)
            manifest.append({"name": f"{group}/{name}", "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.size
    header = {
        "kind": "checkpoint",
        "net_config": ckpt.net_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "ema_decay": ckpt.ema_decay,
        "opt_step": ckpt.opt_step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "params": names,
        "manifest": manifest,
    }
    _write_envelope(path, header, b"".join(chunks))


def read_checkpoint(path) -> Checkpoint:
    header, body = _read_envelope(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint file")
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arrays[entry["name"]] = np.frombuffer(body, dtype=_F64, count=n, offset=8 * entry["offset"]).reshape(shape).copy()
    names = header["params"]

    def group(g):
        if f"{g}/{names[0]}" not in arrays:
            return None
        return OrderedDict((k, arrays[f"{g}/{k}"]) for k in names)

    m, v = group("adam_m"), group("adam_v")
    return Checkpoint(
        net_config=header["net_config"],
        train_config=header["train_config"],
        step=header["step"],
        live=group("live"),
        ema=group("ema"),
        ema_decay=header["ema_decay"],
        opt_m=[] if m is None else list(m.values()),
        opt_v=[] if v is None else list(v.values()),
        opt_step=header["opt_step"],
        rng_state=header["rng_state"],
        extra=header["extra"],
    )
