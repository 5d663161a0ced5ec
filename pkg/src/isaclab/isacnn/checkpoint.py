"""Checkpoint files.

Layout::

    magic (8 bytes) | version u32 | header length u32 | JSON header |
    float64 little-endian payload

The header lists the architecture, the payload sections in order, and
any training state scalars. JSON floats round-trip exactly, so a resumed
run continues bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .network import Network
from .training import Adam, TrainConfig, TrainRun

MAGIC = b"ISACNNCK"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _encode(net: Network, run: TrainRun | None):
    header = {"network": net.header(), "sections": []}
    chunks = []

    def add(name, arr):
        arr = np.asarray(arr, dtype=float).ravel()
        header["sections"].append([name, int(arr.size)])
        chunks.append(arr)

    add("params", net.get_flat())
    add("buffers", net.get_buffers())
    if run is not None:
        header["train"] = {
            "arch": run.arch, "alpha": run.alpha,
            "config": dataclasses.asdict(run.config),
            "epoch": run.epoch, "lr": run.lr, "best_val": run.best_val,
            "best_epoch": run.best_epoch, "wait_plateau": run.wait_plateau,
            "wait_stop": run.wait_stop, "stopped": run.stopped,
            "adam_t": run.adam.t, "history": [list(h) for h in run.history],
            "has_best": run.best_params is not None,
        }
        add("current_params", run.net.get_flat())
        add("current_buffers", run.net.get_buffers())
        add("adam_m", np.concatenate([m.ravel() for m in run.adam.m]))
        add("adam_v", np.concatenate([v.ravel() for v in run.adam.v]))
    return header, chunks


def save_checkpoint(path, net: Network, run: TrainRun | None = None) -> None:
    """Write ``net`` (normally the best-validation network) and optional run state."""
    header, chunks = _encode(net, run)
    text = json.dumps(header, sort_keys=True).encode()
    payload = np.concatenate(chunks).astype("<f8").tobytes()
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(text)) + text + payload)


def load_checkpoint(path):
    """Return ``(network, run)``; ``run`` is ``None`` for inference-only files."""
    data = Path(path).read_bytes()
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an isaclab checkpoint")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + n].decode())
    flat = np.frombuffer(data, dtype="<f8", offset=start + n).astype(float)
    sections, pos = {}, 0
    for name, size in header["sections"]:
        sections[name] = flat[pos:pos + size]
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: payload size mismatch")

    net = Network.from_header(header["network"])
    net.set_flat(sections["params"])
    net.set_buffers(sections["buffers"])
    if "train" not in header:
        return net, None

    t = header["train"]
    cur = Network.from_header(header["network"])
    cur.set_flat(sections["current_params"])
    cur.set_buffers(sections["current_buffers"])
    cfg = TrainConfig(**t["config"])
    shapes = [p.shape for _, p in cur.named_params()]
    adam = Adam(shapes, t["lr"], cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam.t = t["adam_t"]
    m, v = sections["adam_m"], sections["adam_v"]
    pos = 0
    for i, s in enumerate(shapes):
        size = int(np.prod(s))
        adam.m[i] = m[pos:pos + size].reshape(s).copy()
        adam.v[i] = v[pos:pos + size].reshape(s).copy()
        pos += size
    run = TrainRun(
        t["arch"], t["alpha"], cfg, cur, adam, epoch=t["epoch"], lr=t["lr"],
        best_val=t["best_val"], best_epoch=t["best_epoch"],
        best_params=net.get_flat() if t["has_best"] else None,
        best_buffers=net.get_buffers() if t["has_best"] else None,
        wait_plateau=t["wait_plateau"], wait_stop=t["wait_stop"],
        stopped=t["stopped"], history=[tuple(h) for h in t["history"]])
    return net, run
