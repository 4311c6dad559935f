"""Versioned binary checkpoint container.

Layout: magic line, 8-byte little-endian header length, a sorted-keys JSON
header, then raw array buffers in name order.  Everything is written
deterministically so save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .dataset import HardwareConfig, NormStats
from .errors import ConfigError, DataError
from .model import ModelConfig, PolicyModel

MAGIC = b"FLOWPROMPT-CKPT1\n"
VERSION = 1


def _registry_entry(info):
    return {
        "hardware": info.hardware.to_dict(),
        "norm_stats": None if info.norm_stats is None else info.norm_stats.to_dict(),
    }


def save_checkpoint(path, model: PolicyModel, optimizer_state=None, train_state=None):
    """optimizer_state: {"step": int, "m": {name: arr}, "v": {name: arr}} or None.
    train_state: JSON-serializable dict (iteration, rng states, history)."""
    buffers = []
    table = []
    offset = 0

    def add_buffer(kind, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        table.append({
            "kind": kind, "name": name, "dtype": arr.dtype.name,
            "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes,
        })
        buffers.append(arr.tobytes())
        offset += arr.nbytes

    for name in sorted(model.params):
        add_buffer("param", name, model.params[name])
    opt_header = None
    if optimizer_state is not None:
        for name in sorted(optimizer_state["m"]):
            add_buffer("opt_m", name, optimizer_state["m"][name])
        for name in sorted(optimizer_state["v"]):
            add_buffer("opt_v", name, optimizer_state["v"][name])
        opt_header = {"step": int(optimizer_state["step"])}

    header = {
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "root_seed": model.root_seed,
        "registry": [
            {"domain_id": d, **_registry_entry(info)} for d, info in model.domains.items()
        ],
        "adapters": {k: list(v) for k, v in model.adapters.items()},
        "lora_scale": model.lora_scale,
        "buffers": table,
        "optimizer": opt_header,
        "train_state": train_state,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for b in buffers:
            f.write(b)


def _read(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header["version"] != VERSION:
            raise DataError(f"{path}: checkpoint version {header['version']} unsupported")
        payload = f.read()
    return header, payload


def load_checkpoint(path, expected_config: ModelConfig | None = None, migrate=False):
    """Rebuild (model, optimizer_state | None, train_state | None).

    With `expected_config`, any differing field raises ConfigError naming it;
    pass migrate=True to permit a variant change (matching parameters are
    carried over, new ones get fresh seeded init).
    """
    header, payload = _read(path)
    stored = ModelConfig.from_dict(header["model_config"])
    target = stored
    if expected_config is not None and expected_config != stored:
        diffs = [
            name for name in stored.to_dict()
            if stored.to_dict()[name] != expected_config.to_dict()[name]
        ]
        if not migrate:
            raise ConfigError(
                f"checkpoint config mismatch on field(s) {diffs}; pass migrate=True to convert"
            )
        target = expected_config

    arrays = {}
    for entry in header["buffers"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arrays[(entry["kind"], entry["name"])] = arr

    hardware = [HardwareConfig.from_dict(e["hardware"]) for e in header["registry"]]
    model = PolicyModel.init(target, hardware, header["root_seed"])
    for e in header["registry"]:
        if e["norm_stats"] is not None:
            model.domains[e["domain_id"]].norm_stats = NormStats.from_dict(e["norm_stats"])
    model.adapters = {k: tuple(v) for k, v in header["adapters"].items()}
    model.lora_scale = header["lora_scale"]
    for (kind, name), arr in arrays.items():
        if kind == "param":
            if name in model.params:
                if tuple(model.params[name].shape) != tuple(arr.shape):
                    raise ConfigError(f"checkpoint parameter {name} has shape {arr.shape}, "
                                      f"model expects {model.params[name].shape}")
                model.params[name] = arr
            elif name.startswith("lora."):
                model.params[name] = arr
            elif not migrate:
                raise ConfigError(f"checkpoint parameter {name} not present in model")

    optimizer_state = None
    if header["optimizer"] is not None:
        optimizer_state = {
            "step": header["optimizer"]["step"],
            "m": {n: a for (k, n), a in arrays.items() if k == "opt_m"},
            "v": {n: a for (k, n), a in arrays.items() if k == "opt_v"},
        }
    return model, optimizer_state, header.get("train_state")
