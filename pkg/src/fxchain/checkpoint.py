"""Versioned checkpoint container: float32 tensors plus a JSON header in one ``.npz``."""
from __future__ import annotations

import json

import numpy as np
import torch

VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, module: torch.nn.Module, meta: dict):
    state = {k: v.detach().cpu().numpy().astype(np.float32)
             for k, v in module.state_dict().items() if v.is_floating_point()}
    header = dict(meta, version=VERSION, shapes={k: list(v.shape) for k, v in state.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8),
                 **state)


def read_meta(path) -> tuple[dict, dict]:
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint") from err
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_into(module: torch.nn.Module, meta: dict, arrays: dict):
    state = module.state_dict()
    for k, shape in meta["shapes"].items():
        if k not in state or list(state[k].shape) != shape or list(arrays[k].shape) != shape:
            raise CheckpointError(f"tensor {k} has an incompatible shape")
        state[k] = torch.from_numpy(arrays[k].astype(np.float32)).to(state[k].dtype)
    module.load_state_dict(state)
    module.eval()
