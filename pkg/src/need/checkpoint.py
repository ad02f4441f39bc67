"""Self-describing JSON checkpoints with exact float round-trips."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from need.errors import SchemaError

FORMAT_TAG = "need-checkpoint"


def dumps(kind: str, hyper: dict, state: dict) -> str:
    # repr of a Python float is the shortest string that parses back to the same double
    tensors = {
        name: {"shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr).ravel()]}
        for name, arr in state.items()
    }
    return json.dumps({"format": FORMAT_TAG, "kind": kind, "hyper": hyper, "tensors": tensors})


def loads(text: str, kind: str) -> tuple:
    obj = json.loads(text)
    if obj.get("format") != FORMAT_TAG:
        raise SchemaError("not a checkpoint file")
    if obj.get("kind") != kind:
        raise SchemaError(f"checkpoint holds a {obj.get('kind')!r} model, expected {kind!r}")
    state = {}
    for name, t in obj["tensors"].items():
        arr = np.asarray(t["data"], dtype=np.float64)
        if arr.size != int(np.prod(t["shape"])):
            raise SchemaError(f"tensor {name!r}: {arr.size} values for shape {t['shape']}")
        state[name] = arr.reshape(t["shape"])
    return obj["hyper"], state


def save(path, kind: str, hyper: dict, state: dict):
    Path(path).write_text(dumps(kind, hyper, state) + "\n", encoding="utf-8")


def load(path, kind: str) -> tuple:
    return loads(Path(path).read_text(encoding="utf-8"), kind)
