"""Single-file checkpoint for :class:`~mignn.meta.MetaState`.

Layout::

    b"MIGNN-CKPT\\n"
    uint32 LE  format version
    uint64 LE  manifest length in bytes
    manifest   UTF-8 JSON (sorted keys): config, seed, log, ..., and
               ``arrays``: [{"name", "shape", "offset"}] (offsets in float64s)
    payload    every array as little-endian float64, manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoders import ParamVector
from .errors import LoadError
from .meta import PRIOR_NAMES, MetaState

MAGIC = b"MIGNN-CKPT\n"
VERSION = 1


def _arrays(state: MetaState) -> list[tuple[str, np.ndarray]]:
    out = [("theta", state.theta.data)]
    out += [(f"prior/{k}", state.prior[k]) for k in PRIOR_NAMES]
    for moment in ("m", "v"):
        for k in sorted(state.adam.get(moment, {})):
            out.append((f"adam_{moment}/{k}", state.adam[moment][k]))
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(state: MetaState) -> bytes:
    arrays = _arrays(state)
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "version": VERSION,
        "config": state.config,
        "seed": int(state.seed),
        "arch": state.theta.arch,
        "shapes": [list(s) for s in state.theta.shapes],
        "adam_t": int(state.adam.get("t", 0)),
        "best_epoch": int(state.best_epoch),
        "log": state.log,
        "rng_state": state.rng_state,
        "arrays": entries,
    }
    blob = json.dumps(_jsonable(manifest), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(blob)) + blob + payload


def loads(raw: bytes) -> MetaState:
    if not raw.startswith(MAGIC):
        raise LoadError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<Q", raw, pos + 4)
    pos += 12
    manifest = json.loads(raw[pos:pos + n].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=pos + n).astype(np.float64)
    arrays = {}
    for e in manifest["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = data[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
    theta = ParamVector(arrays["theta"], [tuple(s) for s in manifest["shapes"]], manifest["arch"])
    prior = {k: arrays[f"prior/{k}"] for k in PRIOR_NAMES}
    adam = {"t": manifest["adam_t"],
            "m": {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            "v": {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")}}
    return MetaState(theta, prior, manifest["config"], manifest["seed"], adam, manifest["log"],
                     manifest["rng_state"], manifest["best_epoch"])


def save_checkpoint(path, state: MetaState) -> None:
    Path(path).write_bytes(dumps(state))


def load_checkpoint(path) -> MetaState:
    p = Path(path)
    if not p.exists():
        raise LoadError(f"missing file {p.name}")
    return loads(p.read_bytes())
