"""Self-describing JSON checkpoints for PI controllers.

Floats are written with Python's shortest round-trip repr, so every value
reloads bit-exactly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .dense import DenseNet
from .monotone import CommPartition, MonotoneOperator, PiController
from .scnn import QuadraticConvex, ScnnParams

FORMAT = "neuralpi.controller"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def handle_to_json(h) -> dict:
    if isinstance(h, ScnnParams):
        layers = []
        for l in range(h.layer_count):
            layer = {"Wz": _arr(h.input_weights[l]), "b": _arr(h.biases[l])}
            if l > 0:
                layer["Wo"] = _arr(h.hidden_pre[l])
            layers.append(layer)
        return {
            "type": "scnn",
            "input_dim": h.input_dim,
            "widths": [int(w.shape[0]) for w in h.input_weights],
            "log_beta": float(h.log_beta),
            "log_quad": None if h.log_quad is None else float(h.log_quad),
            "layers": layers,
        }
    if isinstance(h, QuadraticConvex):
        return {"type": "quadratic", "input_dim": h.input_dim, "eps": float(h.eps),
                "unconstrained": bool(h.unconstrained), "L": _arr(h.factor)}
    if isinstance(h, DenseNet):
        layers = []
        for l in range(h.layer_count):
            layer = {"Wz": _arr(h.input_weights[l]), "b": _arr(h.biases[l])}
            if l > 0:
                layer["Wo"] = _arr(h.hidden_weights[l])
            layers.append(layer)
        return {"type": "dense", "input_dim": h.input_dim,
                "widths": [int(w.shape[0]) for w in h.input_weights], "beta": float(h.beta), "layers": layers}
    raise CheckpointError(f"cannot serialize handle of type {type(h).__name__}")


def _matrix(v, shape, where):
    a = np.asarray(v, dtype=float)
    if a.shape != tuple(shape):
        raise CheckpointError(f"{where}: expected shape {tuple(shape)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise CheckpointError(f"{where}: non-finite values")
    return a


def handle_from_json(d: dict, where: str = "handle"):
    kind = d.get("type")
    m = int(d["input_dim"])
    if kind in ("scnn", "dense"):
        widths = [int(w) for w in d["widths"]]
        if len(d["layers"]) != len(widths):
            raise CheckpointError(f"{where}: layer count does not match widths")
        wz, wo, bs = [], [None], []
        for l, (h, layer) in enumerate(zip(widths, d["layers"])):
            wz.append(_matrix(layer["Wz"], (h, m), f"{where}.layers[{l}].Wz"))
            bs.append(_matrix(layer["b"], (h,), f"{where}.layers[{l}].b"))
            if l > 0:
                wo.append(_matrix(layer["Wo"], (h, widths[l - 1]), f"{where}.layers[{l}].Wo"))
        if kind == "scnn":
            lq = d.get("log_quad")
            return ScnnParams(tuple(wz), tuple(wo), tuple(bs), float(d["log_beta"]), None if lq is None else float(lq))
        return DenseNet(tuple(wz), tuple(wo), tuple(bs), float(d["beta"]))
    if kind == "quadratic":
        return QuadraticConvex(_matrix(d["L"], (m, m), f"{where}.L"), float(d["eps"]), bool(d["unconstrained"]))
    raise CheckpointError(f"{where}: unknown handle type {kind!r}")


def controller_to_json(ctrl: PiController) -> dict:
    part = ctrl.p_op.partition
    return {
        "kind": ctrl.kind,
        "m": ctrl.m,
        "setpoint": _arr(ctrl.setpoint),
        "partition": [list(map(int, g)) for g in part.groups],
        "P": [handle_to_json(h) for h in ctrl.p_op.handles],
        "I": [handle_to_json(h) for h in ctrl.r_op.handles],
    }


def controller_from_json(d: dict) -> PiController:
    m = int(d["m"])
    part = CommPartition(tuple(tuple(g) for g in d["partition"]), m)
    ops = []
    for key in ("P", "I"):
        hs = tuple(handle_from_json(h, f"{key}[{j}]") for j, h in enumerate(d[key]))
        if len(hs) != len(part.groups):
            raise CheckpointError(f"{key}: {len(hs)} handles for {len(part.groups)} groups")
        ops.append(MonotoneOperator(part, hs))
    return PiController(ops[0], ops[1], np.asarray(d["setpoint"], dtype=float), d.get("kind", "neural_pi"))


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_checkpoint(path, ctrl: PiController, meta: dict | None = None, plant: dict | None = None) -> Path:
    """Write controller, plant description and metadata (config hash, seed, epoch)."""
    doc = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "controller": controller_to_json(ctrl)}
    if plant is not None:
        doc["plant"] = plant
    path = Path(path)
    path.write_text(dumps(doc))
    return path


def load_checkpoint(path):
    """Return ``(controller, document)``; raises CheckpointError on any defect."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a controller checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        ctrl = controller_from_json(doc["controller"])
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed controller ({exc})") from exc
    return ctrl, doc


def params_equal(a: PiController, b: PiController) -> bool:
    da, db = a.to_dict(), b.to_dict()
    if da.keys() != db.keys():
        return False
    return all(np.array_equal(np.asarray(da[k]), np.asarray(db[k])) for k in da) and np.array_equal(a.setpoint, b.setpoint)


def is_finite_number(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v)
