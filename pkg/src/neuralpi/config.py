"""Experiment configuration: JSON files layered over built-in defaults.

Presets live in ``neuralpi/presets`` as partial JSON documents.  Every
artifact records :func:`config_hash` of the resolved configuration and the
seed, so a run can be matched to the exact settings that produced it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from importlib import resources
from pathlib import Path

import numpy as np

from .monotone import CommPartition
from .plants import generate_params, load_model
from .train import LossSpec, TrainConfig, build_controller

# Default learning rates by (plant, controller); Neural-PI uses 0.05 on both.
DEFAULT_LR = {
    ("platoon", "neural_pi"): 0.05,
    ("platoon", "dense_nn_pi"): 0.035,
    ("platoon", "linear_pi"): 0.03,
    ("power", "neural_pi"): 0.05,
    ("power", "dense_nn_pi"): 0.01,
    ("power", "linear_pi"): 0.08,
}

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "setpoint": None,
    "plant": {"kind": "platoon", "m": 5, "topology": None, "params_seed": 0, "file": None},
    "controller": {
        "kind": "neural_pi",
        "partition": "full",
        "widths": [20, 20],
        "quad": 1.0,
        "input_scale": 1.0,
        "gain": 1.0,
        "unconstrained": False,
    },
    "rollout": {"dt": 0.02, "horizon": 100, "integrator": "euler"},
    "train": {
        "epochs": 50,
        "batch_size": 32,
        "lr0": None,
        "decay_base": 0.7,
        "decay_period": 50,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "init_low": 5.0,
        "init_high": 6.0,
        "position_spread": 0.5,
        "disturbance_time": 0.5,
        "disturbance_nodes": 3,
        "disturbance_scale": 1.0,
        "checkpoint_every": 0,
        "abort_after": 5,
    },
    "loss": {"kind": "auto", "l1": None, "control": None, "nadir": None},
    "eval": {
        "horizon_s": 15.0,
        "batch": 100,
        "seed": 12345,
        "settle_time": 15.0,
        "eps": 0.01,
        "lyapunov_rollouts": 10,
        "eip_samples": 10000,
        "probe_pairs": 10000,
        "plot_rollouts": 1,
    },
    "certify": ["monotonicity", "eip", "lyapunov", "tracking"],
}

PRESETS = ("platoon-large", "platoon-desk", "power-large", "power-desk")
CHECKS = ("monotonicity", "eip", "lyapunov", "tracking")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        super().__init__(message)
        self.message, self.path, self.line = message, path, line

    def to_dict(self) -> dict:
        return {"error": "config", "message": self.message, "path": self.path, "line": self.line}


def _key_line(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _merge(base: dict, over: dict, text: str | None, path: str | None, prefix="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {prefix}{k}", path, _key_line(text, k))
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"{prefix}{k} must be an object", path, _key_line(text, k))
        if isinstance(base[k], dict) and base[k]:
            out[k] = _merge(base[k], v, text, path, prefix + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse(text: str, path: str | None) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, path, exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object", path, 1)
    return doc


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("neuralpi.presets").joinpath(f"{name}.json").read_text()


def resolve(doc: dict, text: str | None = None, path: str | None = None) -> dict:
    """Merge ``doc`` over defaults (and over a preset named by ``"preset"``), then validate."""
    doc = dict(doc)
    base = DEFAULTS
    preset = doc.pop("preset", None)
    if preset is not None:
        base = _merge(DEFAULTS, _parse(preset_text(preset), f"preset:{preset}"), None, f"preset:{preset}")
    cfg = _merge(base, doc, text, path)
    validate(cfg, text, path)
    return cfg


def load_config(path=None, preset: str | None = None) -> dict:
    if path is None and preset is None:
        raise ConfigError("need --config or --preset")
    if path is None:
        return resolve({"preset": preset})
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}", str(p)) from exc
    doc = _parse(text, str(p))
    if preset is not None and "preset" not in doc:
        doc["preset"] = preset
    return resolve(doc, text, str(p))


def validate(cfg: dict, text: str | None = None, path: str | None = None):
    def fail(msg, key):
        raise ConfigError(msg, path, _key_line(text, key))

    plant, ctrl, tr, ev = cfg["plant"], cfg["controller"], cfg["train"], cfg["eval"]
    if plant["kind"] not in ("platoon", "power"):
        fail(f"plant.kind must be platoon or power, got {plant['kind']!r}", "kind")
    if plant["file"] is not None:
        fpath = Path(plant["file"])
        if not fpath.is_absolute() and path is not None:
            fpath = Path(path).parent / fpath
        if not fpath.exists():
            fail(f"plant file not found: {fpath}", "file")
        plant["file"] = str(fpath)
    elif not (isinstance(plant["m"], int) and plant["m"] >= 2):
        fail("plant.m must be an integer >= 2", "m")
    if ctrl["kind"] not in ("neural_pi", "linear_pi", "dense_nn_pi"):
        fail(f"controller.kind must be neural_pi, linear_pi or dense_nn_pi, got {ctrl['kind']!r}", "kind")
    part = ctrl["partition"]
    if not (part in ("full", "half", "decentralized") or isinstance(part, list)):
        fail("controller.partition must be full, half, decentralized or a list of groups", "partition")
    if not cfg["rollout"]["dt"] > 0 or int(cfg["rollout"]["horizon"]) < 1:
        fail("rollout needs dt > 0 and horizon >= 1", "rollout")
    if cfg["rollout"]["integrator"] not in ("euler", "rk4"):
        fail("rollout.integrator must be euler or rk4", "integrator")
    if int(tr["epochs"]) < 1 or int(tr["batch_size"]) < 1:
        fail("train.epochs and train.batch_size must be >= 1", "epochs")
    if tr["lr0"] is not None and not tr["lr0"] > 0:
        fail("train.lr0 must be positive", "lr0")
    if not ev["horizon_s"] > 0 or ev["settle_time"] > ev["horizon_s"]:
        fail("eval.horizon_s must be positive and >= eval.settle_time", "horizon_s")
    if cfg["loss"]["kind"] not in ("auto", "platoon", "power", "custom"):
        fail("loss.kind must be auto, platoon, power or custom", "loss")
    unknown = [c for c in cfg["certify"] if c not in CHECKS]
    if unknown:
        fail(f"unknown certification checks {unknown}", "certify")
    if not isinstance(cfg["seed"], int):
        fail("seed must be an integer", "seed")


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config without its seed (the seed is recorded separately)."""
    body = {k: v for k, v in cfg.items() if k != "seed"}
    return hashlib.sha256(canonical(body).encode()).hexdigest()[:16]


# -- building objects from a resolved config ---------------------------------------


def build_plant(cfg: dict):
    p = cfg["plant"]
    if p["file"] is not None:
        return load_model(p["file"])
    return generate_params(p["kind"], p["m"], p["topology"], seed=p["params_seed"])


def default_setpoint(cfg: dict, model) -> float:
    if cfg["setpoint"] is not None:
        return cfg["setpoint"]
    return 5.0 if model.kind == "platoon" else float(model.nominal)


def build_partition(cfg: dict, m: int) -> CommPartition:
    part = cfg["controller"]["partition"]
    if isinstance(part, list):
        return CommPartition(tuple(tuple(g) for g in part), m)
    return getattr(CommPartition, part)(m)


def build_initial_controller(cfg: dict, model, seed: int | None = None):
    c = cfg["controller"]
    seed = cfg["seed"] if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    return build_controller(
        c["kind"], model.m, default_setpoint(cfg, model), build_partition(cfg, model.m), rng,
        widths=tuple(c["widths"]), quad=c["quad"], input_scale=c["input_scale"], gain=c["gain"],
        unconstrained=c["unconstrained"],
    )


def train_config(cfg: dict, model, seed: int | None = None) -> TrainConfig:
    tr = dict(cfg["train"])
    if tr["lr0"] is None:
        tr["lr0"] = DEFAULT_LR[(model.kind, cfg["controller"]["kind"])]
    return TrainConfig(
        seed=cfg["seed"] if seed is None else seed,
        dt=cfg["rollout"]["dt"],
        horizon=int(cfg["rollout"]["horizon"]),
        **tr,
    )


def loss_spec(cfg: dict, model, horizon: int | None = None) -> LossSpec:
    horizon = int(cfg["rollout"]["horizon"]) if horizon is None else horizon
    ls = cfg["loss"]
    kind = model.kind if ls["kind"] == "auto" else ls["kind"]
    base = LossSpec.platoon(model, horizon) if kind == "platoon" else LossSpec.power(horizon)
    if kind == "custom":
        base = LossSpec("custom", horizon, 0.0, 0.0, 0.0)
    over = {k: ls[k] for k in ("l1", "control", "nadir") if ls[k] is not None}
    if not over:
        return base
    vals = {"l1": base.l1, "control": base.control, "nadir": base.nadir, **over}
    return LossSpec(base.kind, horizon, np.asarray(vals["l1"], dtype=float), np.asarray(vals["control"], dtype=float), float(vals["nadir"]))
