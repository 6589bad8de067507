"""Command line: ``neuralpi {train,simulate,certify,compare,export}``.

Exit status is 0 on success, 1 when a certification check fails and 2 for
usage, configuration or checkpoint errors (reported as one JSON line on
stderr).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .certify import report_bundle_text
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .experiment import certify_suite, evaluate, run_training, test_batch
from .plants import model_from_json_dict
from .sim import read_trajectory_csv, rollout, write_trajectory_csv

EXIT_OK, EXIT_CERT, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("neuralpi")


class UsageError(ValueError):
    pass


def _fmt(v) -> str:
    v = float(v)
    return format(v, ".17g") if math.isfinite(v) else str(v)


def _write_csv(path: Path, header, rows, meta: dict):
    with path.open("w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _meta(cfg: dict, seed: int) -> dict:
    return {"config_hash": C.config_hash(cfg), "seed": seed}


def _resolve_config(args, doc: dict | None = None) -> dict:
    """--config/--preset win; otherwise the config embedded in a checkpoint."""
    if args.config is not None or args.preset is not None:
        cfg = C.load_config(args.config, args.preset)
    elif doc is not None and "config" in doc.get("meta", {}):
        cfg = C.resolve(doc["meta"]["config"])
    else:
        raise UsageError("need --config, --preset or a checkpoint with an embedded config")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "eval_horizon_s", None) is not None:
        cfg["eval"]["horizon_s"] = args.eval_horizon_s
        cfg["eval"]["settle_time"] = min(cfg["eval"]["settle_time"], args.eval_horizon_s)
    return cfg


def _plant(cfg: dict, doc: dict | None):
    if doc is not None and "plant" in doc:
        return model_from_json_dict(doc["plant"])
    return C.build_plant(cfg)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{cfg['name']}-seed{cfg['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_controller(args, cfg_doc=None):
    if args.checkpoint is None:
        return None, None
    return load_checkpoint(args.checkpoint)


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import plot_loss

    cfg = C.load_config(args.config, args.preset)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.controller is not None:
        cfg["controller"]["kind"] = args.controller
    if args.partition is not None:
        cfg["controller"]["partition"] = args.partition
    C.validate(cfg)
    if args.eval_horizon_s is not None:
        cfg["eval"]["horizon_s"] = args.eval_horizon_s
        cfg["eval"]["settle_time"] = min(cfg["eval"]["settle_time"], args.eval_horizon_s)
    out = _out_dir(args, cfg)
    seed = cfg["seed"]
    meta = _meta(cfg, seed)
    model = C.build_plant(cfg)
    plant_doc = model.to_json_dict()
    ckpt_dir = out / "checkpoints"

    def on_ckpt(epoch, ctrl):
        ckpt_dir.mkdir(exist_ok=True)
        save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.json", ctrl, {**meta, "epoch": epoch, "config": cfg}, plant_doc)

    if cfg["train"]["checkpoint_every"]:
        on_ckpt(0, C.build_initial_controller(cfg, model))
    model, result = run_training(cfg, on_checkpoint=on_ckpt)
    rows = [[str(e), _fmt(l), str(d)] for e, l, d in result.history]
    _write_csv(out / "loss.csv", ["epoch", "mean_loss", "dropped_rollouts"], rows, meta)
    save_checkpoint(out / "checkpoint.json", result.controller, {**meta, "epoch": cfg["train"]["epochs"], "config": cfg}, plant_doc)
    reports = certify_suite(cfg, model, result.controller)
    (out / "certificate.json").write_text(report_bundle_text(reports, meta))
    plot_loss(result.history, out / "loss.png", meta)
    first, last = result.history[0][1], result.history[-1][1]
    print(f"trained {cfg['controller']['kind']} on {model.kind}: loss {first:.6g} -> {last:.6g}")
    for r in reports:
        print(r.line())
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .plotting import plot_trajectory

    ctrl, doc = _load_controller(args)
    cfg = _resolve_config(args, doc)
    model = _plant(cfg, doc)
    if ctrl is None:
        ctrl = C.build_initial_controller(cfg, model)
    out = _out_dir(args, cfg)
    meta = _meta(cfg, cfg["seed"])
    x0, rcfg = test_batch(cfg, model)
    traj = rollout(model, ctrl, x0, rcfg)
    n_files = cfg["eval"]["plot_rollouts"] if args.rollouts is None else args.rollouts
    for b in range(min(n_files, traj.batch)):
        write_trajectory_csv(traj, out / f"trajectory_{b:03d}.csv", b, {**meta, "rollout": b})
    if n_files:
        plot_trajectory(traj, out / "trajectory.png", 0, ctrl.setpoint, meta)
    ev = evaluate(cfg, model, ctrl)
    rows = [
        [str(b), _fmt(ev.transient[b]), _fmt(ev.steady[b]), str(int(traj.nonfinite_step[b])), str(int(traj.region_violation[b]))]
        for b in range(traj.batch)
    ]
    _write_csv(out / "summary.csv", ["rollout", "transient_cost", "steady_cost", "nonfinite_step", "region_violation"], rows, meta)
    s = ev.summary()
    print(f"transient {s['transient_mean']:.6g} +- {s['transient_std']:.6g}  steady {s['steady_mean']:.6g} +- {s['steady_std']:.6g}")
    return EXIT_OK


def cmd_certify(args) -> int:
    ctrl, doc = _load_controller(args)
    cfg = _resolve_config(args, doc)
    model = _plant(cfg, doc)
    if ctrl is None:
        ctrl = C.build_initial_controller(cfg, model)
    out = _out_dir(args, cfg)
    meta = _meta(cfg, cfg["seed"])
    reports = certify_suite(cfg, model, ctrl)
    (out / "certificate.json").write_text(report_bundle_text(reports, meta))
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CERT


def cmd_compare(args) -> int:
    from .plotting import plot_compare

    loaded = []
    for p in args.checkpoints:
        path = Path(p)
        if path.is_dir():
            path = path / "checkpoint.json"
        try:
            loaded.append((p, *load_checkpoint(path)))
        except CheckpointError as exc:
            log.warning("%s", exc)
            loaded.append((p, None, None))
    first_doc = next((d for _, c, d in loaded if d is not None), None)
    cfg = _resolve_config(args, first_doc)
    model = _plant(cfg, first_doc)
    out = _out_dir(args, cfg)
    meta = _meta(cfg, cfg["seed"])
    rows = []
    for name, ctrl, doc in loaded:
        label = Path(name).stem if Path(name).suffix else Path(name).name
        if ctrl is None:
            rows.append({"name": label, "status": "absent"})
            continue
        s = evaluate(cfg, model, ctrl).summary()
        rows.append({"name": label, "kind": ctrl.kind, "status": "ok", **s})
    header = ["name", "kind", "status", "transient_mean", "transient_std", "steady_mean", "steady_std", "nonfinite"]
    body = [
        [r["name"], r.get("kind", ""), r["status"]]
        + ([_fmt(r[k]) for k in header[3:7]] + [str(r["nonfinite"])] if r["status"] == "ok" else [""] * 5)
        for r in rows
    ]
    _write_csv(out / "compare.csv", header, body, {**meta, "eval_horizon_s": cfg["eval"]["horizon_s"]})
    plot_compare(rows, out / "compare.png", meta)
    for r in body:
        print(",".join(r))
    return EXIT_OK


def export_rows(files):
    """Merge trajectory CSVs into (header, rows) of t, y_*, u_* keyed on t."""
    tables = []
    for f in files:
        header, data = read_trajectory_csv(f)
        ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
        ucols = [i for i, h in enumerate(header) if h.startswith("u_")]
        tables.append((Path(f).stem, header, data, ycols, ucols))
    single = len(tables) == 1
    out_header = ["t"]
    for stem, header, _, ycols, ucols in tables:
        prefix = "" if single else f"{stem}."
        out_header += [prefix + header[i] for i in ycols + ucols]
    times = sorted({float(t) for _, _, data, _, _ in tables for t in data[:, 0]})
    rows = []
    for t in times:
        row = [_fmt(t)]
        for _, _, data, ycols, ucols in tables:
            hit = np.nonzero(data[:, 0] == t)[0]
            row += [_fmt(data[hit[0], i]) for i in ycols + ucols] if hit.size else [""] * (len(ycols) + len(ucols))
        rows.append(row)
    return out_header, rows


def cmd_export(args) -> int:
    missing = [f for f in args.files if not Path(f).exists()]
    if missing:
        raise UsageError(f"trajectory file not found: {missing[0]}")
    header, rows = export_rows(args.files)
    out = Path(args.out) if args.out else Path("export.csv")
    if out.is_dir():
        out = out / "export.csv"
    meta = {}
    for line in Path(args.files[0]).read_text().splitlines():
        if not line.startswith("#"):
            break
        k, _, v = line[1:].partition(":")
        if k.strip() in ("config_hash", "seed"):
            meta[k.strip()] = v.strip()
    _write_csv(out, header, rows, meta)
    print(f"wrote {out} ({len(header)} columns, {len(rows)} rows)")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralpi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", choices=C.PRESETS)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--eval-horizon-s", type=float, dest="eval_horizon_s")
        if checkpoint:
            p.add_argument("--checkpoint")

    p = sub.add_parser("train", help="train a controller")
    common(p, checkpoint=False)
    p.add_argument("--controller", choices=("neural_pi", "linear_pi", "dense_nn_pi"))
    p.add_argument("--partition", choices=("full", "half", "decentralized"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="roll out a controller on the test batch")
    common(p)
    p.add_argument("--rollouts", type=int, help="number of trajectory CSVs to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("certify", help="run the certification suite")
    common(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("compare", help="mean/std cost table over a shared test batch")
    common(p, checkpoint=False)
    p.add_argument("checkpoints", nargs="+", help="checkpoint files or run directories")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="plot-ready y/u CSV from trajectory files")
    p.add_argument("files", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
    except CheckpointError as exc:
        print(json.dumps({"error": "checkpoint", "message": str(exc)}), file=sys.stderr)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
