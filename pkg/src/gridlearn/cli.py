"""Command-line entry point.

Every subcommand writes its artifacts plus a ``manifest.json`` under ``--out``;
``gridlearn replay <manifest>`` re-runs a recorded configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import grid as gridmod
from . import models, placement, swingsim, train
from .autodiff import ShapeError

SUBCOMMANDS = ("generate-data", "train", "eval", "place-stage1", "place-stage2", "place-transfer", "param-count")


class CliError(ValueError):
    pass


# -- io helpers ---------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_grid(spec: str | None) -> gridmod.GridNetwork:
    if spec in (None, "ieee68"):
        return gridmod.bundled_68()
    return gridmod.load_network(spec)


INPUT_FILES = ("data", "checkpoint", "predictor", "samples")


def config_hash(command: str, args: dict, net: gridmod.GridNetwork | None) -> str:
    """Hash of everything that affects results.

    Input files and the grid enter by content, not path; the output directory
    is excluded.
    """
    payload = {"command": command, "args": {}}
    for key, value in args.items():
        if key == "out" or (key == "grid" and net is not None):
            continue
        if key in INPUT_FILES and value:
            value = _sha(Path(value).read_text(encoding="utf-8"))
        payload["args"][key] = value
    if net is not None:
        payload["grid"] = net.to_dict()
    return _sha(json.dumps(payload, sort_keys=True))


def resolve_observed(args, n: int) -> tuple[int, ...]:
    """Explicit list, else a seeded random set of ``--observed-count`` or ``--obs-pct`` nodes, else all."""
    if args.get("obs_list"):
        return gridmod.observed_set([int(t) for t in str(args["obs_list"]).split(",") if t.strip()], n)
    count = args.get("observed_count")
    if count is None and args.get("obs_pct") is not None:
        count = gridmod.observed_count(n, args["obs_pct"])
    if count is None or count == n:
        return tuple(range(n))
    return gridmod.random_observed(n, int(count), args.get("seed", 0))


def _train_config(args, base: train.TrainConfig) -> train.TrainConfig:
    kw = base.to_dict()
    for key, field_ in (("epochs", "epochs"), ("lr", "lr"), ("l2", "l2"), ("lam", "lam")):
        if args.get(key) is not None:
            kw[field_] = args[key]
    kw["seed"] = args.get("seed", 0)
    return train.TrainConfig(**kw)


def _preset_level(n: int, s: int) -> int:
    """Observability percentage whose node count is closest to ``s``."""
    levels = sorted(train.DSE_PRESETS["LR"])
    return min(levels, key=lambda pct: (abs(gridmod.observed_count(n, pct) - s), -pct))


# -- subcommands --------------------------------------------------------------
# Each handler takes the resolved argument dict and returns {filename: text}.


def cmd_generate_data(args):
    net = load_grid(args["grid"])
    obs = resolve_observed(args, net.n)
    meta = {"observed": list(obs)}
    if args["task"] == "localize":
        samples, rejected = swingsim.make_fault_dataset(
            net, obs, per_line=args["per_line"], count=args["count"], seed=args["seed"],
            noise_std=args["noise"])
        meta["rejected"] = [{"line": k, "edge": list(net.lines[k]), "reason": r} for k, r in rejected]
    else:
        pert = swingsim.Perturbation(args["perturb"], args["perturb"])
        samples = swingsim.make_path_dataset(net, pert, obs, dt=args["dt"], K=args["steps"],
                                             count=args["count"] or 16, seed=args["seed"],
                                             noise_std=args["noise"])
    meta["count"] = len(samples)
    return {"dataset.jsonl": swingsim.dataset_lines(samples, net.n, net.n_lines), "summary.json": dump_json(meta)}


def _load_data(path):
    if not path:
        raise CliError("--data is required")
    return swingsim.load_dataset(path)


def cmd_train(args):
    net = load_grid(args["grid"])
    kind, samples, head = _load_data(args["data"])
    if head["n"] != net.n:
        raise CliError(f"dataset has {head['n']} nodes but the grid has {net.n}")
    A = gridmod.normalized_adjacency(net)
    if args["task"] == "localize":
        if kind != "fault":
            raise CliError("localization needs a fault dataset")
        spec = models.make_spec(args["model"], "localize", net.n, net.n_lines, adjacency=A)
        model = models.build(spec, args["seed"])
        report = train.train_localizer(model, samples, _train_config(args, train.localize_preset()))
    else:
        if kind != "path":
            raise CliError("state estimation needs a path dataset")
        obs = samples[0].obs
        spec = models.make_spec(args["model"], "dse", net.n, obs=obs, adjacency=A,
                                ode_dt=samples[0].dt)
        model = models.build(spec, args["seed"])
        preset = train.dse_preset(args["model"], _preset_level(net.n, len(obs)))
        report = train.train_dse(model, samples, _train_config(args, preset))
    return {
        "checkpoint.json": dump_json(models.to_checkpoint(model)),
        "report.json": dump_json(report.to_dict()),
        "curve.csv": report.to_csv(),
    }


def cmd_eval(args):
    if not args["checkpoint"]:
        raise CliError("--checkpoint is required")
    model = models.from_checkpoint(json.loads(Path(args["checkpoint"]).read_text(encoding="utf-8")))
    kind, samples, _ = _load_data(args["data"])
    if model.spec.task == "localize":
        if kind != "fault":
            raise CliError("localization checkpoint needs a fault dataset")
        result = {"metric": "accuracy", "value": train.evaluate_localizer(model, samples)}
    else:
        if kind != "path":
            raise CliError("state estimation checkpoint needs a path dataset")
        target = np.stack([s.target for s in samples])[..., 1:]
        result = {"metric": "accuracy_db", "value": train.accuracy_db(train.predict_paths(model, samples), target)}
    result["count"] = len(samples)
    return {"metrics.json": dump_json(result)}


def _observed_size(args, n):
    if args.get("observed_count") is not None:
        s = int(args["observed_count"])
    elif args.get("obs_pct") is not None:
        s = gridmod.observed_count(n, args["obs_pct"])
    else:
        raise CliError("placement needs --observed-count or --obs-pct")
    if not 1 <= s <= n:
        raise CliError(f"observed count {s} outside [1, {n}]")
    return s


def _placement_samples(args, net, s, kind, default_count):
    if args.get("samples"):
        return placement.read_samples(args["samples"])
    count = args["count"] or default_count
    sels = placement.random_placements(net.n, s, count, args["seed"])
    return placement.measure_placements(net, sels, placement.level_for(net.n, s), kind=kind,
                                        noise_std=args["noise"], seed=args["seed"])


def _placement_lines(samples):
    return "".join(json.dumps(x.to_json()) + "\n" for x in samples)


def cmd_place_stage1(args):
    net = load_grid(args["grid"])
    s = _observed_size(args, net.n)
    samples = _placement_samples(args, net, s, "LR", placement.STAGE1_BUDGET)
    opnet, report = placement.train_predictor(
        samples, gridmod.normalized_adjacency(net), _train_config(args, placement.stage1_config()))
    return {
        "samples.jsonl": _placement_lines(samples),
        "predictor.json": dump_json(opnet.to_dict()),
        "report.json": dump_json(report.to_dict()),
        "curve.csv": report.to_csv(),
    }


def _load_predictor(args):
    if not args.get("predictor"):
        raise CliError("--predictor is required")
    return placement.OpNet.from_dict(json.loads(Path(args["predictor"]).read_text(encoding="utf-8")))


def cmd_place_stage2(args):
    opnet = _load_predictor(args)
    s = _observed_size(args, opnet.n)
    level = args["level"] if args["level"] is not None else placement.level_for(opnet.n, s)
    cfg = placement.SearchConfig(steps=args["steps"], lr=args["lr"] or 0.05, restarts=args["restarts"],
                                 seed=args["seed"])
    cand = placement.optimize_alpha(opnet, s, level, cfg)
    out = cand.to_json()
    out.update({"s": s, "level": level, "level_pct": placement.LEVELS[level]})
    return {"candidate.json": dump_json(out)}


def cmd_place_transfer(args):
    net = load_grid(args["grid"])
    opnet = _load_predictor(args)
    if opnet.n != net.n:
        raise CliError("predictor and grid disagree on the node count")
    s = _observed_size(args, net.n)
    samples = _placement_samples(args, net, s, args["model"], placement.TRANSFER_BUDGET)
    tuned, report = placement.transfer_retrain(opnet, samples, _train_config(args, placement.transfer_config()))
    return {
        "samples.jsonl": _placement_lines(samples),
        "predictor.json": dump_json(tuned.to_dict()),
        "report.json": dump_json(report.to_dict()),
        "curve.csv": report.to_csv(),
    }


def cmd_sweep(args):
    net = load_grid(args["grid"])
    s = _observed_size(args, net.n)
    sels = placement.random_placements(net.n, s, args["placements"], args["seed"])
    result = placement.localization_sweep(
        net, sels, args["inits"], kind=args["model"], noise_std=args["noise"], epochs=args["epochs"] or 300,
        lr=args["lr"] or 1e-2, seed=args["seed"])
    result["s"] = s
    return {"sweep.json": dump_json(result)}


def cmd_param_count(args):
    n = args["n"]
    if n is None:
        raise CliError("--n is required")
    task = args["task"]
    adjacency = np.eye(n)
    if task == "localize":
        if args["lines"] is None:
            raise CliError("--lines is required for localization")
        spec = models.make_spec(args["model"], "localize", n, args["lines"], adjacency=adjacency)
    else:
        s = args["observed_count"] if args["observed_count"] is not None else n
        spec = models.make_spec(args["model"], "dse", n, obs=tuple(range(s)), adjacency=adjacency)
    count = models.formula_param_count(spec)
    return {"param_count.json": dump_json({"model": args["model"], "task": spec.task, "count": count})}, count


HANDLERS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "place-stage1": cmd_place_stage1,
    "place-stage2": cmd_place_stage2,
    "place-transfer": cmd_place_transfer,
    "param-count": cmd_param_count,
    "sweep": cmd_sweep,
}


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridlearn", description="Power-grid learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--grid", default=None, help="grid JSON file (default: bundled 68-bus fixture)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--obs-pct", type=float, default=None)
        sp.add_argument("--observed-count", type=int, default=None)
        sp.add_argument("--obs-list", default=None, help="comma-separated node indices")

    def training(sp):
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--l2", type=float, default=None)
        sp.add_argument("--lambda", dest="lam", type=float, default=None)

    sp = sub.add_parser("generate-data", help="simulate a fault or path dataset")
    common(sp)
    sp.add_argument("--task", choices=("localize", "dse"), required=True)
    sp.add_argument("--per-line", type=int, default=1)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--dt", type=float, default=0.05)
    sp.add_argument("--steps", type=int, default=20, help="frames per path")
    sp.add_argument("--perturb", type=float, default=0.05)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    training(sp)
    sp.add_argument("--task", choices=("localize", "dse"), required=True)
    sp.add_argument("--model", choices=models.KINDS, required=True)
    sp.add_argument("--data", required=True)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)

    for name, helptext in (("place-stage1", "train the placement predictor on LR samples"),
                           ("place-transfer", "retrain the predictor head on advanced-model samples")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        training(sp)
        sp.add_argument("--samples", default=None, help="existing placement samples (JSON lines)")
        sp.add_argument("--count", type=int, default=None, help="placements to measure")
        sp.add_argument("--noise", type=float, default=0.003)
        if name == "place-transfer":
            sp.add_argument("--predictor", required=True)
            sp.add_argument("--model", choices=models.KINDS, default="GCNN")

    sp = sub.add_parser("place-stage2", help="search a placement through the trained predictor")
    common(sp)
    sp.add_argument("--predictor", required=True)
    sp.add_argument("--level", type=int, default=None)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--restarts", type=int, default=8)

    sp = sub.add_parser("sweep", help="localization accuracy over placements x initializations")
    common(sp)
    sp.add_argument("--model", choices=("LR", "FFNN", "GCNN", "AlexNet1D", "LinODE", "GraphODE"), default="LR")
    sp.add_argument("--placements", type=int, default=5)
    sp.add_argument("--inits", type=int, default=3)
    sp.add_argument("--noise", type=float, default=0.003)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)

    sp = sub.add_parser("param-count", help="print a model's trainable parameter count")
    common(sp, out_required=False)
    sp.add_argument("--model", choices=models.KINDS, required=True)
    sp.add_argument("--task", choices=("localize", "dse"), default="localize")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--lines", type=int, default=None)

    sp = sub.add_parser("replay", help="re-run the configuration recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    return p


# -- driver -------------------------------------------------------------------


def execute(command: str, args: dict) -> tuple[dict, object]:
    """Run a handler and write its artifacts and manifest; returns ``(files, printed value)``."""
    result = HANDLERS[command](args)
    files, printed = result if isinstance(result, tuple) else (result, None)
    net = load_grid(args.get("grid")) if command in ("generate-data", "train", "place-stage1", "place-transfer", "sweep") else None
    if args.get("out"):
        out = Path(args["out"])
        for name, text in files.items():
            atomic_write(out / name, text)
        manifest = {
            "command": command,
            "args": args,
            "config_hash": config_hash(command, args, net),
            "seed": args.get("seed", 0),
            "files": {name: _sha(text) for name, text in sorted(files.items())},
        }
        atomic_write(out / "manifest.json", dump_json(manifest))
    return files, printed


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.command == "replay":
            manifest = json.loads(Path(ns.manifest).read_text(encoding="utf-8"))
            command, args = manifest["command"], dict(manifest["args"])
            if ns.out is not None:
                args["out"] = ns.out
        else:
            command = ns.command
            args = {k: v for k, v in vars(ns).items() if k != "command"}
        files, printed = execute(command, args)
        if printed is not None:
            print(printed)
        elif args.get("out"):
            print(json.dumps({"ok": True, "out": str(args["out"]), "files": sorted(files)}))
        return 0
    except (ValueError, RuntimeError, OSError, KeyError, ShapeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
