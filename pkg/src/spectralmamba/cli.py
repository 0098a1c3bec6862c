"""``spectralmamba`` command-line front end.

Every command writing files takes ``--out DIR`` and leaves a
``<command>.config.json`` with its fully resolved settings next to its
outputs. Errors go to stderr as ``ERR:<kind>: message`` with a nonzero exit.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .cost import cost_report, count_macs, param_count
from .data import SplitSpec, Split, make_split, normalize, slic_segment, synth_scene
from .errors import ContractError, FormatError, SpectralMambaError
from .formats import (load_cube, load_labels, load_weights, save_class_map_ppm, save_cube,
                      save_labels, save_weights)
from .model import ModelConfig, init_weights
from .train import TrainConfig, ablate, evaluate, predict_scene, render_table, train

log = logging.getLogger("spectralmamba")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERR:usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_split(path) -> Split:
    try:
        return Split.from_json(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: not a split file ({exc})") from exc


def _scene(args):
    cube = normalize(load_cube(args.cube))
    labels = load_labels(args.labels)
    if labels.shape != cube.shape[:2]:
        raise ContractError(f"labels {labels.shape} do not match cube {cube.shape[:2]}")
    return cube, labels


def _model_config(args, bands: int, classes: int) -> ModelConfig:
    return ModelConfig(bands=bands, pieces=args.pieces, classes=classes, state_size=args.state,
                       expand=args.expand, patch=args.patch, variant=args.variant, depth=args.depth)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr0=args.lr, weight_decay=args.wd, epochs=args.epochs, batch=args.batch,
                       step_epochs=args.step, gamma=args.gamma, seed=args.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cube, labels = synth_scene(args.h, args.w, args.l, args.k, args.noise, args.seed)
    out = _out_dir(args.out)
    save_cube(out / "cube.spmc", cube)
    save_labels(out / "labels.spml", labels)
    _write_json(out / "synth.config.json", {"h": args.h, "w": args.w, "l": args.l, "k": args.k,
                                            "noise": args.noise, "seed": args.seed})
    print(f"wrote {out / 'cube.spmc'} and {out / 'labels.spml'}")
    return 0


def cmd_split(args) -> int:
    cube, labels = _scene(args)
    spec = SplitSpec(budget=args.budget, superpixels=args.superpixels,
                     compactness=args.compactness, seed=args.seed)
    split = make_split(labels, slic_segment(cube, spec), spec)
    out = _out_dir(args.out)
    _write_json(out / "split.json", split.to_json())
    _write_json(out / "split.config.json", {"cube": args.cube, "labels": args.labels,
                                            "budget": spec.budget, "superpixels": spec.superpixels,
                                            "compactness": spec.compactness, "seed": spec.seed,
                                            "iterations": spec.iterations})
    print("class  train   test")
    for c, (n_train, n_test) in split.counts().items():
        print(f"{c:5d}  {n_train:5d}  {n_test:5d}")
    print(f"total  {sum(v[0] for v in split.counts().values()):5d}  "
          f"{sum(v[1] for v in split.counts().values()):5d}")
    return 0


def cmd_train(args) -> int:
    cube, labels = _scene(args)
    split = _load_split(args.split)
    cfg = _model_config(args, cube.bands, labels.num_classes)
    tcfg = _train_config(args)
    print(f"bands {cfg.bands}  pieces {cfg.pieces}  piece_len {cfg.piece_len}  "
          f"params {param_count(cfg)}  macs@64 {count_macs(cfg)}")
    out = _out_dir(args.out)
    _write_json(out / "train.config.json", {"model": cfg.to_dict(), "train": tcfg.to_dict(),
                                            "cube": args.cube, "labels": args.labels,
                                            "split": args.split})

    def report(epoch, loss, lr):
        if args.verbose or epoch == tcfg.epochs - 1:
            print(f"epoch {epoch:4d}  loss {loss:.6f}  lr {lr:.3g}")

    result = train(init_weights(cfg, tcfg.seed), cfg, cube, split.train, tcfg, on_epoch=report)
    save_weights(out / "weights.spmw", result.weights, cfg)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        writer.writerows((e, repr(loss), repr(lr)) for e, loss, lr in result.history)
    print(f"wrote {out / 'weights.spmw'} ({result.seconds:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    cube, labels = _scene(args)
    weights, cfg = load_weights(args.weights)
    if cfg.bands != cube.bands:
        raise ContractError(f"checkpoint expects {cfg.bands} bands, cube has {cube.bands}")
    test = _load_split(args.split).test if args.split else labels
    if test.shape != cube.shape[:2]:
        raise ContractError(f"split shape {test.shape} does not match cube {cube.shape[:2]}")
    if test.num_classes > cfg.classes:
        raise ContractError(f"labels reach class {test.num_classes}, checkpoint has {cfg.classes}")
    metrics = evaluate(weights, cfg, cube, test, workers=args.workers)
    payload = {**metrics.to_json(), "params": param_count(cfg), "macs": count_macs(cfg),
               "config": cfg.to_dict(), "seed": args.seed}
    text = json.dumps(payload, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.map_out:
        save_class_map_ppm(args.map_out, predict_scene(weights, cfg, cube))
    return 0


def cmd_cost(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except ValueError as exc:
        raise FormatError(f"{args.config}: {exc}") from exc
    cfg = ModelConfig.from_dict(raw.get("model", raw))
    report = cost_report(cfg, batch=64)
    print(json.dumps({**report.to_json(), "config": cfg.to_dict()}, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cube, labels = _scene(args)
    split = _load_split(args.split)
    base = _model_config(args, cube.bands, labels.num_classes)
    tcfg = _train_config(args)
    sections = {"all": ("modules", "pieces"), "modules": ("modules",), "pieces": ("pieces",)}[args.grid]
    rows = ablate(cube, split.train, split.test, base, tcfg, sections=sections)
    out = _out_dir(args.out)
    _write_json(out / "ablate.config.json", {"model": base.to_dict(), "train": tcfg.to_dict(),
                                             "grid": args.grid, "split": args.split})
    _write_json(out / "ablation.json", {"rows": rows, "seed": tcfg.seed,
                                        "mac_batch": 64})
    table = render_table(rows)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_scene(p, split=True):
    p.add_argument("--cube", required=True, help="SPMC1 cube file")
    p.add_argument("--labels", required=True, help="SPML1 label file")
    if split:
        p.add_argument("--split", required=True, help="split JSON written by `split`")


def _add_model(p):
    p.add_argument("--variant", choices=("pixelwise", "patchwise"), default="patchwise")
    p.add_argument("--pieces", type=int, default=6)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--expand", type=int, default=8)
    p.add_argument("--patch", type=int, default=3)
    p.add_argument("--depth", type=int, default=1)


def _add_train(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--step", type=int, default=20, help="epochs between lr decays")
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spectralmamba", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic labeled scene")
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--l", type=int, default=48)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="superpixel-based class-balanced train/test split")
    _add_scene(p, split=False)
    p.add_argument("--budget", type=int, required=True, help="training pixels per class")
    p.add_argument("--superpixels", type=int, default=None, help="default H*W/64")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on the split's training pixels")
    _add_scene(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true", help="print every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and optionally render a class map")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", help="use the split's test pixels instead of all labels")
    p.add_argument("--weights", required=True)
    p.add_argument("--map-out", help="write a P6 PPM classification map here")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="seed recorded in the metrics JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="parameter and MAC counts at batch 64")
    p.add_argument("--config", required=True, help="JSON with model config fields")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("ablate", help="module on/off grid and pieces sweep")
    _add_scene(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--grid", choices=("all", "modules", "pieces"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpectralMambaError as exc:
        print(f"ERR:{exc.kind}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"ERR:io: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
