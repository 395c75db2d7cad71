"""Command-line entry points.

Exit codes: 0 success, 2 validation failure (bad input, failed check),
1 any other error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import load_config
from .data import check_pair, export_error_map, generate, load_pair, save_pair, scene_config, write_manifest
from .train import (Trainer, evaluate, format_table, load_dataset, load_model, predict, prepare,
                    run_ablation, synthetic_dataset)
from .metrics import write_report

log = logging.getLogger("egoflow")


class ValidationFailure(Exception):
    """Input or check failure; maps to exit code 2."""


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ValidationFailure(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args):
    try:
        cfg = load_config(args.config, args.profile, _overrides(args.set))
    except (KeyError, ValueError, FileNotFoundError) as e:
        raise ValidationFailure(f"config: {e}") from e
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _scene(cfg, seed: int) -> dict:
    scene = dict(cfg.scene)
    scene.setdefault("n_points", cfg.train.n_points)
    scene["seed"] = seed
    return scene


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed
    names, fg_frac, mags = [], [], []
    for i in range(args.count):
        pair = generate(scene_config(_scene(cfg, seed + i)))
        try:
            check_pair(pair)
        except ValueError as e:
            raise ValidationFailure(f"pair {i}: {e}") from e
        name = f"pair_{i:05d}.egpr"
        save_pair(pair, out / name)
        names.append(name)
        fg_frac.append(float(pair.y_P.mean()))
        mags.append(float(np.linalg.norm(pair.S, axis=1).mean()))
    write_manifest(out, names)
    print(f"wrote {len(names)} pairs to {out}")
    print(f"FG fraction: mean {np.mean(fg_frac):.4f} min {np.min(fg_frac):.4f} max {np.max(fg_frac):.4f}")
    print(f"mean flow magnitude: {np.mean(mags):.4f} m")
    return 0


def _dataset(path, what: str):
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise ValidationFailure(f"{what}: {e}") from e


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dataset:
        cfg.train.dataset = args.dataset
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    out = Path(args.out or cfg.train.out_dir)
    train = _dataset(cfg.train.dataset, "training set")
    val = _dataset(cfg.train.val_dataset, "validation set") if cfg.train.val_dataset else []
    trainer = Trainer(cfg, train, val, out)
    if args.checkpoint:
        trainer.resume(args.checkpoint)
    trainer.run()
    print(f"trained {trainer.step} steps, {trainer.epoch} epochs; checkpoint {trainer.checkpoint_path()}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    pairs = _dataset(args.dataset or cfg.train.val_dataset, "evaluation set")
    store = None
    if not args.oracle:
        if not args.checkpoint:
            raise ValidationFailure("eval needs --checkpoint (or --oracle)")
        store = load_model(args.checkpoint, cfg.train.seed)
    samples = [prepare(p, cfg.train.n_points, 7919 + i, False, cfg.model.neighbors) for i, p in enumerate(pairs)]
    rows, agg = evaluate(store, samples, cfg, oracle=args.oracle)
    out = Path(args.out or "metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rows, agg)
    for key in ("EPE3D", "EPE3D_fg", "EPE3D_bg", "Acc3DS", "Acc3DR", "Out3D", "RAE", "RTE", "rec_FG"):
        print(f"{key:>9}: {agg[key]:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    if not args.checkpoint or not args.pair:
        raise ValidationFailure("infer needs --checkpoint and --pair")
    store = load_model(args.checkpoint, cfg.train.seed)
    pair = load_pair(args.pair)
    sample = prepare(pair, cfg.train.n_points, cfg.train.seed, False, cfg.model.neighbors)
    pred = predict(store, sample, cfg)
    out = Path(args.out or "infer")
    out.mkdir(parents=True, exist_ok=True)
    P = sample.pair.P.astype(np.float64)
    table = np.column_stack([P, pred["flow"], pred["fg"].astype(np.float64)])
    np.savetxt(out / "flow.csv", table, delimiter=",", fmt="%.6f", header="x,y,z,fx,fy,fz,fg", comments="")
    np.savetxt(out / "transform.txt", np.column_stack([pred["R"], pred["t"]]), fmt="%.9f")
    export_error_map(P, pred["flow"], sample.pair.S, out / "error_map.ply")
    epe = np.linalg.norm(pred["flow"] - sample.pair.S, axis=1).mean()
    print(f"wrote {out}; EPE3D {epe:.4f} m, FG points {int(pred['fg'].sum())}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_all(args.instances, args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<24} n={r.instances} max_rel={r.max_rel_error:.2e}")
    return 0 if all(r.passed for r in results) else 2


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seed = cfg.train.seed
    if cfg.train.dataset:
        train = _dataset(cfg.train.dataset, "training set")
    else:
        train = synthetic_dataset(args.train_count, seed, _scene(cfg, seed))
    if cfg.train.val_dataset:
        test = _dataset(cfg.train.val_dataset, "evaluation set")
    else:
        test = synthetic_dataset(args.test_count, seed + 100000, _scene(cfg, seed))
    rows = [int(r) for r in args.rows.split(",")]
    table = run_ablation(cfg, train, test, rows, args.max_steps)
    print(format_table(table))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--profile", choices=("paper", "desk"), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--out")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="egoflow", description="Scene flow with ego-motion and FG/BG masks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic pairs and a manifest")
    p.add_argument("--count", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a dataset")
    p.add_argument("--dataset")
    p.add_argument("--oracle", action="store_true", help="use the ground truth as prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="run one pair and export flow and error map")
    p.add_argument("--pair")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every op")
    p.add_argument("--instances", type=int, default=gradcheck.INSTANCES)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation rows")
    p.add_argument("--rows", default="1,2,3,4,5,6,7")
    p.add_argument("--train-count", type=int, default=64)
    p.add_argument("--test-count", type=int, default=32)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporting
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
