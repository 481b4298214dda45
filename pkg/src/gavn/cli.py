"""Command-line entry point: gen-data, degrade, train, restore, eval, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from gavn.checkpoint import CheckpointError, load_checkpoint, load_module
from gavn.config import SPLITS, ConfigError, RunConfig, load_config, write_resolved
from gavn.degrade import degrade_clip
from gavn.diffops import oracle_suite
from gavn.landmark import TrainingDiverged as LandmarkDiverged
from gavn.metrics import evaluate_frames, write_table
from gavn.optim import NonFiniteGradient
from gavn.pipeline import (
    LANDMARK_PREFIX,
    build_dataset,
    fit_landmarks,
    landmark_arrays,
    landmark_net_for,
    load_restorer,
    sha256_file,
)
from gavn.reconstructor import build_model
from gavn.synthclip import gen_clip, load_clip, load_manifest, save_clip
from gavn.trainer import TrainingDiverged, train_all

log = logging.getLogger("gavn")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


def clip_name(seed: int) -> str:
    return f"clip_{seed:05d}"


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ValidationError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, ablate=args.ablate, landmarks=args.landmarks,
                              attention=args.attention)


def _expected_clips(cfg: RunConfig, root: Path, split: str) -> list[Path]:
    return [root / split / clip_name(s) for s in cfg.splits[split].seeds]


def _require(paths: list[Path]) -> None:
    missing = [str(p) for p in paths if not (p / "manifest.json").is_file()]
    if missing:
        raise ValidationError("missing input clips:\n  " + "\n  ".join(missing))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data_dir)
    _prepare_out(out, args.force)
    for split in SPLITS:
        for seed in cfg.splits[split].seeds:
            clip = gen_clip(cfg.scene, duration=cfg.duration, seed=seed)
            save_clip(clip, out / split / clip_name(seed), {"split": split})
    write_resolved(cfg, out)
    print(f"wrote {sum(s.count for s in cfg.splits.values())} clips to {out}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    cfg = _config(args)
    src = Path(args.inp or cfg.data_dir)
    out = Path(args.out or cfg.degraded_dir)
    inputs = [p for split in SPLITS for p in _expected_clips(cfg, src, split)]
    _require(inputs)
    _prepare_out(out, args.force)
    for path in inputs:
        clip = load_clip(path)
        for spec in cfg.degradations:
            deg = degrade_clip(clip, spec)
            dest = out / spec.kind / path.parent.name / path.name
            save_clip(deg, dest, {"degradation": spec.to_dict(), "source": str(path)})
    write_resolved(cfg, out)
    print(f"wrote {len(inputs) * len(cfg.degradations)} degraded clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run = Path(args.run_dir or cfg.run_dir)
    resume = args.resume and (run / "last.ckpt").exists()
    if not resume:
        _prepare_out(run, args.force)
    gt_paths = _expected_clips(cfg, Path(cfg.data_dir), "train")
    deg_paths = _expected_clips(cfg, Path(cfg.degraded_dir) / cfg.train_degradation, "train")
    _require(gt_paths + deg_paths)
    gt = [load_clip(p) for p in gt_paths]
    deg = [load_clip(p) for p in deg_paths]
    write_resolved(cfg, run)

    net = None
    if cfg.model.landmarks == "learned":
        if resume:
            net = landmark_net_for(cfg.model)
            load_module(net, load_checkpoint(run / "last.ckpt"), LANDMARK_PREFIX)
        else:
            lm = cfg.landmark_net
            net = fit_landmarks(deg, cfg.model, cfg.train, lm.epochs, lm.lr, lm.batch_size)
    data = build_dataset(deg, gt, cfg.model, cfg.train, net)
    model = build_model(cfg.model, cfg.train.seed)
    result = train_all(model, data, cfg.train, run, resume=resume, stop_after_epoch=args.stop_after_epoch,
                       extra_arrays=landmark_arrays(net))
    last = result.epoch_losses[-1] if result.epoch_losses else {}
    print(f"trained to epoch {last.get('epoch', -1) + 1}, final loss {last.get('loss', float('nan')):.6f}; "
          f"checkpoints in {run}")
    return EXIT_OK


def _clip_dirs(root: Path) -> list[Path]:
    if (root / "manifest.json").is_file():
        return [root]
    found = sorted(p.parent for p in root.rglob("manifest.json"))
    if not found:
        raise ValidationError(f"no clips found under {root}")
    return found


def cmd_restore(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ValidationError(f"checkpoint not found: {ckpt_path}")
    restorer = load_restorer(ckpt_path)
    src, out = Path(args.clip_dir), Path(args.out)
    clips = _clip_dirs(src)
    _prepare_out(out, args.force)
    provenance = {
        "checkpoint": str(ckpt_path.resolve()),
        "checkpoint_sha256": sha256_file(ckpt_path),
        "stage": restorer.header.get("stage"),
        "model_config": restorer.model_cfg.to_dict(),
        "train_config": restorer.train_cfg.to_dict(),
    }
    for path in clips:
        clip = load_clip(path)
        if clip.frames.shape[-2:] != tuple(restorer.model_cfg.frame_size):
            raise ValidationError(
                f"{path}: frame size {clip.frames.shape[-2:]} != model frame size {restorer.model_cfg.frame_size}"
            )
        restored = clip.copy(frames=restorer.restore(clip).astype(np.float32))
        rel = path.relative_to(src) if path != src else Path(path.name)
        save_clip(restored, out / rel, {"provenance": dict(provenance, source=str(path.resolve()))})
    print(f"restored {len(clips)} clip(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_root = Path(args.gt_dir)
    gt_dirs = {p.relative_to(gt_root) if p != gt_root else Path("."): p for p in _clip_dirs(gt_root)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for restored_root in map(Path, args.restored_dir):
        method = restored_root.name
        for rel, gt_path in sorted(gt_dirs.items()):
            rpath = restored_root / rel
            if not (rpath / "manifest.json").is_file():
                raise ValidationError(f"{method}: no restored clip at {rpath} for ground truth {gt_path}")
            gt, pred = load_clip(gt_path), load_clip(rpath)
            if gt.T != pred.T:
                raise ValidationError(f"frame count mismatch for {rel}: {gt.T} ground-truth vs {pred.T} in {rpath}")
            name = str(rel) if str(rel) != "." else gt_path.name
            rep = evaluate_frames(gt.frames, pred.frames, gt.landmarks, clip=name, method=method)
            reports.append(rep)
            rep.save(out / f"{method}__{name.replace('/', '_')}.json")
    write_table(reports, out / "table.csv")
    print((out / "table.csv").read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = oracle_suite(range(args.seeds), tolerance=args.tolerance)
    ok = True
    for name, seed, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{status} {name:24s} seed={seed} max_rel_error={rep.max_rel_error:.3e} {rep.message}".rstrip())
    print("all operators passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--force", action="store_true", help="overwrite non-empty output directories")
    common.add_argument("--ablate", choices=("no-audio", "no-identity"))
    common.add_argument("--landmarks", choices=("oracle", "learned"))
    common.add_argument("--attention", choices=("aligned", "per_branch"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gavn", description="Talking-face video restoration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic train/val/test clips")
    g.add_argument("out", nargs="?", help="output directory (default: config data_dir)")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("degrade", parents=[common], help="apply the degradation grid")
    d.add_argument("inp", nargs="?", metavar="in_dir", help="clean clip root (default: config data_dir)")
    d.add_argument("out", nargs="?", help="output root (default: config degraded_dir)")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--run-dir", help="override the config run_dir")
    t.add_argument("--resume", action="store_true", help="continue from run_dir/last.ckpt if present")
    t.add_argument("--stop-after-epoch", type=int, help="stop once this many epochs are complete")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", parents=[common], help="sliding-window restoration of clips")
    r.add_argument("checkpoint")
    r.add_argument("clip_dir")
    r.add_argument("out")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", parents=[common], help="metric reports and aggregate CSV")
    e.add_argument("gt_dir")
    e.add_argument("restored_dir", nargs="+", help="one directory per method, mirroring gt_dir")
    e.add_argument("--out", default="eval", help="report directory")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, LandmarkDiverged, NonFiniteGradient, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
