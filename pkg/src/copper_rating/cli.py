"""Command-line entry point: ``copper-rating {gen-data,train,eval,rate}``.

Config comes from an optional YAML file (``--config``), then
``--set section.key=value`` overrides, then the dedicated flags. The digest of
the effective configuration is written next to every artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .bundle import RatingBundle, evaluate_bundle
from .config import RunConfig, apply_overrides, config_digest, load_config, save_config
from .ladder import LevelLadder
from .scene_sim.dataset import GranuleDataset, generate_dataset, load_images_dir, tree_digest
from .trainer import (FrozenViolation, TrainingDiverged, build_stack_data, freeze, model_from_checkpoint,
                      train_phase1, train_phase2, train_phase3)

log = logging.getLogger("copper_rating")

DATA_ENV = "COPPER_RATING_DATA"
PROVENANCE = "provenance.json"


class CLIError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    # dedicated flags win over the file and --set
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "samples", None) is not None:
        groups = sum(cfg.split_groups)
        if args.samples % groups:
            raise CLIError(f"--samples must be a multiple of {groups} (whole groups split {cfg.split_groups})")
        overrides += [f"num_samples={args.samples}", f"group_size={args.samples // groups}"]
    if getattr(args, "n", None) is not None:
        overrides.append(f"generator.n_stirs={args.n}")
    if getattr(args, "no_cutpaste", False):
        overrides.append("train.cutpaste=false")
    if getattr(args, "nondeterministic", False):
        overrides.append("deterministic=false")
    try:
        return apply_overrides(cfg, overrides)
    except (TypeError, ValueError) as e:
        raise CLIError(f"invalid config: {e}") from e


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise CLIError(f"no dataset given: pass --data or set {DATA_ENV}")
    return Path(root)


def _prepare_dir(path: Path, overwrite: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise CLIError(f"{path} is not empty; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.verify:
        prov = json.loads((out / PROVENANCE).read_text())
        ok_tree = tree_digest(out, exclude=[PROVENANCE]) == prov["dataset_digest"]
        ok_cfg = config_digest(prov["config"]) == prov["config_digest"]
        print(f"dataset digest {'ok' if ok_tree else 'MISMATCH'}; config digest {'ok' if ok_cfg else 'MISMATCH'}")
        return 0 if ok_tree and ok_cfg else 1
    cfg = _effective_config(args)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise CLIError(f"{out} is not empty; pass --overwrite to replace it")
    manifest = generate_dataset(cfg, out, overwrite=args.overwrite)
    digest = tree_digest(out, exclude=[PROVENANCE])
    _dump({"config": cfg.to_dict(), "config_digest": cfg.digest(), "dataset_digest": digest}, out / PROVENANCE)

    ds = GranuleDataset(out)
    mass = np.array([ds.annotation(s)["mass_purity"] for ids in manifest.splits.values() for s in ids])
    print(f"samples: {len(mass)}  n: {manifest.n}  images: {manifest.num_images}")
    for name, ids in manifest.splits.items():
        print(f"  {name}: {len(ids)} samples, {len(ids) * manifest.n} images")
    hist, edges = np.histogram(mass, bins=6, range=(float(cfg.generator.purity_range[0]), 1.0))
    print("mass purity histogram:")
    for c, lo, hi in zip(hist, edges, edges[1:]):
        print(f"  [{lo:.3f}, {hi:.3f}) {c}")
    print(f"manifest: {out / 'manifest.json'}")
    print(f"dataset digest: {digest}")
    return 0


# ---------------------------------------------------------------- train


def _parse_phases(text: str) -> list[int]:
    try:
        phases = sorted({int(p) for p in text.split(",") if p.strip()})
    except ValueError:
        raise CLIError(f"--phases must be a comma list of 1, 2, 3; got {text!r}") from None
    if not phases or any(p not in (1, 2, 3) for p in phases):
        raise CLIError(f"--phases must be a comma list of 1, 2, 3; got {text!r}")
    return phases


def _require(path: Path, phase: int) -> Path:
    if not path.exists():
        raise CLIError(f"missing {path}: run phase {phase} first (train --phases {phase})")
    return path


def _check_digest(ckpt: dict, digest: str, path: Path, verify: bool) -> None:
    if ckpt.get("config_digest") != digest:
        msg = f"{path} was produced with config digest {ckpt.get('config_digest', '')[:12]}, current is {digest[:12]}"
        if verify:
            raise CLIError(msg)
        log.warning(msg)


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    phases = _parse_phases(args.phases)
    ds = GranuleDataset(_data_root(args))
    ckpt = Path(args.ckpt)
    digest = cfg.digest()
    ckpt.mkdir(parents=True, exist_ok=True)
    for p in phases:
        d = ckpt / f"phase{p}"
        if d.exists() and any(d.iterdir()) and not args.resume:
            if not args.overwrite:
                raise CLIError(f"{d} already has checkpoints; pass --overwrite or --resume")
            shutil.rmtree(d)
    save_config(cfg, ckpt / "config.yaml")
    tr, va = ds.split("train"), ds.split("val")
    common = dict(seed=cfg.seed, config_digest=digest, ckpt_dir=ckpt, resume=args.resume,
                  deterministic=cfg.deterministic)

    if 1 in phases:
        seg, rec = train_phase1(tr.flat_images(), tr.flat_masks(), cfg.train, val_images=va.flat_images(),
                                val_masks=va.flat_masks(), **common)
        print(f"phase 1: val mIoU {rec.final.get('val_miou', float('nan')):.4f} ({rec.wall_clock:.0f}s)")
    else:
        path = _require(ckpt / "phase1" / "final.bin", 1)
        seg, meta = model_from_checkpoint(path)
        _check_digest(meta, digest, path, args.verify)
        freeze(seg)

    if 2 in phases or 3 in phases:
        tf = cfg.train.teacher_forcing
        feats = cfg.train.fuse_seg_features
        train = build_stack_data(seg, tr.images, tr.masks, tr.area_purity, tr.mass_purity, tr.levels,
                                 teacher_forcing=tf, with_features=feats)
        val = build_stack_data(seg, va.images, va.masks, va.area_purity, va.mass_purity, va.levels,
                               with_features=feats)
    if 2 in phases:
        purity, rec = train_phase2(seg, train, cfg.train, val=val, image_size=ds.manifest.image_size,
                                   thresholds=tuple(cfg.ladder.thresholds), **common)
        print(f"phase 2: val area MAE {rec.final['val_area_mae']:.4f} ({rec.wall_clock:.0f}s)")
    elif 3 in phases:
        path = _require(ckpt / "phase2" / "final.bin", 2)
        purity, meta = model_from_checkpoint(path)
        _check_digest(meta, digest, path, args.verify)
    if 3 in phases:
        purity, rec = train_phase3(seg, purity, train, cfg.train, val=val, **common)
        print(f"phase 3: val mass MAE {rec.final['val_mass_mae']:.4f}, "
              f"level exact {rec.final['val_level_acc']:.3f} ({rec.wall_clock:.0f}s)")
        freeze(purity)
        bundle = RatingBundle(seg, purity, LevelLadder(cfg.ladder.thresholds), digest)
        bundle.save(ckpt / "bundle")
        print(f"model bundle: {ckpt / 'bundle'} (digest {bundle.digest()[:12]})")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    ds = GranuleDataset(_data_root(args))
    out = Path(args.out)
    _prepare_dir(out, args.overwrite)
    splits = tuple(s.strip() for s in args.splits.split(","))
    bundle = None if args.passthrough else RatingBundle.load(args.model, verify=args.verify)
    summary = evaluate_bundle(bundle, ds, splits, passthrough=args.passthrough, seed=args.seed or 0)
    summary.write(out)
    meta = {
        "metrics": summary.metrics(),
        "model_digest": bundle.digest() if bundle else "passthrough",
        "config_digest": bundle.config_digest if bundle else "",
        "dataset_manifest_digest": tree_digest(ds.root, exclude=[PROVENANCE]) if args.verify else None,
        "splits": list(splits),
    }
    _dump(meta, out / "summary.json")
    m = summary.metrics()
    print(f"area MAE {m['area_mae']:.4f}  mass MAE {m['mass_mae']:.4f}  level exact {m['level_exact']:.3f}")
    for L, err, _ in summary.levels_sweep:
        print(f"  L={L:2d} error {err:.3f}")
    print(f"reports: {out}")
    return 0


# ---------------------------------------------------------------- rate


def cmd_rate(args) -> int:
    bundle = RatingBundle.load(args.model, verify=args.verify)
    if args.ladder:
        bundle.ladder = LevelLadder(tuple(float(t) for t in args.ladder.split(",")))
    src = Path(args.input)
    img_dir = src / "images" if (src / "images").is_dir() else src
    try:
        images = load_images_dir(img_dir)
    except FileNotFoundError as e:
        raise CLIError(str(e)) from e
    if len(images) != bundle.n:
        raise CLIError(f"{img_dir} holds {len(images)} images but the model needs exactly {bundle.n}")
    size = tuple(bundle.purity.image_size)
    if tuple(images.shape[1:3]) != size:
        raise CLIError(f"images are {images.shape[1]}x{images.shape[2]}, the model was trained on {size[0]}x{size[1]}")
    report = bundle.rate(images, sample_id=args.sample_id or src.name, baseline=args.baseline)
    if args.out:
        report.save(args.out)
    print(f"mass purity {report.mass_purity:.4f}  level {report.level}  (ladder level {report.ladder_level})")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="copper-rating", description="Granule purity rating toolkit", allow_abbrev=False)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cfg_args(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--verify", action="store_true", help="check recorded digests")

    p = sub.add_parser("gen-data", allow_abbrev=False, help="generate a synthetic dataset")
    cfg_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, help="number of samples (multiple of the group count)")
    p.add_argument("--n", type=int, help="stirred images per sample")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", allow_abbrev=False, help="run training phases")
    cfg_args(p)
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--ckpt", default="runs/ckpt")
    p.add_argument("--phases", default="1,2,3")
    p.add_argument("--no-cutpaste", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--nondeterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", allow_abbrev=False, help="evaluate a model bundle on a dataset")
    cfg_args(p)
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--model", help="model bundle directory")
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="train,val,test")
    p.add_argument("--passthrough", action="store_true", help="ground truth as predictions (oracle)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rate", allow_abbrev=False, help="rate one sample")
    p.add_argument("--model", required=True)
    p.add_argument("input", help="sample directory or directory of images")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--ladder", help="comma-separated thresholds overriding the bundle's ladder")
    p.add_argument("--baseline", choices=["threshold"])
    p.add_argument("--sample-id")
    p.add_argument("--verify", action="store_true")
    p.set_defaults(func=cmd_rate)
    return ap


def _split_key_value(argv: list[str]) -> list[str]:
    """Turn unknown ``--section.key value`` pairs into ``--set section.key=value``."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a[2:].split("=")[0]:
            key = a[2:]
            if "=" in key:
                out += ["--set", key]
            elif i + 1 < len(argv):
                out += ["--set", f"{key}={argv[i + 1]}"]
                i += 1
            else:
                raise CLIError(f"{a} needs a value")
        else:
            out.append(a)
        i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_split_key_value(argv))
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, FileNotFoundError, FileExistsError, ValueError, TrainingDiverged, FrozenViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
