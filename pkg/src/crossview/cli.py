"""Command line entry point: data generation, projection, training, sampling, scoring, ablation.

Every path is resolved against ``--workdir``. Exit codes: 0 success, 2 bad
configuration, 3 data or IO problem, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import experiments, pipeline, scenegen
from .diffusion import NumericalError
from .numeric.checkpoint import CheckpointError
from .scenegen import DatasetError, SceneConfig
from .warp import bilinear_sample, build_grid

log = logging.getLogger("crossview")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SCHEMA_VERSION = 1


def load_config(path) -> dict:
    """Read a JSON config file and check its schema version."""
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise pipeline.ConfigError(f"cannot read config {path}: {e}") from e
    except ValueError as e:
        raise pipeline.ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(d, dict):
        raise pipeline.ConfigError(f"{path}: top level must be an object")
    if d.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        raise pipeline.ConfigError(f"{path}: unsupported schema_version {d.get('schema_version')}")
    return d


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args, root: Path) -> int:
    d = load_config(root / args.config if args.config else None)
    d.update(_overrides(args, ["alignment", "camera"]))
    cfg = SceneConfig.from_json(d)
    pairs = scenegen.generate(cfg, args.count, args.seed)
    out = scenegen.write_dataset(root / args.out, pairs, cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["seed"] = args.seed
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_project(args, root: Path) -> int:
    pair = scenegen.read_pair(root / args.pair)
    grid = build_grid(args.direction, pair.sat_camera, pair.ground_camera, pair.pose)
    src = pair.sat_image if args.direction == "s2g" else pair.grd_image
    warped, valid = bilinear_sample(src, grid)
    out = root / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_png(out, warped.data)
    mask_path = out.with_name(out.stem + "_mask.png")
    Image.fromarray((valid * 255).astype(np.uint8)).save(mask_path)
    print(f"valid pixels {int(valid.sum())}/{valid.size}; wrote {out} and {mask_path.name}")
    return EXIT_OK


def _run_config(args, root: Path, pairs) -> pipeline.RunConfig:
    d = load_config(root / args.config if args.config else None)
    base = pipeline.RunConfig.from_json(d) if d else pipeline.RunConfig()
    task = args.task or base.task
    model_kw = {**base.model.to_json(), **_overrides(args, ["mode", "condition"])}
    for k in ("image_hw", "source_hw"):
        model_kw.pop(k, None)
    model = pipeline.model_config_for(task, pairs, **model_kw)
    train = replace(base.train, seed=args.seed, conditioning=model.mode,
                    **_overrides(args, ["steps", "batch_size", "lr", "precision"]))
    every = args.checkpoint_every if args.checkpoint_every is not None else base.checkpoint_every
    return pipeline.RunConfig(task, model, train, every, base.log_every)


def cmd_train(args, root: Path) -> int:
    pairs = scenegen.read_dataset(root / args.dataset)
    cfg = _run_config(args, root, pairs)
    data = pipeline.prepare(pairs, cfg.task, cfg.train.dtype)
    res = pipeline.train_run(data, cfg, root / args.out)
    print(f"trained {cfg.train.steps} steps; final smoothed loss {res.smoothed():.4f}")
    return EXIT_OK


def _select(pairs_root: Path, ids: str | None) -> list[Path]:
    dirs = scenegen.pair_dirs(pairs_root)
    if not dirs:
        raise DatasetError(f"no pairs under {pairs_root}")
    if ids is None:
        return dirs
    by_id = {d.name: d for d in dirs}
    wanted = [s.strip() for s in ids.split(",") if s.strip()]
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise DatasetError(f"unknown pair ids {missing}")
    return [by_id[w] for w in wanted]


def cmd_sample(args, root: Path) -> int:
    model, cfg = pipeline.load_checkpoint(root / args.checkpoint)
    dirs = _select(root / args.dataset, args.pairs)
    pairs = [scenegen.read_pair(d) for d in dirs]
    expect = pipeline.model_config_for(cfg.task, pairs[:1])
    if (expect.image_hw, expect.source_hw) != (model.cfg.image_hw, model.cfg.source_hw):
        raise pipeline.ConfigError(f"checkpoint expects images {model.cfg.image_hw} from {model.cfg.source_hw}, "
                                   f"dataset provides {expect.image_hw} from {expect.source_hw}")
    data = pipeline.prepare(pairs, cfg.task, cfg.train.dtype)
    rng = pipeline.seed_streams(args.seed)["sample"]
    samples = pipeline.sample(model, data.inputs(np.arange(len(pairs))), args.n, rng, steps=args.steps, eta=args.eta)
    out = root / args.out
    out.mkdir(parents=True, exist_ok=True)
    targets = pipeline.to_unit(data.target)
    rows = []
    for d, group, tgt in zip(dirs, samples, targets):
        (out / d.name).mkdir(exist_ok=True)
        for k, img in enumerate(group):
            pipeline.save_png(out / d.name / f"sample_{k:02d}.png", img)
        rows.extend([tgt, *group])
    pipeline.save_png(out / "montage.png", pipeline.montage(rows, args.n + 1))
    _write_json(out / "samples.json", {
        "schema_version": CONFIG_SCHEMA_VERSION, "checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
        "task": cfg.task, "direction": pipeline.TASKS[cfg.task], "n": args.n, "steps": args.steps,
        "eta": args.eta, "seed": args.seed, "pair_ids": [d.name for d in dirs]})
    print(f"wrote {args.n} samples for {len(dirs)} pairs to {out}")
    return EXIT_OK


EVAL_COLUMNS = ["pair_id", "direction", "n"] + [f"{m}_{s}" for m in ("psnr", "psnr_masked", "ssim", "ssim_masked")
                                                 for s in ("mean", "best")]


def _read_png(path: Path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path), dtype=np.float64) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e


def cmd_eval(args, root: Path) -> int:
    sdir = root / args.samples
    if not (sdir / "samples.json").is_file():
        raise DatasetError(f"{sdir} holds no samples.json")
    meta = load_config(sdir / "samples.json")
    task, direction = meta["task"], meta["direction"]
    rows = []
    for pid in meta["pair_ids"]:
        pair = scenegen.read_pair(root / args.dataset / "pairs" / pid)
        files = sorted((sdir / pid).glob("sample_*.png"))
        if not files:
            raise DatasetError(f"no samples for pair {pid}")
        samples = np.stack([_read_png(f) for f in files])
        target = pair.grd_image if task == "sat2grd" else pair.sat_image
        if samples.shape[1:] != target.shape:
            raise DatasetError(f"pair {pid}: samples {samples.shape[1:]} do not match target {target.shape}")
        mask = pipeline.pair_grids(pair, direction)[2] if args.masks == "on" else None
        score = pipeline.score_samples(samples[None], target[None], None if mask is None else mask[None])[0]
        row = {"pair_id": pid, "direction": direction, "n": score["n"]}
        for m in ("psnr", "psnr_masked", "ssim", "ssim_masked"):
            for s in ("mean", "best"):
                row[f"{m}_{s}"] = score[s].get(m, float("nan"))
        rows.append(row)
    summary = {"pair_id": "summary", "direction": direction, "n": int(np.mean([r["n"] for r in rows]))}
    for c in EVAL_COLUMNS[3:]:
        summary[c] = float(np.mean([r[c] for r in rows]))
    out = root / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        w.writerows(rows + [summary])
    print(f"{task} ({len(rows)} pairs, n={summary['n']}): PSNR {summary['psnr_mean']:.3f} "
          f"(best {summary['psnr_best']:.3f})  SSIM {summary['ssim_mean']:.4f} (best {summary['ssim_best']:.4f})")
    if args.masks == "on":
        print(f"masked: PSNR {summary['psnr_masked_mean']:.3f}  SSIM {summary['ssim_masked_mean']:.4f}")
    print("LPIPS n/a  FID n/a")
    return EXIT_OK


def cmd_ablate(args, root: Path) -> int:
    d = load_config(root / args.config if args.config else None)
    study = experiments.StudyConfig.from_json(d.get("study", {}))
    study = replace(study, **_overrides(args, ["steps", "n_eval"]))
    seeds = args.seeds if args.seeds is not None else d.get("seeds", [0, 1, 2])
    dataset = args.dataset if args.dataset is not None else d.get("dataset")
    task = args.task or d.get("task", "sat2grd")
    data = None
    if dataset is not None:
        data = experiments.split_by_alignment(scenegen.read_dataset(root / dataset), study.n_eval)
    out = root / args.out
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"schema_version": CONFIG_SCHEMA_VERSION, "study": study.to_json(), "seeds": list(seeds),
                "dataset": dataset, "task": task}
    _write_json(out / "ablate_config.json", snapshot)
    table = experiments.ablation_table(study, seeds=tuple(seeds), task=task, data=data)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "alignment", "psnr_mean"] + [f"psnr_seed{s}" for s in seeds])
        for (cond, align), vals in table.items():
            w.writerow([cond, align, repr(float(np.mean(vals)))] + [repr(v) for v in vals])
    print(f"{'condition':<10} {'alignment':<15} {'PSNR':>8}")
    for (cond, align), vals in table.items():
        print(f"{cond:<10} {align:<15} {np.mean(vals):8.3f}")
    for cond in ("gcc", "original"):
        print(f"{cond}: camera->north drop {experiments.degradation(table, cond):.3f} dB")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crossview", description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default=".", help="root that all relative paths are resolved against")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render paired satellite/ground scenes")
    p.add_argument("--config", help="scene config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--alignment", choices=["camera_aligned", "north_aligned", "mixed"])
    p.add_argument("--camera", choices=["spherical", "pinhole"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("project", help="warp one view of a pair into the other")
    p.add_argument("--pair", required=True, help="pair directory")
    p.add_argument("--direction", choices=["s2g", "g2s"], required=True)
    p.add_argument("--out", required=True, help="output PNG; the mask goes next to it")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train a conditional denoiser")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", choices=sorted(pipeline.TASKS))
    p.add_argument("--condition", choices=["original", "projected_image", "projected_feature", "gcc", "none"])
    p.add_argument("--mode", choices=["tokens", "pixel_aligned"])
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw DDIM samples for dataset pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", help="comma-separated pair ids (default: all)")
    p.add_argument("--n", type=int, default=10, help="samples per condition")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score samples against the dataset targets")
    p.add_argument("--samples", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks", choices=["on", "off"], default="on")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="condition x alignment study")
    p.add_argument("--config", help="study JSON (an earlier ablate_config.json works)")
    p.add_argument("--dataset", help="mixed-alignment dataset; fresh scenes per seed if omitted")
    p.add_argument("--task", choices=sorted(pipeline.TASKS))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    root = Path(args.workdir)
    try:
        return args.func(args, root)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
