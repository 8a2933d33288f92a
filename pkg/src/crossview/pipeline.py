"""Experiment plumbing shared by the CLI and the acceptance suite.

Turns scene pairs into normalised training tensors and per-pair projection
grids, runs the conditional training loop, samples with DDIM and scores
samples with PSNR/SSIM.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import evalmetrics
from .denoiser import ConditionInputs, CrossViewModel, ModelConfig, PYRAMID_STRIDES
from .diffusion import TrainConfig, ddim_sample, train_step
from .numeric import Adam, Tensor, checkpoint, no_grad
from .scenegen import ScenePair
from .warp import Condition, ProjectionGrid, build_grid

log = logging.getLogger(__name__)

TASKS = {"sat2grd": "s2g", "grd2sat": "g2s"}
RUN_SCHEMA_VERSION = 1
UNIFIED_STRIDE = 2


class ConfigError(ValueError):
    pass


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    keys = {"data": 0, "init": 1, "noise": 2, "sample": 3}
    return {k: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(v,))) for k, v in keys.items()}


@dataclass
class RunConfig:
    task: str = "sat2grd"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.model.mode != self.train.conditioning:
            self.train.conditioning = self.model.mode

    def to_json(self) -> dict:
        return {"schema_version": RUN_SCHEMA_VERSION, "task": self.task, "model": self.model.to_json(),
                "train": self.train.to_json(), "checkpoint_every": self.checkpoint_every,
                "log_every": self.log_every}

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        if d.get("schema_version", RUN_SCHEMA_VERSION) != RUN_SCHEMA_VERSION:
            raise ConfigError(f"unsupported run config schema {d.get('schema_version')}")
        try:
            model = ModelConfig.from_json(d.get("model", {}))
            train = TrainConfig(**{k: v for k, v in d.get("train", {}).items()
                                   if k in TrainConfig.__dataclass_fields__})
            return cls(d.get("task", "sat2grd"), model, train, int(d.get("checkpoint_every", 0)),
                       int(d.get("log_every", 50)))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


# -- data ---------------------------------------------------------------------


def to_signed(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) * 2.0 - 1.0).astype(dtype)


def to_unit(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


@dataclass
class TaskData:
    """Stacked targets, sources and grids for one task over a list of pairs."""

    target: np.ndarray
    source: np.ndarray
    level_grids: list[ProjectionGrid]
    image_grid: ProjectionGrid
    eval_mask: np.ndarray
    direction: str

    def __len__(self) -> int:
        return self.target.shape[0]

    def inputs(self, idx) -> ConditionInputs:
        idx = np.asarray(idx)
        sel = lambda g: ProjectionGrid(g.src_coords[idx], g.valid[idx], g.src_hw, g.wrap_cols)
        return ConditionInputs(self.source[idx], [sel(g) for g in self.level_grids], sel(self.image_grid),
                               self.direction)


def pair_grids(pair: ScenePair, direction: str):
    args = (direction, pair.sat_camera, pair.ground_camera, pair.pose)
    levels = [build_grid(*args, target_stride=UNIFIED_STRIDE, source_stride=s) for s in PYRAMID_STRIDES]
    image = build_grid(*args, target_stride=UNIFIED_STRIDE, source_stride=1)
    full = build_grid(*args, target_stride=1, source_stride=1)
    return levels, image, full.valid


def prepare(pairs: Sequence[ScenePair], task: str, dtype=np.float32) -> TaskData:
    direction = TASKS[task]
    tgt, src, lv, im, masks = [], [], [], [], []
    for p in pairs:
        levels, image, mask = pair_grids(p, direction)
        if direction == "s2g":
            tgt.append(p.grd_image), src.append(p.sat_image)
        else:
            tgt.append(p.sat_image), src.append(p.grd_image)
        lv.append(levels), im.append(image), masks.append(mask)
    level_grids = [ProjectionGrid.stack([g[i] for g in lv]) for i in range(len(PYRAMID_STRIDES))]
    return TaskData(to_signed(np.stack(tgt), dtype), to_signed(np.stack(src), dtype), level_grids,
                    ProjectionGrid.stack(im), np.stack(masks), direction)


def model_config_for(task: str, pairs: Sequence[ScenePair], **overrides) -> ModelConfig:
    p = pairs[0]
    grd_hw = p.grd_image.shape[:2]
    sat_hw = p.sat_image.shape[:2]
    image_hw, source_hw = (grd_hw, sat_hw) if task == "sat2grd" else (sat_hw, grd_hw)
    return ModelConfig(image_hw=tuple(image_hw), source_hw=tuple(source_hw), **overrides)


# -- training -----------------------------------------------------------------


@dataclass
class RunResult:
    model: CrossViewModel
    losses: list[float]
    config: RunConfig

    def smoothed(self, window: int = 100) -> float:
        return float(np.mean(self.losses[-window:]))


def train_run(data: TaskData, cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train from scratch; deterministic under ``cfg.train.seed``."""
    tc = cfg.train
    streams = seed_streams(tc.seed)
    model = CrossViewModel(cfg.model, seed=tc.seed, dtype=tc.dtype)
    opt = Adam(model.parameters(), lr=tc.lr, betas=tc.betas, grad_clip=tc.grad_clip)
    sched = tc.schedule()
    target = data.target.astype(tc.dtype, copy=False)
    source = data.source.astype(tc.dtype, copy=False)
    data = TaskData(target, source, data.level_grids, data.image_grid, data.eval_mask, data.direction)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
        loss_fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(loss_fh)
        writer.writerow(["step", "loss"])
    n = len(data)
    bs = min(tc.batch_size, n)
    order = streams["data"].permutation(n)
    cursor = 0
    losses = []
    try:
        for step in range(1, tc.steps + 1):
            if cursor + bs > n:
                order = streams["data"].permutation(n)
                cursor = 0
            idx = np.sort(order[cursor:cursor + bs])
            cursor += bs
            inputs = data.inputs(idx)
            value = train_step(lambda x_t, t: model(x_t, t, inputs), data.target[idx], opt, sched, streams["noise"])
            losses.append(value)
            if out is not None:
                writer.writerow([step, repr(value)])
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out / "checkpoints" / f"step_{step:06d}.ckpt", model, cfg)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f (avg50 %.4f)", step, value, np.mean(losses[-50:]))
    finally:
        if out is not None:
            loss_fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoints" / "final.ckpt", model, cfg)
    return RunResult(model, losses, cfg)


def save_checkpoint(path, model: CrossViewModel, cfg: RunConfig) -> None:
    arrays = dict(model.state_arrays())
    arrays["__config__"] = np.frombuffer(json.dumps(cfg.to_json(), sort_keys=True).encode(), dtype=np.uint8)
    checkpoint.save(path, arrays)


def load_checkpoint(path) -> tuple[CrossViewModel, RunConfig]:
    arrays = checkpoint.load(path)
    if "__config__" not in arrays:
        raise ConfigError(f"{path}: checkpoint carries no run config")
    cfg = RunConfig.from_json(json.loads(arrays.pop("__config__").tobytes().decode()))
    model = CrossViewModel(cfg.model, seed=cfg.train.seed, dtype=cfg.train.dtype)
    model.load_arrays(arrays)
    return model, cfg


# -- sampling and scoring -----------------------------------------------------


def sample(model: CrossViewModel, inputs: ConditionInputs, n_per: int, rng: np.random.Generator,
           steps: int = 50, eta: float = 0.0, sched=None, batch: int = 64) -> np.ndarray:
    """``n_per`` DDIM samples for each condition in ``inputs``; (P, n_per, H, W, C) in [0, 1]."""
    cfg = model.cfg
    sched = sched or TrainConfig().schedule()
    dtype = next(iter(model.params.values())).dtype
    p = inputs.source.shape[0]
    h, w = cfg.image_hw
    with no_grad():
        cond = model.condition(inputs)
        cmap = np.repeat(cond.map.data, n_per, axis=0)
        out = np.empty((p * n_per, h, w, cfg.image_channels))
        for lo in range(0, p * n_per, batch):
            hi = min(lo + batch, p * n_per)
            c = Condition(Tensor(cmap[lo:hi]), cond.direction)
            fn = lambda x, t: model.denoiser(x.astype(dtype), t, c).data
            out[lo:hi] = ddim_sample(fn, (hi - lo, h, w, cfg.image_channels), sched, rng, steps=steps, eta=eta,
                                     clip_x0=1.0, dtype=dtype)
    return to_unit(out).reshape(p, n_per, h, w, cfg.image_channels)


def score_samples(samples: np.ndarray, targets: np.ndarray, masks: np.ndarray | None = None) -> list[dict]:
    """Per-pair mean-of-n and best-of-n PSNR/SSIM (plus masked variants)."""
    rows = []
    for i in range(samples.shape[0]):
        tgt = targets[i]
        m = None if masks is None else masks[i]
        per = []
        for s in samples[i]:
            r = {"psnr": evalmetrics.psnr(s, tgt), "ssim": evalmetrics.ssim(s, tgt)}
            if m is not None and m.any():
                r["psnr_masked"] = evalmetrics.psnr(s, tgt, m)
                try:
                    r["ssim_masked"] = evalmetrics.ssim(s, tgt, m)
                except evalmetrics.MetricError:
                    r["ssim_masked"] = float("nan")
            per.append(r)
        keys = per[0].keys()
        rows.append({
            "mean": {k: float(np.mean([r[k] for r in per])) for k in keys},
            "best": {k: float(np.max([r[k] for r in per])) for k in keys},
            "n": len(per),
        })
    return rows


def mean_pairwise_mse(samples: np.ndarray) -> float:
    """Average over conditions of the mean pairwise MSE among that condition's samples."""
    vals = []
    for group in samples:
        n = group.shape[0]
        d = [np.mean((group[i] - group[j]) ** 2) for i in range(n) for j in range(i + 1, n)]
        vals.append(np.mean(d))
    return float(np.mean(vals))


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def montage(images: Sequence[np.ndarray], cols: int) -> np.ndarray:
    h, w, c = images[0].shape
    rows = math.ceil(len(images) / cols)
    canvas = np.ones((rows * (h + 2), cols * (w + 2), c))
    for k, im in enumerate(images):
        r, q = divmod(k, cols)
        canvas[r * (h + 2): r * (h + 2) + h, q * (w + 2): q * (w + 2) + w] = im
    return canvas
