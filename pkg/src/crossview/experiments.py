"""Small end-to-end studies: conditional vs unconditional, alignment ablation, sample diversity.

Each study generates its own scenes, trains from scratch and scores DDIM
samples on held-out pairs. Sizes are chosen to run on one CPU core.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import pipeline, scenegen
from .diffusion import TrainConfig
from .scenegen import SceneConfig, ScenePair
from .warp import bilinear_sample, build_grid

log = logging.getLogger(__name__)

# scaled-down scenes for the multi-run studies
SMALL_SCENE = dict(sat_size=32, coverage_m=40.0, grd_height=16, grd_width=64)


def cross_render_error(pair: ScenePair, direction: str = "s2g") -> tuple[float, int]:
    """Masked mean abs difference between the warped source render and the target render.

    Only pixels whose every bilinear neighbour is unoccluded ground plane in
    both views count. Ground-view colours are divided by the scene
    illumination so that only geometry is compared. Returns (mae, n_pixels).
    """
    scene = pair.scene
    if scene is None:
        raise ValueError("pair carries no scene description")
    grd, kind = scenegen.render_ground(scene, pair.ground_camera, pair.pose, return_kind=True)
    grd = grd / scene.illumination
    sat_ground = (pair.sat_height_map == 0).astype(np.float64)[..., None]
    grd_ground = (kind == 1).astype(np.float64)[..., None]
    grid = build_grid(direction, pair.sat_camera, pair.ground_camera, pair.pose)
    if direction == "s2g":
        src, src_ok, tgt, tgt_ok = pair.sat_image, sat_ground, grd, grd_ground
    else:
        src, src_ok, tgt, tgt_ok = grd, grd_ground, pair.sat_image, sat_ground
    warped, valid = bilinear_sample(src, grid)
    ok, _ = bilinear_sample(src_ok, grid)
    mask = valid & (ok.data[..., 0] == 1.0) & (tgt_ok[..., 0] == 1.0)
    n = int(mask.sum())
    if n == 0:
        return float("nan"), 0
    return float(np.mean(np.abs(warped.data[mask] - tgt[mask]))), n


@dataclass
class StudyConfig:
    scene: dict = field(default_factory=dict)
    n_train: int = 512
    n_eval: int = 64
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    n_samples: int = 1
    ddim_steps: int = 50
    mode: str = "tokens"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "StudyConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def make_data(study: StudyConfig, alignment: str, seed: int, **scene_overrides):
    cfg = SceneConfig(alignment=alignment, **{**study.scene, **scene_overrides})
    pairs = scenegen.generate(cfg, study.n_train + study.n_eval, seed)
    return pairs[:study.n_train], pairs[study.n_train:]


def train_model(train_pairs, task: str, condition: str, seed: int, study: StudyConfig, out_dir=None):
    data = pipeline.prepare(train_pairs, task)
    mc = pipeline.model_config_for(task, train_pairs, mode=study.mode, condition=condition)
    tc = TrainConfig(batch_size=study.batch_size, lr=study.lr, steps=study.steps, seed=seed,
                     conditioning=study.mode)
    return pipeline.train_run(data, pipeline.RunConfig(task, mc, tc, log_every=200), out_dir)


def draw_samples(result: pipeline.RunResult, eval_pairs, task: str, n_per: int, seed: int, steps: int = 50):
    data = pipeline.prepare(eval_pairs, task)
    rng = pipeline.seed_streams(seed)["sample"]
    s = pipeline.sample(result.model, data.inputs(np.arange(len(data))), n_per, rng, steps=steps)
    return s, pipeline.to_unit(data.target), data.eval_mask


def mean_psnr(result, eval_pairs, task: str, study: StudyConfig, seed: int) -> float:
    s, tgt, _ = draw_samples(result, eval_pairs, task, study.n_samples, seed, study.ddim_steps)
    rows = pipeline.score_samples(s, tgt)
    return float(np.mean([r["mean"]["psnr"] for r in rows]))


@dataclass
class ConditioningGain:
    cond_losses: list[float]
    uncond_losses: list[float]
    cond_psnr: float
    uncond_psnr: float

    @property
    def gain_db(self) -> float:
        return self.cond_psnr - self.uncond_psnr

    def loss_drop(self, window: int = 100) -> float:
        """Fractional fall of the smoothed loss from its first-50-step average."""
        start = float(np.mean(self.cond_losses[:50]))
        return 1.0 - float(np.mean(self.cond_losses[-window:])) / start


def conditioning_gain(study: StudyConfig | None = None, seed: int = 0, data_seed: int = 1000,
                      out_dir=None) -> ConditioningGain:
    """Sat2Grd with the gcc condition against the same denoiser trained on a zero condition."""
    study = study or StudyConfig()
    train, held = make_data(study, "camera_aligned", data_seed)
    runs = {}
    for cond in ("gcc", "none"):
        sub = None if out_dir is None else f"{out_dir}/{cond}"
        runs[cond] = train_model(train, "sat2grd", cond, seed, study, sub)
        log.info("trained %s: smoothed loss %.4f", cond, runs[cond].smoothed())
    return ConditioningGain(runs["gcc"].losses, runs["none"].losses,
                            mean_psnr(runs["gcc"], held, "sat2grd", study, seed),
                            mean_psnr(runs["none"], held, "sat2grd", study, seed))


def split_by_alignment(pairs, n_eval: int) -> dict:
    """Group a mixed dataset by alignment mode; the last ``n_eval`` of each group are held out."""
    groups: dict[str, list] = {}
    for p in pairs:
        groups.setdefault(p.alignment_mode, []).append(p)
    out = {}
    for mode, group in groups.items():
        if len(group) <= n_eval:
            raise ValueError(f"{mode}: {len(group)} pairs cannot hold out {n_eval}")
        out[mode] = (group[:-n_eval], group[-n_eval:])
    return out


def ablation_table(study: StudyConfig, seeds=(0, 1, 2), conditions=("gcc", "original"),
                   alignments=("camera_aligned", "north_aligned"), task: str = "sat2grd",
                   data: dict | None = None) -> dict:
    """PSNR per (condition, alignment), one entry per seed.

    Without ``data`` every seed draws fresh scenes; otherwise ``data`` maps an
    alignment mode to fixed (train, held-out) pairs shared by all seeds.
    """
    table = {(c, a): [] for c in conditions for a in alignments}
    for seed in seeds:
        for a in alignments:
            if data is None:
                train, held = make_data(study, a, 2000 + seed)
            elif a not in data:
                raise ValueError(f"dataset has no {a} pairs")
            else:
                train, held = data[a]
            for c in conditions:
                res = train_model(train, task, c, seed, study)
                table[(c, a)].append(mean_psnr(res, held, task, study, seed))
                log.info("seed %d %s %s: psnr %.3f", seed, c, a, table[(c, a)][-1])
    return table


def degradation(table: dict, condition: str) -> float:
    """Seed-averaged PSNR drop going from camera-aligned to north-aligned data."""
    cam = np.mean(table[(condition, "camera_aligned")])
    north = np.mean(table[(condition, "north_aligned")])
    return float(cam - north)


# appearance not recoverable from the satellite view
AMBIGUOUS_LIGHTING = dict(illumination_range=(0.6, 1.4), sky_jitter=0.15)


def diversity(study: StudyConfig, seeds=(0, 1, 2), n_conditions: int = 8, n_per: int = 10) -> dict:
    """Mean pairwise MSE among samples for each task, one entry per seed."""
    study = replace(study, n_eval=n_conditions)
    out = {"sat2grd": [], "grd2sat": []}
    for seed in seeds:
        train, held = make_data(study, "camera_aligned", 3000 + seed, **AMBIGUOUS_LIGHTING)
        for task in out:
            res = train_model(train, task, "gcc", seed, study)
            s, _, _ = draw_samples(res, held, task, n_per, seed, study.ddim_steps)
            out[task].append(pipeline.mean_pairwise_mse(s))
            log.info("seed %d %s: pairwise mse %.5f", seed, task, out[task][-1])
    return out
