"""Feature extractor, condition builders and the conditional noise predictor.

The extractor is three stride-2 conv stages whose outputs form the feature
pyramid. The denoiser is a small encoder-decoder (two down, two up stages
with skips) with additive timestep embeddings. In ``tokens`` mode the
condition enters through one cross-attention layer at the bottleneck; in
``pixel_aligned`` mode it is resized to the image and concatenated to the
input channels.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .numeric import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    matmul,
    mul,
    reshape,
    silu,
    softmax,
    transpose,
    upsample2x,
)
from .warp import Condition, FeaturePyramid, ProjectionGrid, build_gcc, pixel_align, tokenize

MODES = ("tokens", "pixel_aligned")
CONDITIONS = ("gcc", "projected_feature", "projected_image", "original", "none")
PYRAMID_STRIDES = (2, 4, 8)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_hw: tuple[int, int] = (32, 128)
    source_hw: tuple[int, int] = (64, 64)
    image_channels: int = 3
    extractor_channels: tuple[int, int, int] = (8, 16, 32)
    channels: tuple[int, int, int] = (16, 32, 32)
    cond_dim: int = 32
    time_dim: int = 32
    attn_dim: int = 32
    mode: str = "tokens"
    condition: str = "gcc"
    pos_enc: bool = True

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        self.source_hw = tuple(self.source_hw)
        self.extractor_channels = tuple(self.extractor_channels)
        self.channels = tuple(self.channels)
        if self.mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.condition not in CONDITIONS:
            raise ModelError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        for hw in (self.image_hw, self.source_hw):
            if hw[0] % 8 or hw[1] % 8:
                raise ModelError(f"image dims {hw} must be divisible by 8")

    @property
    def cond_hw(self) -> tuple[int, int]:
        """Spatial dims of the condition map (unified grid or unprojected source level)."""
        if self.condition == "original":
            return self.source_hw[0] // 8, self.source_hw[1] // 8
        return self.image_hw[0] // 2, self.image_hw[1] // 2

    @property
    def proj_in(self) -> int:
        return {
            "gcc": sum(self.extractor_channels),
            "projected_feature": self.extractor_channels[-1],
            "original": self.extractor_channels[-1],
            "projected_image": self.image_channels,
            "none": 0,
        }[self.condition]

    @property
    def uses_extractor(self) -> bool:
        return self.condition in ("gcc", "projected_feature", "original")

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every learnable tensor with its shape, in a stable order."""
    s: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    ic = cfg.image_channels
    if cfg.uses_extractor:
        cin = ic
        for i, c in enumerate(cfg.extractor_channels, start=1):
            s[f"extractor.stage{i}.weight"] = (3, 3, cin, c)
            s[f"extractor.stage{i}.bias"] = (c,)
            cin = c
    if cfg.condition != "none":
        s["condition.proj.weight"] = (cfg.proj_in, cfg.cond_dim)
    c0, c1, c2 = cfg.channels
    e = cfg.time_dim
    s["denoiser.time.fc1.weight"] = (e, e)
    s["denoiser.time.fc1.bias"] = (e,)
    s["denoiser.time.fc2.weight"] = (e, e)
    s["denoiser.time.fc2.bias"] = (e,)
    cin = ic + (cfg.cond_dim if cfg.mode == "pixel_aligned" else 0)
    stages = [("in", cin, c0), ("down1", c0, c1), ("down2", c1, c2), ("mid", c2, c2),
              ("up1", c2 + c1, c1), ("up0", c1 + c0, c0)]
    for name, ci, co in stages:
        s[f"denoiser.{name}.conv.weight"] = (3, 3, ci, co)
        s[f"denoiser.{name}.conv.bias"] = (co,)
        s[f"denoiser.{name}.temb.weight"] = (e, co)
        s[f"denoiser.{name}.temb.bias"] = (co,)
    if cfg.mode == "tokens":
        a = cfg.attn_dim
        s["denoiser.attn.q.weight"] = (c2, a)
        s["denoiser.attn.k.weight"] = (cfg.cond_dim, a)
        s["denoiser.attn.v.weight"] = (cfg.cond_dim, a)
        s["denoiser.attn.o.weight"] = (a, c2)
        if cfg.pos_enc:
            hc, wc = cfg.cond_hw
            s["denoiser.attn.pos"] = (hc * wc, cfg.cond_dim)
    s["denoiser.out.conv.weight"] = (3, 3, c0, ic)
    s["denoiser.out.conv.bias"] = (ic,)
    return s


def init_params(seed: int, cfg: ModelConfig, dtype=np.float64) -> "OrderedDict[str, Tensor]":
    """Deterministic fan-in scaled normal init; biases zero; output conv zero."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias") or name.startswith("denoiser.out."):
            arr = np.zeros(shape)
        elif name == "denoiser.attn.pos":
            arr = 0.1 * rng.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def timestep_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def _linear(x, w, b=None):
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def extract_pyramid(img, params, cfg: ModelConfig | None = None) -> FeaturePyramid:
    """Three stride-2 conv + SiLU stages; taps at strides 2, 4, 8."""
    x = as_tensor(img)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    h, w = x.shape[1:3]
    if h % 8 or w % 8:
        raise ModelError(f"extractor input dims {(h, w)} must be divisible by 8")
    levels = []
    for i in range(1, 4):
        x = silu(conv2d(x, params[f"extractor.stage{i}.weight"], params[f"extractor.stage{i}.bias"],
                        stride=2, padding=1))
        levels.append(x)
    return FeaturePyramid(levels, list(PYRAMID_STRIDES))


@dataclass
class ConditionInputs:
    """Source-view image batch and the grids needed to build one condition kind."""

    source: np.ndarray
    level_grids: list[ProjectionGrid] = field(default_factory=list)
    image_grid: ProjectionGrid | None = None
    direction: str = "s2g"


def build_condition(inputs: ConditionInputs, params, cfg: ModelConfig) -> Condition:
    n = inputs.source.shape[0]
    src = inputs.source
    if cfg.condition == "none":
        hc, wc = cfg.cond_hw
        return Condition(Tensor(np.zeros((n, hc, wc, cfg.cond_dim), dtype=src.dtype)), inputs.direction)
    proj = params["condition.proj.weight"]
    if cfg.condition == "projected_image":
        return build_gcc(FeaturePyramid([Tensor(src)], [1]), [inputs.image_grid], proj, inputs.direction)
    pyr = extract_pyramid(src, params, cfg)
    if cfg.condition == "gcc":
        return build_gcc(pyr, inputs.level_grids, proj, inputs.direction)
    if cfg.condition == "projected_feature":
        return build_gcc(FeaturePyramid([pyr.levels[-1]], [pyr.strides[-1]]), [inputs.level_grids[-1]], proj,
                         inputs.direction)
    return Condition(matmul(pyr.levels[-1], proj), inputs.direction)


class Denoiser:
    """Noise predictor eps_theta(x_t, t, c) over a parameter dictionary."""

    def __init__(self, cfg: ModelConfig, params):
        self.cfg = cfg
        self.params = params
        self.last_attention: np.ndarray | None = None

    def _stage(self, name, x, temb, stride=1):
        p = self.params
        h = conv2d(x, p[f"denoiser.{name}.conv.weight"], p[f"denoiser.{name}.conv.bias"], stride=stride, padding=1)
        tb = _linear(temb, p[f"denoiser.{name}.temb.weight"], p[f"denoiser.{name}.temb.bias"])
        tb = reshape(tb, (tb.shape[0], 1, 1, tb.shape[1]))
        return silu(add(h, tb))

    def _cross_attend(self, h, c: Condition):
        p = self.params
        n, hh, ww, ch = h.shape
        tokens = tokenize(c)
        if self.cfg.pos_enc:
            tokens = add(tokens, p["denoiser.attn.pos"])
        q = matmul(reshape(h, (n, hh * ww, ch)), p["denoiser.attn.q.weight"])
        k = matmul(tokens, p["denoiser.attn.k.weight"])
        v = matmul(tokens, p["denoiser.attn.v.weight"])
        scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.cfg.attn_dim))
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = matmul(matmul(attn, v), p["denoiser.attn.o.weight"])
        return add(h, reshape(out, (n, hh, ww, ch)))

    def __call__(self, x_t, t, c: Condition) -> Tensor:
        cfg, p = self.cfg, self.params
        x = as_tensor(x_t)
        n = x.shape[0]
        if tuple(x.shape[1:3]) != cfg.image_hw:
            raise ModelError(f"input dims {x.shape[1:3]} do not match configured {cfg.image_hw}")
        if c.dim != cfg.cond_dim or tuple(c.hw) != cfg.cond_hw or c.map.shape[0] != n:
            raise ModelError(f"condition {tuple(c.map.shape)} does not match mode {cfg.mode!r} with "
                             f"dims {cfg.cond_hw}x{cfg.cond_dim} for batch {n}")
        temb = Tensor(timestep_embedding(t, cfg.time_dim, x.dtype))
        temb = silu(_linear(temb, p["denoiser.time.fc1.weight"], p["denoiser.time.fc1.bias"]))
        temb = _linear(temb, p["denoiser.time.fc2.weight"], p["denoiser.time.fc2.bias"])
        if cfg.mode == "pixel_aligned":
            x = concat([x, pixel_align(c, cfg.image_hw)], axis=-1)
        h0 = self._stage("in", x, temb)
        h1 = self._stage("down1", h0, temb, stride=2)
        h2 = self._stage("down2", h1, temb, stride=2)
        if cfg.mode == "tokens":
            h2 = self._cross_attend(h2, c)
        h2 = self._stage("mid", h2, temb)
        u1 = self._stage("up1", concat([upsample2x(h2), h1], axis=-1), temb)
        u0 = self._stage("up0", concat([upsample2x(u1), h0], axis=-1), temb)
        return conv2d(u0, p["denoiser.out.conv.weight"], p["denoiser.out.conv.bias"], padding=1)


class CrossViewModel:
    """Extractor + condition projection + denoiser sharing one parameter dict."""

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.params = params if params is not None else init_params(seed, cfg, dtype)
        self.denoiser = Denoiser(cfg, self.params)

    def condition(self, inputs: ConditionInputs) -> Condition:
        return build_condition(inputs, self.params, self.cfg)

    def __call__(self, x_t, t, inputs: ConditionInputs) -> Tensor:
        return self.denoiser(x_t, t, self.condition(inputs))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays or arrays[k].shape != p.data.shape:
                raise ModelError(f"checkpoint entry {k!r} missing or mis-shaped")
            p.data = arrays[k].astype(p.data.dtype)
