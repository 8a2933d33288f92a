"""Projection grids, differentiable bilinear warping and the cross-view condition."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import camgeo
from .camgeo import GroundCamera, Pinhole, PoseSE2, SatCamera, Spherical
from .numeric import Tensor, as_tensor, checkpoint, concat, grid_sample, matmul, reshape

SENTINEL = -1.0
DIRECTIONS = ("s2g", "g2s")


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionGrid:
    """Per-target-pixel source (row, col) coordinates plus a validity mask.

    ``src_coords`` has shape (..., Ht, Wt, 2); a leading batch axis is
    allowed after :meth:`stack`. ``src_hw`` records the source extents the
    coordinates index into.
    """

    src_coords: np.ndarray
    valid: np.ndarray
    src_hw: tuple[int, int]
    wrap_cols: bool = False

    @property
    def target_h(self) -> int:
        return self.src_coords.shape[-3]

    @property
    def target_w(self) -> int:
        return self.src_coords.shape[-2]

    @property
    def batched(self) -> bool:
        return self.src_coords.ndim == 4

    def checksum(self) -> str:
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.src_coords, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.valid, dtype=bool).tobytes())
        return h.hexdigest()[:16]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "src_coords": np.asarray(self.src_coords, dtype=np.float64),
            "valid": np.asarray(self.valid, dtype=bool),
            "src_hw": np.asarray(self.src_hw, dtype=np.int64),
            "wrap_cols": np.asarray([self.wrap_cols], dtype=bool),
        }

    def save(self, path) -> None:
        checkpoint.save(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "ProjectionGrid":
        a = checkpoint.load(path)
        return cls(a["src_coords"], a["valid"], tuple(int(x) for x in a["src_hw"]), bool(a["wrap_cols"][0]))

    @classmethod
    def stack(cls, grids: Sequence["ProjectionGrid"]) -> "ProjectionGrid":
        first = grids[0]
        for g in grids[1:]:
            if g.src_hw != first.src_hw or g.src_coords.shape != first.src_coords.shape or g.wrap_cols != first.wrap_cols:
                raise GridError("cannot stack grids with different geometry")
        return cls(np.stack([g.src_coords for g in grids]), np.stack([g.valid for g in grids]),
                   first.src_hw, first.wrap_cols)


def _finish(rows, cols, valid, src_hw, wrap_cols) -> ProjectionGrid:
    h, w = src_hw
    inb = valid & (rows >= 0) & (rows <= h - 1)
    if wrap_cols:
        cols = np.where(inb, np.mod(cols, w), cols)
        inb &= np.isfinite(cols)
    else:
        inb &= (cols >= 0) & (cols <= w - 1)
    coords = np.stack([np.where(inb, rows, SENTINEL), np.where(inb, cols, SENTINEL)], axis=-1)
    return ProjectionGrid(coords, inb, (h, w), wrap_cols)


def _plane(plane_heights, default: float, shape: tuple[int, int]) -> np.ndarray:
    if plane_heights is None:
        return np.full(shape, default, dtype=np.float64)
    p = np.asarray(plane_heights, dtype=np.float64)
    if p.ndim == 0:
        return np.full(shape, float(p))
    if p.shape != shape:
        raise GridError(f"plane_heights shape {p.shape} does not match target dims {shape}")
    if not np.all(np.isfinite(p)):
        raise GridError("plane_heights must be finite")
    return p


def build_grid(direction: str, cam_s: SatCamera, cam_g: GroundCamera, pose: PoseSE2,
               plane_heights=None, target_stride: int = 1, source_stride: int = 1) -> ProjectionGrid:
    """Materialise the pixel mapping from the target view into the source view.

    ``s2g`` targets the ground image and samples the satellite view; ``g2s``
    is the reverse. ``plane_heights`` are vertical offsets relative to the
    camera centre (ground plane = ``pose.cam_height``), scalar or one per
    target pixel. Strides select feature-map resolutions of each view.
    """
    if direction not in DIRECTIONS:
        raise GridError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if isinstance(cam_g, Spherical) and (pose.t_x != 0 or pose.t_z != 0):
        raise GridError("spherical ground cameras sit at the satellite centre; translation must be zero")
    if direction == "s2g":
        tc, sc = cam_g.scaled(target_stride), cam_s.scaled(source_stride)
        shape = (tc.height_px, tc.width_px)
        plane = _plane(plane_heights, pose.cam_height, shape)
        vi, ui = np.meshgrid(np.arange(shape[0], dtype=np.float64), np.arange(shape[1], dtype=np.float64),
                             indexing="ij")
        if isinstance(tc, Spherical):
            theta, phi_c, ok = camgeo.ground_pixel_to_sph(ui, vi, tc)
            phi_w = camgeo.wrap_angle(phi_c - pose.yaw)
            u_s, v_s, ok2, _ = camgeo.sph_to_sat_pixel(theta, phi_w, plane, sc)
            valid = ok & ok2
        else:
            u_s, v_s, _, valid, _ = camgeo.pinhole_grd_to_sat(ui, vi, pose, tc, sc, plane)
        return _finish(v_s, u_s, valid, (sc.height_px, sc.width_px), False)

    tc, sc = cam_s.scaled(target_stride), cam_g.scaled(source_stride)
    shape = (tc.height_px, tc.width_px)
    plane = _plane(plane_heights, pose.cam_height, shape)
    vi, ui = np.meshgrid(np.arange(shape[0], dtype=np.float64), np.arange(shape[1], dtype=np.float64),
                         indexing="ij")
    if isinstance(sc, Spherical):
        theta, phi_w, ok = camgeo.sat_pixel_to_sph(ui, vi, plane, tc)
        phi_c = camgeo.wrap_angle(phi_w + pose.yaw)
        u_g, v_g, ok2 = camgeo.sph_to_ground_pixel(theta, phi_c, sc)
        return _finish(v_g, u_g, ok & ok2, (sc.height_px, sc.width_px), sc.full_circle)
    u_g, v_g, valid, _ = camgeo.pinhole_sat_to_grd(ui, vi, plane, pose, sc, tc)
    return _finish(v_g, u_g, valid, (sc.height_px, sc.width_px), False)


def bilinear_sample(src, grid: ProjectionGrid):
    """Warp ``src`` through ``grid``; returns (warped tensor, validity mask).

    ``src`` is (H, W, C) or (N, H, W, C), numpy or Tensor. Invalid target
    pixels are zero-filled. Differentiable with respect to ``src``.
    """
    t = as_tensor(src)
    squeeze = t.ndim == 3
    if squeeze:
        t = reshape(t, (1,) + t.shape)
    if t.shape[1:3] != tuple(grid.src_hw):
        raise GridError(f"source dims {t.shape[1:3]} do not match grid source dims {grid.src_hw}")
    coords = grid.src_coords.astype(t.dtype, copy=False)
    out = grid_sample(t, coords, grid.valid, wrap_cols=grid.wrap_cols)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out, grid.valid


@dataclass
class FeaturePyramid:
    """Multi-level feature maps, finest first, each (N, H/s, W/s, C)."""

    levels: list[Tensor]
    strides: list[int] = field(default_factory=lambda: [2, 4, 8])

    def __post_init__(self):
        if len(self.levels) < 1 or len(self.levels) != len(self.strides):
            raise GridError("pyramid needs at least one level and one stride per level")

    @property
    def channels(self) -> list[int]:
        return [lv.shape[-1] for lv in self.levels]


@dataclass
class Condition:
    map: Tensor
    direction: str = "s2g"
    grid_checksum: str = ""

    @property
    def hw(self) -> tuple[int, int]:
        return self.map.shape[-3], self.map.shape[-2]

    @property
    def n_tokens(self) -> int:
        h, w = self.hw
        return h * w

    @property
    def dim(self) -> int:
        return self.map.shape[-1]


def build_gcc(pyr: FeaturePyramid, grids: Sequence[ProjectionGrid], proj, direction: str = "s2g") -> Condition:
    """Warp every pyramid level onto the unified grid, concatenate, and project linearly."""
    proj = as_tensor(proj)
    if len(grids) != len(pyr.levels):
        raise GridError(f"need one grid per level: {len(grids)} grids for {len(pyr.levels)} levels")
    hw = {(g.target_h, g.target_w) for g in grids}
    if len(hw) != 1:
        raise GridError(f"grids must share unified dims, got {sorted(hw)}")
    if proj.shape[0] != sum(pyr.channels):
        raise GridError(f"proj expects {proj.shape[0]} input channels, pyramid has {sum(pyr.channels)}")
    warped = [bilinear_sample(f, g)[0] for f, g in zip(pyr.levels, grids)]
    stacked = warped[0] if len(warped) == 1 else concat(warped, axis=-1)
    c = matmul(stacked, proj)
    digest = hashlib.sha1("".join(g.checksum() for g in grids).encode()).hexdigest()[:16]
    return Condition(c, direction, digest)


def tokenize(c: Condition) -> Tensor:
    """Row-major flattening of the condition map into (N, Hc*Wc, Cc) tokens."""
    m = c.map
    if m.ndim == 3:
        return reshape(m, (m.shape[0] * m.shape[1], m.shape[2]))
    return reshape(m, (m.shape[0], m.shape[1] * m.shape[2], m.shape[3]))


def detokenize(tokens, hw: tuple[int, int], direction: str = "s2g") -> Condition:
    t = as_tensor(tokens)
    h, w = hw
    if t.ndim == 2:
        return Condition(reshape(t, (h, w, t.shape[1])), direction)
    return Condition(reshape(t, (t.shape[0], h, w, t.shape[2])), direction)


def _ratio_ok(a: int, b: int) -> bool:
    return a % b == 0 or b % a == 0


def resize_coords(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Source coordinates of a stride-aligned bilinear resize (dst pixel i -> i * src/dst)."""
    (hs, ws), (hd, wd) = src_hw, dst_hw
    r = np.minimum(np.arange(hd) * (hs / hd), hs - 1)
    q = np.minimum(np.arange(wd) * (ws / wd), ws - 1)
    rr, qq = np.meshgrid(r, q, indexing="ij")
    return np.stack([rr, qq], axis=-1)


def pixel_align(c: Condition, target_hw: tuple[int, int]) -> Tensor:
    """Bilinearly resize the condition map to the denoiser's spatial dims."""
    hc, wc = c.hw
    ht, wt = target_hw
    if not (_ratio_ok(ht, hc) and _ratio_ok(wt, wc)):
        raise GridError(f"target dims {target_hw} are not integer multiples/divisors of {c.hw}")
    m = c.map
    squeeze = m.ndim == 3
    if squeeze:
        m = reshape(m, (1,) + m.shape)
    if (hc, wc) == (ht, wt):
        out = m
    else:
        coords = resize_coords((hc, wc), (ht, wt)).astype(m.dtype)
        out = grid_sample(m, coords)
    return reshape(out, out.shape[1:]) if squeeze else out


def grid_for_levels(direction: str, cam_s: SatCamera, cam_g: GroundCamera, pose: PoseSE2,
                    strides: Sequence[int], unified_stride: int = 2, plane_heights=None) -> list[ProjectionGrid]:
    """One grid per pyramid level, all targeting the unified condition grid."""
    return [build_grid(direction, cam_s, cam_g, pose, plane_heights, unified_stride, s) for s in strides]


def horizon_row(cam: Spherical) -> float:
    t0, t1 = cam.theta_range
    return (math.pi / 2 - t0) / (t1 - t0) * cam.height_px
