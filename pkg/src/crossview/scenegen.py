"""Procedural paired satellite/ground scenes with exact geometry.

A scene is a flat textured ground plane (multi-octave value noise plus
soft-edged road polylines) carrying axis-aligned boxes. The satellite view
is an orthographic top-down point sampling; the ground view ray-casts from
the camera through every pixel. Both views share the same ground texture
and the same flat shading of upward-facing surfaces, so a ground-plane
point has the same colour in both renders (up to the per-scene
illumination factor applied to the ground view only).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import camgeo
from .camgeo import GroundCamera, Pinhole, PoseSE2, SatCamera, Spherical

SCHEMA_VERSION = 1
AMBIENT = 0.45
ALIGNMENTS = ("camera_aligned", "north_aligned")

# texture lattice spacings (m) and amplitudes, coarse to fine
OCTAVES = ((16.0, 0.5), (8.0, 0.3), (4.0, 0.2))
TEXTURE_EXTENT_M = 96.0
ROAD_EDGE_M = 0.8


class DatasetError(IOError):
    pass


@dataclass
class Box:
    x0: float
    x1: float
    z0: float
    z1: float
    height: float
    albedo: tuple[float, float, float]

    def contains(self, x, z):
        return (x >= self.x0) & (x <= self.x1) & (z >= self.z0) & (z <= self.z1)


@dataclass
class Road:
    points: list[tuple[float, float]]
    width: float
    albedo: tuple[float, float, float]


@dataclass
class SceneSpec:
    seed: int
    roads: list[Road] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    sun: tuple[float, float, float] = (0.4, -0.8, 0.3)
    palette: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.30, 0.45, 0.20), (0.60, 0.55, 0.35))
    illumination: float = 1.0
    sky_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for b in self.boxes:
            if b.height < 0:
                raise ValueError("box heights must be non-negative")
        self._lattices = None

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("_")}
        return json.loads(json.dumps(d))

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(
            seed=int(d["seed"]),
            roads=[Road([tuple(p) for p in r["points"]], float(r["width"]), tuple(r["albedo"])) for r in d["roads"]],
            boxes=[Box(**{**b, "albedo": tuple(b["albedo"])}) for b in d["boxes"]],
            sun=tuple(d["sun"]),
            palette=tuple(tuple(c) for c in d["palette"]),
            illumination=float(d["illumination"]),
            sky_tint=tuple(d["sky_tint"]),
        )

    # -- appearance ---------------------------------------------------------

    def lattices(self) -> list[np.ndarray]:
        if self._lattices is None:
            rng = np.random.default_rng(self.seed)
            self._lattices = []
            for spacing, _ in OCTAVES:
                n = int(math.ceil(2 * TEXTURE_EXTENT_M / spacing)) + 2
                self._lattices.append(rng.random((n, n, 2)))
        return self._lattices

    def ground_albedo(self, x, z) -> np.ndarray:
        """Ground texture RGB at world points (x, z); shape (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        val = np.zeros(x.shape + (2,))
        for (spacing, amp), lat in zip(OCTAVES, self.lattices()):
            n = lat.shape[0]
            gx = np.clip((x + TEXTURE_EXTENT_M) / spacing, 0, n - 1.000001)
            gz = np.clip((z + TEXTURE_EXTENT_M) / spacing, 0, n - 1.000001)
            ix, iz = np.floor(gx).astype(int), np.floor(gz).astype(int)
            fx, fz = _smooth(gx - ix), _smooth(gz - iz)
            fx, fz = fx[..., None], fz[..., None]
            top = lat[ix, iz] * (1 - fz) + lat[ix, iz + 1] * fz
            bot = lat[ix + 1, iz] * (1 - fz) + lat[ix + 1, iz + 1] * fz
            val += amp * (top * (1 - fx) + bot * fx)
        a, b = np.asarray(self.palette[0]), np.asarray(self.palette[1])
        col = a + (b - a) * val[..., :1]
        col = col * (0.85 + 0.3 * val[..., 1:2])
        for road in self.roads:
            d = _polyline_distance(x, z, road.points)
            m = 1.0 - _smoothstep(road.width / 2 - ROAD_EDGE_M, road.width / 2 + ROAD_EDGE_M, d)
            col = col + (np.asarray(road.albedo) - col) * m[..., None]
        return np.clip(col, 0.0, 1.0)

    def shade(self, normal) -> float:
        s = np.asarray(self.sun, dtype=np.float64)
        s = s / np.linalg.norm(s)
        return AMBIENT + (1 - AMBIENT) * max(0.0, float(np.dot(normal, s)))

    @property
    def shade_up(self) -> float:
        return self.shade(np.array([0.0, -1.0, 0.0]))


def _smooth(t):
    return t * t * (3 - 2 * t)


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return _smooth(t)


def _polyline_distance(x, z, points) -> np.ndarray:
    best = np.full(np.shape(x), np.inf)
    for (ax, az), (bx, bz) in zip(points[:-1], points[1:]):
        dx, dz = bx - ax, bz - az
        L2 = dx * dx + dz * dz
        t = np.clip(((x - ax) * dx + (z - az) * dz) / L2, 0.0, 1.0)
        px, pz = ax + t * dx, az + t * dz
        best = np.minimum(best, np.hypot(x - px, z - pz))
    return best


# -- rendering ------------------------------------------------------------------


def render_sat(scene: SceneSpec, cam: SatCamera):
    """Top-down orthographic render: (H, W, 3) image in [0, 1] and per-pixel height (m)."""
    v, u = np.meshgrid(np.arange(cam.height_px, dtype=np.float64), np.arange(cam.width_px, dtype=np.float64),
                       indexing="ij")
    x, z = camgeo.sat_to_world(u, v, cam)
    img = scene.ground_albedo(x, z)
    height = np.zeros(x.shape)
    top = np.zeros(x.shape, dtype=int) - 1
    for i, b in enumerate(scene.boxes):
        inside = b.contains(x, z) & (b.height >= height)
        height = np.where(inside, b.height, height)
        top = np.where(inside, i, top)
    for i, b in enumerate(scene.boxes):
        img[top == i] = np.asarray(b.albedo)
    img = np.clip(img * scene.shade_up, 0.0, 1.0)
    return img, height


def _sky(scene: SceneSpec, dy) -> np.ndarray:
    elev = np.clip(-np.asarray(dy), 0.0, 1.0)[..., None]
    horizon = np.array([0.78, 0.84, 0.92])
    zenith = np.array([0.32, 0.52, 0.86])
    col = horizon + (zenith - horizon) * np.sqrt(elev)
    return np.clip(col * np.asarray(scene.sky_tint) * scene.illumination, 0.0, 1.0)


def cast_rays(scene: SceneSpec, origin, dx, dy, dz, cam_height: float):
    """Nearest hit along world rays from ``origin`` (x, 0, z).

    Returns (rgb, kind, hit_x, hit_z, distance) with kind 0 = sky,
    1 = ground plane, 2 = box. The ground plane is ``y = cam_height``.
    """
    ox, oz = float(origin[0]), float(origin[2])
    shape = np.shape(dx)
    dx, dy, dz = (np.asarray(a, dtype=np.float64) for a in (dx, dy, dz))
    inf = np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dy > 0, cam_height / dy, inf)
    best = t_ground.copy()
    kind = np.where(np.isfinite(t_ground), 1, 0)
    normal = np.zeros(shape + (3,))
    normal[..., 1] = -1.0
    box_id = np.full(shape, -1)
    for i, b in enumerate(scene.boxes):
        lo = np.array([b.x0 - ox, cam_height - b.height, b.z0 - oz])
        hi = np.array([b.x1 - ox, cam_height, b.z1 - oz])
        tn = np.full(shape, -inf)
        tf = np.full(shape, inf)
        axis = np.zeros(shape, dtype=int)
        sign = np.zeros(shape)
        for k, d in enumerate((dx, dy, dz)):
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(d != 0, lo[k] / d, np.where(lo[k] <= 0, -inf, inf))
                t2 = np.where(d != 0, hi[k] / d, np.where(hi[k] >= 0, inf, -inf))
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            upd = near > tn
            axis = np.where(upd, k, axis)
            sign = np.where(upd, -np.sign(d), sign)
            tn = np.maximum(tn, near)
            tf = np.minimum(tf, far)
        hit = (tn <= tf) & (tf > 0) & (tn > 0) & (tn < best)
        best = np.where(hit, tn, best)
        kind = np.where(hit, 2, kind)
        box_id = np.where(hit, i, box_id)
        n = np.zeros(shape + (3,))
        np.put_along_axis(n, axis[..., None], sign[..., None], axis=-1)
        normal = np.where(hit[..., None], n, normal)
    hx = ox + np.where(np.isfinite(best), best, 0.0) * dx
    hz = oz + np.where(np.isfinite(best), best, 0.0) * dz
    rgb = _sky(scene, dy / np.sqrt(dx * dx + dy * dy + dz * dz))
    g = kind == 1
    if np.any(g):
        rgb[g] = scene.ground_albedo(hx[g], hz[g]) * scene.shade_up * scene.illumination
    for i, b in enumerate(scene.boxes):
        m = box_id == i
        if np.any(m):
            sh = np.array([scene.shade(nv) for nv in normal[m]])
            rgb[m] = np.asarray(b.albedo) * sh[:, None] * scene.illumination
    return np.clip(rgb, 0.0, 1.0), kind, hx, hz, best


def ground_rays(cam: GroundCamera, pose: PoseSE2):
    """World ray directions for every ground pixel centre: (dx, dy, dz) of shape (H, W)."""
    v, u = np.meshgrid(np.arange(cam.height_px, dtype=np.float64), np.arange(cam.width_px, dtype=np.float64),
                       indexing="ij")
    if isinstance(cam, Spherical):
        theta, phi_c, _ = camgeo.ground_pixel_to_sph(u, v, cam)
        return camgeo.sph_direction(theta, camgeo.wrap_angle(phi_c - pose.yaw))
    return camgeo.pinhole_rays(u, v, pose, cam)


def render_ground(scene: SceneSpec, cam: GroundCamera, pose: PoseSE2, return_kind: bool = False):
    """Ray-cast ground view (H, W, 3) in [0, 1]; optionally also the hit-kind map."""
    dx, dy, dz = ground_rays(cam, pose)
    origin = pose.camera_position()
    rgb, kind, *_ = cast_rays(scene, origin, dx, dy, dz, pose.cam_height)
    return (rgb, kind) if return_kind else rgb


# -- sampling -------------------------------------------------------------------


@dataclass
class SceneConfig:
    sat_size: int = 64
    coverage_m: float = 50.0
    grd_height: int = 32
    grd_width: int = 128
    camera: str = "spherical"
    cam_height: float | None = None
    theta_range: tuple[float, float] = (math.pi / 4, 3 * math.pi / 4)
    pinhole_hfov_deg: float = 90.0
    max_translation_m: float = 0.0
    max_boxes: int = 4
    box_size_m: tuple[float, float] = (4.0, 10.0)
    box_height_m: tuple[float, float] = (2.0, 8.0)
    roads: tuple[int, int] = (1, 2)
    illumination_range: tuple[float, float] = (1.0, 1.0)
    sky_jitter: float = 0.0
    alignment: str = "camera_aligned"

    def __post_init__(self):
        if self.camera not in ("spherical", "pinhole"):
            raise ValueError(f"camera must be 'spherical' or 'pinhole', got {self.camera!r}")
        if self.alignment not in ALIGNMENTS + ("mixed",):
            raise ValueError(f"unknown alignment mode {self.alignment!r}")
        if self.cam_height is None:
            self.cam_height = 2.0 if self.camera == "spherical" else 1.65
        self.theta_range = tuple(self.theta_range)
        self.box_size_m = tuple(self.box_size_m)
        self.box_height_m = tuple(self.box_height_m)
        self.roads = tuple(self.roads)
        self.illumination_range = tuple(self.illumination_range)

    def sat_camera(self) -> SatCamera:
        return SatCamera.from_coverage(self.sat_size, self.coverage_m)

    def ground_camera(self) -> GroundCamera:
        if self.camera == "spherical":
            return Spherical(self.grd_width, self.grd_height, self.theta_range)
        f = (self.grd_width / 2) / math.tan(math.radians(self.pinhole_hfov_deg) / 2)
        return Pinhole(f, f, ((self.grd_width - 1) / 2, (self.grd_height - 1) / 2), self.grd_width, self.grd_height)

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ScenePair:
    sat_image: np.ndarray
    grd_image: np.ndarray
    sat_height_map: np.ndarray
    pose: PoseSE2
    sat_camera: SatCamera
    ground_camera: GroundCamera
    alignment_mode: str
    seed: int
    scene: SceneSpec | None = None

    def meta(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "alignment_mode": self.alignment_mode,
            "pose": self.pose.to_json(),
            "sat_camera": self.sat_camera.to_json(),
            "ground_camera": self.ground_camera.to_json(),
            "gamma": self.sat_camera.gamma,
            "scene": self.scene.to_json() if self.scene is not None else None,
        }


def random_scene(rng: np.random.Generator, cfg: SceneConfig, camera_xz=(0.0, 0.0)) -> SceneSpec:
    half = cfg.coverage_m / 2
    seed = int(rng.integers(0, 2**31 - 1))
    roads = []
    for _ in range(int(rng.integers(cfg.roads[0], cfg.roads[1] + 1))):
        px, pz = rng.uniform(-0.6 * half, 0.6 * half, size=2)
        a = rng.uniform(0, math.pi)
        bend = rng.uniform(-0.5, 0.5)
        L = 3 * half
        p0 = (px - L * math.cos(a), pz - L * math.sin(a))
        p2 = (px + L * math.cos(a + bend), pz + L * math.sin(a + bend))
        grey = rng.uniform(0.3, 0.45)
        roads.append(Road([p0, (px, pz), p2], float(rng.uniform(3.0, 6.0)), (grey, grey, grey + 0.03)))
    boxes = []
    n_boxes = int(rng.integers(0, cfg.max_boxes + 1)) if cfg.max_boxes > 0 else 0
    tries = 0
    while len(boxes) < n_boxes and tries < 50:
        tries += 1
        sx, sz = rng.uniform(*cfg.box_size_m, size=2)
        cx = rng.uniform(-half + sx / 2, half - sx / 2)
        cz = rng.uniform(-half + sz / 2, half - sz / 2)
        # keep the camera outside and clear of every footprint
        gx = max(abs(cx - camera_xz[0]) - sx / 2, 0.0)
        gz = max(abs(cz - camera_xz[1]) - sz / 2, 0.0)
        if math.hypot(gx, gz) < 4.0:
            continue
        height = float(rng.uniform(*cfg.box_height_m))
        albedo = tuple(float(c) for c in rng.uniform(0.25, 0.95, size=3))
        boxes.append(Box(float(cx - sx / 2), float(cx + sx / 2), float(cz - sz / 2), float(cz + sz / 2), height, albedo))
    el = rng.uniform(math.radians(35), math.radians(70))
    az = rng.uniform(-math.pi, math.pi)
    sun = (math.cos(el) * math.sin(az), -math.sin(el), math.cos(el) * math.cos(az))
    base = rng.uniform(0.2, 0.5, size=3) * np.array([1.0, 1.3, 0.8])
    alt = rng.uniform(0.45, 0.7, size=3)
    illum = float(rng.uniform(*cfg.illumination_range))
    tint = tuple(float(c) for c in 1.0 + cfg.sky_jitter * rng.uniform(-1, 1, size=3))
    return SceneSpec(seed, roads, boxes, sun, (tuple(float(c) for c in np.clip(base, 0, 1)),
                                               tuple(float(c) for c in alt)), illum, tint)


def _draw_yaw(rng: np.random.Generator) -> float:
    # uniform on (-pi, pi]
    return float(math.pi - rng.uniform(0.0, 2 * math.pi))


def sample_pair(cfg: SceneConfig, rng: np.random.Generator) -> ScenePair:
    """Draw one paired scene; deterministic given the generator state."""
    mode = cfg.alignment
    if mode == "mixed":
        mode = ALIGNMENTS[int(rng.integers(0, 2))]
    yaw = 0.0 if mode == "camera_aligned" else _draw_yaw(rng)
    t_x = t_z = 0.0
    if cfg.camera == "pinhole" and cfg.max_translation_m > 0:
        t_x, t_z = (float(v) for v in rng.uniform(-cfg.max_translation_m, cfg.max_translation_m, size=2))
    pose = PoseSE2(yaw, t_x, t_z, float(cfg.cam_height))
    cam_pos = pose.camera_position()
    scene = random_scene(rng, cfg, (cam_pos[0], cam_pos[2]))
    cam_s = cfg.sat_camera()
    cam_g = cfg.ground_camera()
    sat, height = render_sat(scene, cam_s)
    grd = render_ground(scene, cam_g, pose)
    return ScenePair(sat, grd, height, pose, cam_s, cam_g, mode, scene.seed, scene)


def generate(cfg: SceneConfig, count: int, seed: int) -> list[ScenePair]:
    """``count`` pairs, each from its own child stream of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [sample_pair(cfg, np.random.default_rng(c)) for c in children]


# -- persistence ------------------------------------------------------------------


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(root, pairs: list[ScenePair], cfg: SceneConfig | None = None) -> Path:
    """Write ``pairs/NNNNNN/{sat,grd,height}.png + meta.json`` and ``manifest.json``."""
    root = Path(root)
    try:
        (root / "pairs").mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(pairs):
            d = root / "pairs" / f"{i:06d}"
            d.mkdir(exist_ok=True)
            Image.fromarray(_to_u8(p.sat_image)).save(d / "sat.png")
            Image.fromarray(_to_u8(p.grd_image)).save(d / "grd.png")
            cm = np.clip(np.round(p.sat_height_map * 100.0), 0, 65535).astype(np.uint16)
            Image.fromarray(cm).save(d / "height.png")
            meta = p.meta()
            meta["pair_id"] = f"{i:06d}"
            (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "count": len(pairs),
            "config_hash": cfg.hash() if cfg is not None else None,
            "config": cfg.to_json() if cfg is not None else None,
            "alignment_modes": [p.alignment_mode for p in pairs],
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {root}: {e}") from e
    return root


def read_pair(d) -> ScenePair:
    d = Path(d)
    try:
        meta = json.loads((d / "meta.json").read_text())
        sat = np.asarray(Image.open(d / "sat.png"), dtype=np.float64) / 255.0
        grd = np.asarray(Image.open(d / "grd.png"), dtype=np.float64) / 255.0
        height = np.asarray(Image.open(d / "height.png"), dtype=np.float64) / 100.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read pair {d}: {e}") from e
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{d}: unsupported schema version {meta.get('schema_version')}")
    scene = SceneSpec.from_json(meta["scene"]) if meta.get("scene") else None
    return ScenePair(sat, grd, height, PoseSE2.from_json(meta["pose"]), SatCamera.from_json(meta["sat_camera"]),
                     camgeo.ground_camera_from_json(meta["ground_camera"]), meta["alignment_mode"],
                     int(meta["seed"]), scene)


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema version {manifest.get('schema_version')}")
    return manifest


def read_dataset(root) -> list[ScenePair]:
    manifest = read_manifest(root)
    pairs = [read_pair(Path(root) / "pairs" / f"{i:06d}") for i in range(manifest["count"])]
    return pairs


def pair_dirs(root) -> list[Path]:
    return sorted(p for p in (Path(root) / "pairs").iterdir() if p.is_dir()) if os.path.isdir(Path(root) / "pairs") else []
