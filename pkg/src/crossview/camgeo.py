"""Camera models and closed-form satellite <-> ground pixel mappings.

World frame: origin at the satellite image centre, ``x`` along the satellite
row axis (``v_s``), ``z`` along the column axis (``u_s``), ``y`` pointing
down. Vertical coordinates are offsets relative to the ground camera
centre, so a ground-plane point has ``y = cam_height`` and the horizon is
``y = 0``.

All mappings are vectorised over numpy arrays and return a boolean
validity mask next to the coordinates instead of raising on degenerate
inputs. Continuous pixel coordinates use the pixel-centre convention.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

TWO_PI = 2.0 * math.pi


class CameraError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + math.pi, TWO_PI) - math.pi
    return np.where(w <= -math.pi, w + TWO_PI, w)


@dataclass(frozen=True)
class SatCamera:
    width_px: int
    height_px: int
    gamma: float
    center: tuple[float, float] | None = None

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise CameraError("satellite image extents must be positive")
        if not self.gamma > 0:
            raise CameraError(f"gamma must be positive, got {self.gamma}")
        if self.center is None:
            object.__setattr__(self, "center", ((self.width_px - 1) / 2.0, (self.height_px - 1) / 2.0))
        u0, v0 = self.center
        if not (0 <= u0 <= self.width_px - 1 and 0 <= v0 <= self.height_px - 1):
            raise CameraError(f"center {self.center} outside the image")
        object.__setattr__(self, "center", (float(u0), float(v0)))

    @classmethod
    def from_coverage(cls, size_px: int, coverage_m: float) -> "SatCamera":
        return cls(size_px, size_px, coverage_m / size_px)

    def scaled(self, stride: int) -> "SatCamera":
        """Camera of a feature map whose pixel ``i`` sits at input pixel ``stride * i``."""
        return SatCamera(self.width_px // stride, self.height_px // stride, self.gamma * stride,
                         (self.center[0] / stride, self.center[1] / stride))

    def to_json(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SatCamera":
        return cls(int(d["width_px"]), int(d["height_px"]), float(d["gamma"]), tuple(d["center"]))


@dataclass(frozen=True)
class Spherical:
    """Panorama parameterised by polar angle theta (0 = up) and azimuth phi."""

    width_px: int
    height_px: int
    theta_range: tuple[float, float] = (math.pi / 4, 3 * math.pi / 4)
    phi_range: tuple[float, float] = (-math.pi, math.pi)
    kind: str = "spherical"

    def __post_init__(self):
        t0, t1 = self.theta_range
        p0, p1 = self.phi_range
        if self.width_px <= 0 or self.height_px <= 0:
            raise CameraError("panorama extents must be positive")
        if not (0.0 <= t0 < t1 <= math.pi):
            raise CameraError(f"theta_range {self.theta_range} must be ordered within [0, pi]")
        if not (-math.pi <= p0 < p1 <= math.pi):
            raise CameraError(f"phi_range {self.phi_range} must be ordered within [-pi, pi]")
        object.__setattr__(self, "theta_range", (float(t0), float(t1)))
        object.__setattr__(self, "phi_range", (float(p0), float(p1)))

    @property
    def full_circle(self) -> bool:
        return math.isclose(self.phi_range[1] - self.phi_range[0], TWO_PI)

    def scaled(self, stride: int) -> "Spherical":
        return Spherical(self.width_px // stride, self.height_px // stride, self.theta_range, self.phi_range)

    def to_json(self) -> dict:
        return {"kind": self.kind, "width_px": self.width_px, "height_px": self.height_px,
                "theta_range": list(self.theta_range), "phi_range": list(self.phi_range)}


@dataclass(frozen=True)
class Pinhole:
    f_x: float
    f_y: float
    principal_point: tuple[float, float]
    width_px: int
    height_px: int
    kind: str = "pinhole"

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise CameraError("focal lengths must be positive")
        if self.width_px <= 0 or self.height_px <= 0:
            raise CameraError("image extents must be positive")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def K(self) -> np.ndarray:
        u0, v0 = self.principal_point
        return np.array([[self.f_x, 0.0, u0], [0.0, self.f_y, v0], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "Pinhole":
        u0, v0 = self.principal_point
        return Pinhole(self.f_x / stride, self.f_y / stride, (u0 / stride, v0 / stride),
                       self.width_px // stride, self.height_px // stride)

    def to_json(self) -> dict:
        return {"kind": self.kind, "f_x": self.f_x, "f_y": self.f_y,
                "principal_point": list(self.principal_point),
                "width_px": self.width_px, "height_px": self.height_px}


GroundCamera = Union[Spherical, Pinhole]


def ground_camera_from_json(d: dict) -> GroundCamera:
    kind = d.get("kind")
    if kind == "spherical":
        return Spherical(int(d["width_px"]), int(d["height_px"]), tuple(d["theta_range"]), tuple(d["phi_range"]))
    if kind == "pinhole":
        return Pinhole(float(d["f_x"]), float(d["f_y"]), tuple(d["principal_point"]),
                       int(d["width_px"]), int(d["height_px"]))
    raise CameraError(f"unknown ground camera kind {kind!r}")


@dataclass(frozen=True)
class PoseSE2:
    """Ground camera pose: yaw about the vertical axis, planar translation, height."""

    yaw: float = 0.0
    t_x: float = 0.0
    t_z: float = 0.0
    cam_height: float = 2.0

    def __post_init__(self):
        if not self.cam_height > 0:
            raise CameraError(f"cam_height must be positive, got {self.cam_height}")
        if not (-math.pi < self.yaw <= math.pi):
            object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @property
    def R(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])

    @property
    def t(self) -> np.ndarray:
        return np.array([self.t_x, 0.0, self.t_z])

    def camera_position(self) -> np.ndarray:
        """Camera centre in world coordinates (``R @ t``)."""
        return self.R @ self.t

    def with_yaw(self, yaw: float) -> "PoseSE2":
        return PoseSE2(float(wrap_angle(yaw)), self.t_x, self.t_z, self.cam_height)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PoseSE2":
        return cls(float(d["yaw"]), float(d["t_x"]), float(d["t_z"]), float(d["cam_height"]))


# -- satellite orthographic projection --------------------------------------


def world_to_sat(x, z, cam: SatCamera):
    """Orthographic projection of world (x, z) to satellite pixels (u_s, v_s, in_bounds)."""
    u0, v0 = cam.center
    u = np.asarray(z, dtype=np.float64) / cam.gamma + u0
    v = np.asarray(x, dtype=np.float64) / cam.gamma + v0
    inb = (u >= 0) & (u <= cam.width_px - 1) & (v >= 0) & (v <= cam.height_px - 1)
    return u, v, inb


def sat_to_world(u, v, cam: SatCamera):
    """Inverse of the orthographic projection on the horizontal plane: (x, z)."""
    u0, v0 = cam.center
    return (np.asarray(v, dtype=np.float64) - v0) * cam.gamma, (np.asarray(u, dtype=np.float64) - u0) * cam.gamma


def sat_pixel_to_sph(u, v, y, cam: SatCamera):
    """Angles (theta, phi) under which a satellite pixel at vertical offset ``y`` is seen.

    Follows the case table: theta = pi/2 when y == 0, phi = pi/2 * sign(dv)
    when du == 0. The point directly at the camera (du = dv = 0) has no
    azimuth and is returned with ``valid = False``.
    """
    u0, v0 = cam.center
    du = np.asarray(u, dtype=np.float64) - u0
    dv = np.asarray(v, dtype=np.float64) - v0
    y = np.asarray(y, dtype=np.float64)
    du, dv, y = np.broadcast_arrays(du, dv, y)
    r = np.sqrt(dv * dv + du * du)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(y != 0, np.arctan2(r, -y / cam.gamma), math.pi / 2)
        phi = np.where(du != 0, np.arctan2(dv, du), math.pi / 2 * np.sign(dv))
    phi = np.where(phi <= -math.pi, phi + TWO_PI, phi)
    valid = (du != 0) | (dv != 0)
    return theta, phi, valid


def sph_to_sat_pixel(theta, phi, plane_y, cam: SatCamera):
    """Intersect the ray (theta, phi) with the horizontal plane at offset ``plane_y``.

    Returns (u_s, v_s, valid, in_bounds). Rays that never reach the plane
    (at or above the horizon for a plane below the camera) are invalid.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    plane_y = np.asarray(plane_y, dtype=np.float64)
    theta, phi, plane_y = np.broadcast_arrays(theta, phi, plane_y)
    below = plane_y > 0
    above = plane_y < 0
    valid = (below & (theta > math.pi / 2) & (theta <= math.pi)) | (above & (theta < math.pi / 2) & (theta >= 0))
    with np.errstate(invalid="ignore", over="ignore"):
        d = np.where(valid, -plane_y * np.tan(theta), 0.0)
    valid &= np.isfinite(d) & (d >= 0)
    d = np.where(valid, d, 0.0)
    u0, v0 = cam.center
    rho = d / cam.gamma
    u = u0 + rho * np.cos(phi)
    v = v0 + rho * np.sin(phi)
    inb = valid & (u >= 0) & (u <= cam.width_px - 1) & (v >= 0) & (v <= cam.height_px - 1)
    return u, v, valid, inb


# -- spherical ground camera --------------------------------------------------


def sph_to_ground_pixel(theta, phi, cam: Spherical):
    """Affine map from angles to panorama pixels: (u_g, v_g, valid)."""
    t0, t1 = cam.theta_range
    p0, p1 = cam.phi_range
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if cam.full_circle:
        phi = np.mod(phi - p0, TWO_PI) + p0
    u = (phi - p0) / (p1 - p0) * cam.width_px
    v = (theta - t0) / (t1 - t0) * cam.height_px
    valid = (theta >= t0) & (theta <= t1) & (phi >= p0) & (phi <= p1)
    return u, v, valid


def ground_pixel_to_sph(u, v, cam: Spherical):
    """Inverse affine map from panorama pixels to angles: (theta, phi, valid)."""
    t0, t1 = cam.theta_range
    p0, p1 = cam.phi_range
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    phi = p0 + u / cam.width_px * (p1 - p0)
    theta = t0 + v / cam.height_px * (t1 - t0)
    valid = (theta >= t0) & (theta <= t1) & (phi >= p0) & (phi <= p1)
    return theta, phi, valid


def sph_direction(theta, phi):
    """Unit world direction (x, y, z) for polar angle theta and world azimuth phi."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    s = np.sin(theta)
    return s * np.sin(phi), -np.cos(theta), s * np.cos(phi)


# -- pinhole ground camera ----------------------------------------------------


def pinhole_grd_to_sat(u_g, v_g, pose: PoseSE2, cam_g: Pinhole, cam_s: SatCamera, plane_y=None):
    """Back-project ground pixels onto a horizontal plane and into the satellite image.

    Evaluates ``[x, y, z] = w R K^-1 [u_g, v_g, 1] + R t`` with ``w`` fixed
    so that ``y == plane_y`` (default: the ground plane, ``cam_height``),
    then applies the orthographic projection. Returns
    ``(u_s, v_s, z, valid, in_bounds)`` where ``z`` is the world z
    coordinate in metres.
    """
    if plane_y is None:
        plane_y = pose.cam_height
    u_g, v_g, plane_y = np.broadcast_arrays(np.asarray(u_g, dtype=np.float64),
                                            np.asarray(v_g, dtype=np.float64),
                                            np.asarray(plane_y, dtype=np.float64))
    cu, cv = cam_g.principal_point
    rx = (u_g - cu) / cam_g.f_x
    ry = (v_g - cv) / cam_g.f_y
    with np.errstate(divide="ignore", invalid="ignore"):
        w = plane_y / ry
    valid = (ry != 0) & np.isfinite(w) & (w > 0)
    w = np.where(valid, w, 0.0)
    R = pose.R
    px, pz = w * rx + pose.t_x, w + pose.t_z
    x = R[0, 0] * px + R[0, 2] * pz
    z = R[2, 0] * px + R[2, 2] * pz
    u_s, v_s, inb = world_to_sat(x, z, cam_s)
    return u_s, v_s, z, valid, valid & inb


def pinhole_sat_to_grd(u_s, v_s, h, pose: PoseSE2, cam_g: Pinhole, cam_s: SatCamera):
    """Project a satellite pixel at vertical offset ``h`` into the pinhole image.

    Closed form of the inverse of :func:`pinhole_grd_to_sat`: with
    ``x = (v_s - v_s^0) gamma`` and ``z = (u_s - u_s^0) gamma``,

        X = x cos(-yaw) - z sin(-yaw) - t_x
        Z = x sin(-yaw) + z cos(-yaw) - t_z
        u_g = f_x X / Z + u_g^0,   v_g = f_y h / Z + v_g^0

    Points with ``Z <= 0`` are behind the camera and flagged invalid.
    Returns ``(u_g, v_g, valid, in_bounds)``.
    """
    x, z = sat_to_world(u_s, v_s, cam_s)
    h = np.asarray(h, dtype=np.float64)
    x, z, h = np.broadcast_arrays(x, z, h)
    c, s = math.cos(-pose.yaw), math.sin(-pose.yaw)
    X = x * c - z * s - pose.t_x
    Z = x * s + z * c - pose.t_z
    valid = Z > 0
    Zs = np.where(valid, Z, 1.0)
    cu, cv = cam_g.principal_point
    u_g = np.where(valid, cam_g.f_x * X / Zs + cu, 0.0)
    v_g = np.where(valid, cam_g.f_y * h / Zs + cv, 0.0)
    inb = valid & (u_g >= 0) & (u_g <= cam_g.width_px - 1) & (v_g >= 0) & (v_g <= cam_g.height_px - 1)
    return u_g, v_g, valid, inb


def pinhole_rays(u_g, v_g, pose: PoseSE2, cam_g: Pinhole):
    """World-frame ray directions (un-normalised) for pinhole pixels."""
    cu, cv = cam_g.principal_point
    rx = (np.asarray(u_g, dtype=np.float64) - cu) / cam_g.f_x
    ry = (np.asarray(v_g, dtype=np.float64) - cv) / cam_g.f_y
    R = pose.R
    dx = R[0, 0] * rx + R[0, 2]
    dz = R[2, 0] * rx + R[2, 2]
    return dx, ry + 0.0 * dx, dz
