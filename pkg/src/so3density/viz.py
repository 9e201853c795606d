"""Mollweide visualization of SO(3) distributions.

Each rotation is split into the image of a canonical axis (a point on the
2-sphere) and a tilt angle about that direction; the sphere is shown in the
equal-area Mollweide projection with dot size encoding probability mass and
dot hue encoding tilt.  SVG output is byte-deterministic for fixed inputs.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import EquivolumetricGrid
from .infer import PoseDistribution
from .rotation import Rotation, as_quat_array

__all__ = [
    "VizConfig",
    "hopf_split",
    "hopf_join",
    "mollweide",
    "render",
]

_AXES = {"x": 0, "y": 1, "z": 2}
HAAR_VOLUME = math.pi ** 2


def _reference_frame(direction, axis_idx):
    """Rotation carrying e_axis to `direction` along their great circle.

    This parallel transport defines the zero-tilt frame; at the antipode the
    limit is fixed as a half-turn about the next basis axis.
    """
    e = np.zeros(3)
    e[axis_idx] = 1.0
    c = float(np.dot(e, direction))
    if c > 1.0 - 1e-14:
        return Rotation.identity()
    if c < -1.0 + 1e-14:
        perp = np.zeros(3)
        perp[(axis_idx + 1) % 3] = 1.0
        return Rotation.from_axis_angle(perp, math.pi)
    axis = np.cross(e, direction)
    return Rotation.from_axis_angle(axis, math.acos(max(-1.0, min(1.0, c))))


def hopf_split(r: Rotation, axis: str = "z"):
    """(direction, tilt): direction = r e_axis; tilt in [0, 2 pi).

    The tilt is the residual rotation about `direction`, measured against
    the transported reference frame, so r == ref(direction) * R_axis(tilt).
    """
    idx = _AXES[axis]
    direction = r.matrix[:, idx].copy()
    ref = _reference_frame(direction, idx)
    res = ref.inverse().matrix @ r.matrix  # a rotation about e_axis
    if idx == 2:
        tilt = math.atan2(res[1, 0], res[0, 0])
    elif idx == 0:
        tilt = math.atan2(res[2, 1], res[1, 1])
    else:
        tilt = math.atan2(res[0, 2], res[2, 2])
    return direction, tilt % (2.0 * math.pi)


def hopf_join(direction, tilt: float, axis: str = "z") -> Rotation:
    """Inverse of hopf_split: rebuild the rotation from direction and tilt."""
    idx = _AXES[axis]
    ref = _reference_frame(np.asarray(direction, dtype=np.float64), idx)
    spin = Rotation.from_axis_angle(np.eye(3)[idx], tilt)
    from .rotation import compose

    return compose(ref, spin)


def mollweide(lat: float, lon: float):
    """Equal-area Mollweide projection of (latitude, longitude), radians.

    Solves 2t + sin 2t = pi sin(lat) by Newton iteration (tol 1e-12); the
    poles are handled analytically.  x in [-2 sqrt 2, 2 sqrt 2], y in
    [-sqrt 2, sqrt 2].
    """
    if abs(lat) > math.pi / 2 + 1e-12 or abs(lon) > math.pi + 1e-12:
        raise ValueError("latitude/longitude out of range")
    if abs(abs(lat) - math.pi / 2) < 1e-12:
        t = math.copysign(math.pi / 2, lat)
    else:
        t = lat
        target = math.pi * math.sin(lat)
        for _ in range(50):
            err = 2.0 * t + math.sin(2.0 * t) - target
            if abs(err) < 1e-12:
                break
            t -= err / (2.0 + 2.0 * math.cos(2.0 * t))
    x = (2.0 * math.sqrt(2.0) / math.pi) * lon * math.cos(t)
    y = math.sqrt(2.0) * math.sin(t)
    return x, y


@dataclass(frozen=True)
class VizConfig:
    canonical_axis: str = "z"
    size_scale: float = 1.0
    density_floor: float = 2.0  # display floor, multiples of uniform
    width: int = 800
    gt_orbit: np.ndarray | None = None  # (K, 4) quaternions drawn as outlines

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width must be > 0")
        if self.density_floor < 0:
            raise ValueError("density_floor must be >= 0")
        if self.canonical_axis not in _AXES:
            raise ValueError("canonical_axis must be one of x, y, z")


def _direction_to_latlon(d):
    z = max(-1.0, min(1.0, float(d[2])))
    return math.asin(z), math.atan2(float(d[1]), float(d[0]))


def _tilt_color(tilt: float) -> str:
    r, g, b = colorsys.hsv_to_rgb((tilt / (2.0 * math.pi)) % 1.0, 1.0, 0.85)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


class _Canvas:
    def __init__(self, width):
        self.width = width
        self.height = width // 2
        margin = 0.02 * width
        self.sx = (width - 2 * margin) / (4.0 * math.sqrt(2.0))
        self.ox = width / 2.0
        self.oy = self.height / 2.0

    def to_px(self, x, y):
        return self.ox + x * self.sx, self.oy - y * self.sx


def _graticule(canvas):
    parts = []
    step = math.radians(1.0)
    for lat_deg in range(-60, 61, 30):
        lat = math.radians(lat_deg)
        pts = [canvas.to_px(*mollweide(lat, -math.pi + i * step)) for i in range(361)]
        parts.append(_polyline(pts))
    for lon_deg in range(-180, 181, 30):
        lon = math.radians(lon_deg)
        pts = [canvas.to_px(*mollweide(-math.pi / 2 + i * step, lon)) for i in range(181)]
        parts.append(_polyline(pts))
    return parts


def _polyline(pts):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
    return f'<polyline points="{coords}" fill="none" stroke="#cccccc" stroke-width="0.5"/>'


def render(dist: PoseDistribution, grid: EquivolumetricGrid,
           config: VizConfig, out_path) -> None:
    """Write the distribution as an SVG Mollweide plot.

    Cells above the display floor become filled dots with radius
    proportional to sqrt(cell mass); the optional ground-truth orbit is
    drawn as unfilled outlined circles.
    """
    if len(grid) != dist.densities.shape[0]:
        raise ValueError("grid and distribution sizes differ")
    canvas = _Canvas(config.width)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="0 0 {canvas.width} {canvas.height}" '
        f'width="{canvas.width}" height="{canvas.height}">',
        f'<rect width="{canvas.width}" height="{canvas.height}" fill="#ffffff"/>',
    ]
    lines.extend(_graticule(canvas))

    floor = config.density_floor / HAAR_VOLUME
    volume = dist.cell_volume
    for cell in np.flatnonzero(dist.densities >= floor):
        r = grid.rotation(int(cell))
        direction, tilt = hopf_split(r, config.canonical_axis)
        lat, lon = _direction_to_latlon(direction)
        px, py = canvas.to_px(*mollweide(lat, lon))
        mass = dist.densities[cell] * volume
        radius = config.size_scale * (config.width / 40.0) * math.sqrt(mass)
        lines.append(
            f'<circle class="dot" cx="{px:.2f}" cy="{py:.2f}" r="{radius:.2f}" '
            f'fill="{_tilt_color(tilt)}" fill-opacity="0.85"/>'
        )

    if config.gt_orbit is not None:
        for q in as_quat_array(config.gt_orbit):
            direction, _ = hopf_split(Rotation(q), config.canonical_axis)
            lat, lon = _direction_to_latlon(direction)
            px, py = canvas.to_px(*mollweide(lat, lon))
            lines.append(
                f'<circle class="gt" cx="{px:.2f}" cy="{py:.2f}" '
                f'r="{config.width / 100.0:.2f}" fill="none" '
                f'stroke="#222222" stroke-width="1.5"/>'
            )

    lines.append("</svg>")
    with open(out_path, "wb") as fh:
        fh.write("\n".join(lines).encode("utf-8"))
        fh.write(b"\n")
