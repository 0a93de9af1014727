"""Ego-centric, ego-rotated birdview rendering.

The observation is a square RGB raster centered on the ego agent with its
heading pointing up. Painter's order: background, drivable triangles,
stop lines tinted by light phase, classmate boxes, ego box, then the
active waypoint circle. Colors are a versioned constant so golden-image
tests stay stable across releases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AgentGeometry, AgentState, MapMesh, obb_corners

RASTER_SIZE = 64  # px, square
METERS_PER_PIXEL = 0.5

PALETTE_VERSION = 1
COLOR_BACKGROUND = (16, 16, 16)
COLOR_DRIVABLE = (70, 70, 70)
COLOR_STOP_LINE = {"green": (40, 200, 60), "yellow": (230, 200, 40), "red": (220, 40, 40)}
COLOR_CLASSMATE = (60, 130, 240)
COLOR_EGO = (250, 250, 250)
COLOR_WAYPOINT = (150, 95, 35)  # brown circle marker

STOP_LINE_HALF_WIDTH = 0.4  # m, rendered thickness of a stop line


@dataclass(frozen=True)
class BirdviewRaster:
    """Rendered observation; pixels are H x W x 3 uint8, ego at the center."""

    pixels: np.ndarray
    meters_per_pixel: float = METERS_PER_PIXEL

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def raster_transform(ego: AgentState, size: int = RASTER_SIZE, mpp: float = METERS_PER_PIXEL) -> np.ndarray:
    """2x3 affine matrix mapping world (x, y, 1) to fractional pixel (px, py).

    Composition: translate by -ego position, rotate by -(psi - pi/2) so the
    heading maps up, scale by 1/mpp, flip y for the y-down image convention,
    offset to the image center.
    """
    angle = math.pi / 2.0 - ego.psi
    c, s = math.cos(angle), math.sin(angle)
    center = size / 2.0
    # Rotated offset u = R(angle) @ (p - ego); px = cx + u_x/mpp, py = cy - u_y/mpp.
    m = np.array([
        [c / mpp, -s / mpp, 0.0],
        [-s / mpp, -c / mpp, 0.0],
    ])
    shift = m[:, :2] @ np.array([-ego.x, -ego.y]) + np.array([center, center])
    m[:, 2] = shift
    return m


def world_to_raster(ego: AgentState, points, size: int = RASTER_SIZE, mpp: float = METERS_PER_PIXEL) -> np.ndarray:
    """Map world points (meters) to fractional pixel coordinates (px, py).

    Out-of-frame points simply map to out-of-range coordinates; callers clip.
    """
    m = raster_transform(ego, size=size, mpp=mpp)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = pts @ m[:, :2].T + m[:, 2]
    return out if np.ndim(points) > 1 else out[0]


def _fill_convex(pixels: np.ndarray, poly: np.ndarray, color) -> None:
    """Paint pixels whose centers fall inside a convex polygon (pixel coords)."""
    size = pixels.shape[0]
    lo = np.floor(poly.min(axis=0)).astype(int)
    hi = np.ceil(poly.max(axis=0)).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0], size - 1), min(hi[1], size - 1)
    if x0 > x1 or y0 > y1:
        return  # fully outside the frame
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    px, py = np.meshgrid(xs, ys)
    inside = np.ones(px.shape, dtype=bool)
    n = len(poly)
    # Signed area fixes the winding after the y-flip of the image frame.
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    sign = 1.0 if area >= 0.0 else -1.0
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside &= sign * cross >= -1e-9
    pixels[py[inside], px[inside]] = color


def _fill_circle(pixels: np.ndarray, center: np.ndarray, radius_px: float, color) -> None:
    size = pixels.shape[0]
    x0 = max(int(math.floor(center[0] - radius_px)), 0)
    x1 = min(int(math.ceil(center[0] + radius_px)), size - 1)
    y0 = max(int(math.floor(center[1] - radius_px)), 0)
    y1 = min(int(math.ceil(center[1] + radius_px)), size - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    px, py = np.meshgrid(xs, ys)
    inside = (px - center[0]) ** 2 + (py - center[1]) ** 2 <= radius_px**2
    pixels[py[inside], px[inside]] = color


def _stop_line_quad(light, half_width: float) -> np.ndarray:
    a = np.asarray(light.stop_line[0], dtype=float)
    b = np.asarray(light.stop_line[1], dtype=float)
    direction = b - a
    norm = np.hypot(*direction)
    if norm < 1e-9:
        direction = np.array([1.0, 0.0])
        norm = 1.0
    normal = np.array([-direction[1], direction[0]]) / norm * half_width
    return np.array([a + normal, b + normal, b - normal, a - normal])


def render(
    ego_index: int,
    states,
    geoms,
    mesh: MapMesh,
    waypoint=None,
    light_phases=None,
    waypoint_radius: float = 2.0,
    size: int = RASTER_SIZE,
    mpp: float = METERS_PER_PIXEL,
) -> BirdviewRaster:
    """Render the birdview observation for one agent.

    `states` is an (N, 4) array or a sequence of AgentState; `waypoint` is an
    optional world point drawn as a filled circle of `waypoint_radius` meters.
    A waypoint whose center falls outside the frame is not drawn at all, so
    agents act unconditionally until it enters their vicinity.
    """
    states = np.asarray([s.as_array() if isinstance(s, AgentState) else s for s in states], dtype=float)
    if not (0 <= ego_index < len(states)):
        raise IndexError(f"ego index {ego_index} out of range")
    if not np.all(np.isfinite(states)):
        raise ValueError("non-finite state passed to render")
    ego = AgentState.from_array(states[ego_index])
    transform = raster_transform(ego, size=size, mpp=mpp)

    def to_px(points):
        return np.atleast_2d(points) @ transform[:, :2].T + transform[:, 2]

    pixels = np.empty((size, size, 3), dtype=np.uint8)
    pixels[:] = COLOR_BACKGROUND

    half_extent = size * mpp / 2.0
    frame_reach = half_extent * math.sqrt(2.0)
    for tri in mesh.triangles:
        # Skip triangles that cannot touch the frame.
        if np.min(np.hypot(tri[:, 0] - ego.x, tri[:, 1] - ego.y)) > frame_reach + _triangle_span(tri):
            continue
        _fill_convex(pixels, to_px(tri), COLOR_DRIVABLE)

    if light_phases is None:
        light_phases = mesh.light_phases(0.0)
    for light, phase in zip(mesh.traffic_lights, light_phases):
        quad = _stop_line_quad(light, STOP_LINE_HALF_WIDTH)
        _fill_convex(pixels, to_px(quad), COLOR_STOP_LINE[phase])

    for idx in range(len(states)):
        if idx == ego_index:
            continue
        corners = obb_corners(AgentState.from_array(states[idx]), geoms[idx])
        _fill_convex(pixels, to_px(corners), COLOR_CLASSMATE)
    _fill_convex(pixels, to_px(obb_corners(ego, geoms[ego_index])), COLOR_EGO)

    if waypoint is not None:
        center = to_px(np.asarray(waypoint, dtype=float))[0]
        if 0.0 <= center[0] <= size - 1 and 0.0 <= center[1] <= size - 1:
            _fill_circle(pixels, center, waypoint_radius / mpp, COLOR_WAYPOINT)

    return BirdviewRaster(pixels=pixels, meters_per_pixel=mpp)


def _triangle_span(tri: np.ndarray) -> float:
    return float(np.max(np.hypot(tri[:, 0] - tri[0, 0], tri[:, 1] - tri[0, 1])))


def save_png(raster: BirdviewRaster, path, scale: int = 1) -> None:
    """Write a raster to disk, optionally integer-upscaled for inspection."""
    from PIL import Image

    pixels = raster.pixels
    if scale > 1:
        pixels = np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)
    Image.fromarray(pixels, mode="RGB").save(path)
