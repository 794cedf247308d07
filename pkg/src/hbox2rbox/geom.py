"""Rotated and horizontal boxes, angle conventions, polygons and IoU.

Boxes are centre-size throughout. ``RBox.theta`` is stored in the canonical
range (-pi/2, pi/2]; corner vertices are counter-clockwise in a y-up frame
(the same arithmetic is used for image coordinates, so "counter-clockwise"
there reads clockwise on screen, consistently for every box).

The array-level helpers (:func:`mcr_wh`, :func:`hbox_iou_arrays`) take plain
floats, numpy arrays or :class:`~hbox2rbox.autodiff.Dual` values and are what
the losses differentiate through.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .errors import InvalidArgumentError

HALF_PI = 0.5 * math.pi
AREA_EPS = 1e-12


def canonical_angle(theta):
    """Map any finite angle to the equivalent one in (-pi/2, pi/2]."""
    t = np.mod(theta, math.pi)
    t = np.where(t > HALF_PI, t - math.pi, t)
    return float(t) if np.ndim(t) == 0 else t


def normalize_angle_quarter(theta):
    """Reduce ``theta`` modulo pi/2 into [0, pi/2)."""
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError(f"angle must be finite, got {theta!r}")
    t = np.mod(theta, HALF_PI)
    t = np.where(t >= HALF_PI, 0.0, t)
    return float(t) if np.ndim(t) == 0 else t


@dataclass(frozen=True)
class RBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"RBox fields must be finite: {vals}")
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            object.__setattr__(self, name, float(v))
        if self.w <= 0 or self.h <= 0:
            raise InvalidArgumentError(f"RBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", canonical_angle(float(self.theta)))

    @property
    def area(self):
        return self.w * self.h

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h, self.theta])

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a[:5]))


@dataclass(frozen=True)
class HBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"HBox fields must be finite: {vals}")
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            object.__setattr__(self, name, float(v))
        if self.w < 0 or self.h < 0:
            raise InvalidArgumentError(f"HBox needs w >= 0 and h >= 0, got w={self.w}, h={self.h}")

    @property
    def area(self):
        return self.w * self.h

    @property
    def xyxy(self):
        return (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2):
        return cls(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class Proposal:
    """A predicted box with its fidelity scores."""

    box: RBox
    sc_cls: float = 1.0
    sc_loc: float = 0.0
    class_id: int = 0
    symmetric: bool = True

    def __post_init__(self):
        for name in ("sc_cls", "sc_loc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {v}")


# ---------------------------------------------------------------------------
# Minimum circumscribed rectangle
# ---------------------------------------------------------------------------

def mcr_wh(w, h, theta):
    """Width and height of the axis-aligned box circumscribing a rotated w x h box."""
    c = ad.abs(ad.cos(theta))
    s = ad.abs(ad.sin(theta))
    return w * c + h * s, w * s + h * c


def mcr(rb):
    w, h = mcr_wh(rb.w, rb.h, rb.theta)
    return HBox(rb.cx, rb.cy, float(w), float(h))


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------

def rbox_corners(rb):
    """Four corners of ``rb`` as a counter-clockwise ``(4, 2)`` array."""
    return _kernels.corners_array((rb.cx, rb.cy, rb.w, rb.h, rb.theta))


def hbox_corners(hb):
    x1, y1, x2, y2 = hb.xyxy
    return np.array([[x2, y1], [x2, y2], [x1, y2], [x1, y1]], dtype=float)


def polygon_area(poly):
    """Shoelace area of a counter-clockwise polygon (0 for fewer than 3 vertices)."""
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    return max(0.0, _kernels.polygon_area_signed(poly))


def _dedupe(poly, tol=1e-12):
    if len(poly) == 0:
        return poly
    keep = np.linalg.norm(poly - np.roll(poly, 1, axis=0), axis=1) > tol
    if not keep.any():
        return poly[:1]
    return poly[keep]


def clip_convex(subject, clipper):
    """Intersection of two convex CCW polygons (Sutherland-Hodgman).

    Returns an empty ``(0, 2)`` array when the intersection has area below
    1e-12 px^2.
    """
    out = _dedupe(_kernels.clip_polygons(subject, clipper))
    if len(out) < 3 or _kernels.polygon_area_signed(out) < AREA_EPS:
        return np.zeros((0, 2))
    return out


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def hbox_iou_arrays(ax, ay, aw, ah, bx, by, bw, bh):
    """IoU of centre-size horizontal boxes; differentiable through duals."""
    iw = ad.minimum(ax + 0.5 * aw, bx + 0.5 * bw) - ad.maximum(ax - 0.5 * aw, bx - 0.5 * bw)
    ih = ad.minimum(ay + 0.5 * ah, by + 0.5 * bh) - ad.maximum(ay - 0.5 * ah, by - 0.5 * bh)
    iw = ad.maximum(iw, 0.0)
    ih = ad.maximum(ih, 0.0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


def hbox_iou(a, b):
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise InvalidArgumentError("hbox_iou needs boxes with positive area")
    return float(hbox_iou_arrays(a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h))


def rotated_iou(a, b):
    if a.area <= 0 or b.area <= 0:
        raise InvalidArgumentError("rotated_iou needs boxes with positive area")
    return float(_kernels.rotated_iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def rotated_iou_matrix(boxes_a, boxes_b):
    """Pairwise rotated IoU of two box sequences (RBox objects or (N, 5) arrays)."""
    return _kernels.rotated_iou_matrix(_as_rbox_array(boxes_a), _as_rbox_array(boxes_b))


def _as_rbox_array(boxes):
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 5)
    return np.array([b.as_array() for b in boxes], dtype=float).reshape(-1, 5)


# ---------------------------------------------------------------------------
# View transforms
# ---------------------------------------------------------------------------

def rotate_point(x, y, R, pivot):
    px, py = pivot
    c, s = math.cos(R), math.sin(R)
    dx, dy = x - px, y - py
    return px + dx * c - dy * s, py + dx * s + dy * c


def rotate_box(rb, R, pivot=(0.0, 0.0)):
    """Rotate ``rb`` by ``R`` about ``pivot``; size is unchanged."""
    cx, cy = rotate_point(rb.cx, rb.cy, R, pivot)
    return RBox(cx, cy, rb.w, rb.h, rb.theta + R)


def flip_box(rb, axis_x):
    """Mirror ``rb`` about the vertical line ``x = axis_x``."""
    return RBox(2.0 * axis_x - rb.cx, rb.cy, rb.w, rb.h, -rb.theta)
