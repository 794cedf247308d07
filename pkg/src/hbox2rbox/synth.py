"""Synthetic scenes of mirror-symmetric objects with known oriented boxes.

Every shape is a polygon defined in the box's local (u, v) frame, symmetric
about the u-axis (the ``w`` direction), and spans exactly ``[-w/2, w/2] x
[-h/2, h/2]`` so the generating box is its tight oriented box. Discs stand in
for orientation-ambiguous classes and always carry ``theta = 0``.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import GenerationError, InvalidArgumentError
from .geom import HBox, RBox, flip_box, mcr, rotate_box, rotated_iou_matrix

SHAPE_KINDS = ("rectangle", "rounded_rectangle", "cross", "airplane_polygon", "disc")
SYMMETRIC_KINDS = frozenset(SHAPE_KINDS) - {"disc"}
COVERAGE_THRESHOLD = 0.5

# Swept-wing silhouette, nose at +u; 12 vertices, CCW in the (u, v) frame.
_AIRPLANE_HALF = [(0.30, 0.07), (0.05, 0.07), (-0.20, 0.5), (-0.31, 0.5), (-0.5, 0.21)]
AIRPLANE_OUTLINE = np.array(
    [(0.5, 0.0)] + _AIRPLANE_HALF + [(-0.42, 0.0)] + [(u, -v) for u, v in reversed(_AIRPLANE_HALF)]
)
CROSS_BAR = 0.34  # bar thickness as a fraction of the perpendicular side
ROUNDING = 0.25  # corner radius as a fraction of min(w, h)

# Per-kind (min, max) of h / w when sampling scenes.
ASPECT_RANGE = {
    "rectangle": (0.35, 0.75),
    "rounded_rectangle": (0.35, 0.75),
    "cross": (0.45, 0.8),
    "airplane_polygon": (0.75, 1.0),
    "disc": (1.0, 1.0),
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    rbox: RBox
    intensity: float = 1.0
    class_id: int = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidArgumentError(f"unknown shape kind {self.kind!r}")
        if not 0.0 < self.intensity <= 1.0:
            raise InvalidArgumentError("intensity must lie in (0, 1]")
        if self.class_id is None:
            object.__setattr__(self, "class_id", SHAPE_KINDS.index(self.kind))
        if self.kind == "disc":
            d = max(self.rbox.w, self.rbox.h)
            object.__setattr__(self, "rbox", RBox(self.rbox.cx, self.rbox.cy, d, d, 0.0))

    @property
    def symmetric(self):
        return self.kind in SYMMETRIC_KINDS


@dataclass
class Scene:
    image: np.ndarray
    objects: list
    seed: int = None

    @property
    def size(self):
        return self.image.shape


@dataclass(frozen=True)
class AnnotationRecord:
    class_id: int
    t_hbox: HBox
    c_hbox: HBox
    rbox: RBox


@dataclass
class ViewSet:
    """Original, rotated and flipped scenes plus the transforms linking them."""

    ori: Scene
    rot: Scene
    flp: Scene
    R: float
    center: tuple = field(default=(0.0, 0.0))

    def to_rot(self, rb):
        return rotate_box(rb, self.R, self.center)

    def to_flp(self, rb):
        return flip_box(rb, self.center[0])


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------

def _rounded_rect_outline(w, h, segments=6):
    r = ROUNDING * min(w, h)
    pts = []
    corners = [(0.5 * w - r, -0.5 * h + r, -0.5 * math.pi), (0.5 * w - r, 0.5 * h - r, 0.0),
               (-0.5 * w + r, 0.5 * h - r, 0.5 * math.pi), (-0.5 * w + r, -0.5 * h + r, math.pi)]
    for cu, cv, a0 in corners:
        for k in range(segments + 1):
            a = a0 + 0.5 * math.pi * k / segments
            pts.append((cu + r * math.cos(a), cv + r * math.sin(a)))
    return np.array(pts)


def _cross_outline(w, h):
    a = 0.5 * CROSS_BAR * h  # half-thickness of the bar along u
    b = 0.5 * CROSS_BAR * w  # half-thickness of the bar along v
    hw, hh = 0.5 * w, 0.5 * h
    return np.array([
        (hw, -a), (hw, a), (b, a), (b, hh), (-b, hh), (-b, a),
        (-hw, a), (-hw, -a), (-b, -a), (-b, -hh), (b, -hh), (b, -a),
    ])


def local_outline(kind, w, h):
    """Polygon of a shape in its own (u, v) frame, CCW."""
    if kind == "rectangle":
        return np.array([(0.5 * w, -0.5 * h), (0.5 * w, 0.5 * h), (-0.5 * w, 0.5 * h), (-0.5 * w, -0.5 * h)])
    if kind == "rounded_rectangle":
        return _rounded_rect_outline(w, h)
    if kind == "cross":
        return _cross_outline(w, h)
    if kind == "airplane_polygon":
        return AIRPLANE_OUTLINE * np.array([w, h])
    if kind == "disc":
        t = np.linspace(0.0, 2.0 * math.pi, 64, endpoint=False)
        return 0.5 * w * np.stack([np.cos(t), np.sin(t)], axis=1)
    raise InvalidArgumentError(f"unknown shape kind {kind!r}")


def make_shape(spec):
    """The shape's outline in image coordinates as an ``(N, 2)`` array."""
    rb = spec.rbox
    local = local_outline(spec.kind, rb.w, rb.h)
    c, s = math.cos(rb.theta), math.sin(rb.theta)
    x = rb.cx + local[:, 0] * c - local[:, 1] * s
    y = rb.cy + local[:, 0] * s + local[:, 1] * c
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------------------
# Rasterisation and tight boxes
# ---------------------------------------------------------------------------

def polygon_window_coverage(poly, supersample=4, clip_to=None):
    """Coverage of the pixels under ``poly``: returns ``(coverage, x0, y0)``.

    The window is the polygon's pixel bounding box, optionally clipped to an
    image of shape ``clip_to``.
    """
    x0 = math.floor(poly[:, 0].min())
    y0 = math.floor(poly[:, 1].min())
    x1 = math.ceil(poly[:, 0].max())
    y1 = math.ceil(poly[:, 1].max())
    if clip_to is not None:
        H, W = clip_to
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, W), min(y1, H)
    cov = _kernels.polygon_coverage(poly, x0, y0, x1 - x0, y1 - y0, supersample)
    return cov, x0, y0


def object_coverage(spec, shape, supersample=4):
    """Full-image coverage map of one object."""
    H, W = shape
    out = np.zeros((H, W))
    cov, x0, y0 = polygon_window_coverage(make_shape(spec), supersample, clip_to=shape)
    if cov.size:
        out[y0:y0 + cov.shape[0], x0:x0 + cov.shape[1]] = cov
    return out


def rasterize(scene_or_objects, size=None, supersample=4, background=None):
    """Render objects as ``coverage * intensity`` over a zero (or given) background."""
    if isinstance(scene_or_objects, Scene):
        objects = scene_or_objects.objects
        size = size or scene_or_objects.size
    else:
        objects = scene_or_objects
    if isinstance(size, int):
        size = (size, size)
    H, W = size
    img = np.zeros((H, W)) if background is None else np.array(background, dtype=float)
    for spec in objects:
        cov, x0, y0 = polygon_window_coverage(make_shape(spec), supersample, clip_to=(H, W))
        if cov.size == 0:
            continue
        win = img[y0:y0 + cov.shape[0], x0:x0 + cov.shape[1]]
        win *= 1.0 - cov
        win += spec.intensity * cov
    return np.clip(img, 0.0, 1.0)


def tight_hbox(mask, offset=(0, 0)):
    """Pixel-edge extent of the occupied pixels.

    ``mask`` is boolean, or a coverage map thresholded at 0.5. ``offset`` is the
    (x, y) position of ``mask[0, 0]`` in the image.
    """
    mask = np.asarray(mask)
    occ = mask if mask.dtype == bool else mask >= COVERAGE_THRESHOLD
    rows = np.flatnonzero(occ.any(axis=1))
    cols = np.flatnonzero(occ.any(axis=0))
    if rows.size == 0:
        raise InvalidArgumentError("tight_hbox needs a non-empty mask")
    ox, oy = offset
    return HBox.from_xyxy(ox + cols[0], oy + rows[0], ox + cols[-1] + 1.0, oy + rows[-1] + 1.0)


def polygon_tight_hbox(poly, supersample=4, strip=3):
    """Tight box of an unclipped polygon, rasterising only strips along its four sides.

    Equivalent to thresholding the full window coverage, at a fraction of the
    cost for large shapes.
    """
    x0 = math.floor(poly[:, 0].min())
    y0 = math.floor(poly[:, 1].min())
    x1 = math.ceil(poly[:, 0].max())
    y1 = math.ceil(poly[:, 1].max())
    nx, ny = x1 - x0, y1 - y0

    def first_hit(axis, reverse):
        n = nx if axis == 1 else ny
        for start in range(0, n, strip):
            k = min(strip, n - start)
            off = n - start - k if reverse else start
            if axis == 1:
                cov = _kernels.polygon_coverage(poly, x0 + off, y0, k, ny, supersample)
                hit = (cov >= COVERAGE_THRESHOLD).any(axis=0)
            else:
                cov = _kernels.polygon_coverage(poly, x0, y0 + off, nx, k, supersample)
                hit = (cov >= COVERAGE_THRESHOLD).any(axis=1)
            idx = np.flatnonzero(hit)
            if idx.size:
                return off + (idx[-1] if reverse else idx[0])
        raise InvalidArgumentError("polygon covers no pixel at the coverage threshold")

    left = x0 + first_hit(1, False)
    right = x0 + first_hit(1, True) + 1
    top = y0 + first_hit(0, False)
    bottom = y0 + first_hit(0, True) + 1
    return HBox.from_xyxy(left, top, right, bottom)


def shape_tight_hbox(spec, supersample=4, clip_to=None):
    cov, x0, y0 = polygon_window_coverage(make_shape(spec), supersample, clip_to)
    return tight_hbox(cov, (x0, y0))


def annotate(spec, supersample=4, clip_to=None):
    return AnnotationRecord(spec.class_id, shape_tight_hbox(spec, supersample, clip_to), mcr(spec.rbox), spec.rbox)


def derive_annotations(scene, supersample=4):
    return [annotate(spec, supersample, clip_to=scene.size) for spec in scene.objects]


# ---------------------------------------------------------------------------
# Augmented views
# ---------------------------------------------------------------------------

def rotate_image(image, R, center=None):
    """Rotate ``image`` by ``R`` about ``center`` (default: image centre), bilinear, zero padding."""
    H, W = image.shape
    cx, cy = center if center is not None else (0.5 * W, 0.5 * H)
    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    c, s = math.cos(R), math.sin(R)
    dx, dy = xs - cx, ys - cy
    # Inverse map: output pixel p samples the source at rotate(p, -R).
    sx = cx + dx * c + dy * s
    sy = cy - dx * s + dy * c
    vals, _, _ = _kernels.bilinear_sample(image, sx, sy)
    return vals


def augment_views(scene, R=math.pi / 6):
    H, W = scene.size
    center = (0.5 * W, 0.5 * H)
    rot_objects = [replace(o, rbox=rotate_box(o.rbox, R, center)) for o in scene.objects]
    flp_objects = [replace(o, rbox=flip_box(o.rbox, center[0])) for o in scene.objects]
    rot = Scene(rotate_image(scene.image, R, center) if R else scene.image.copy(), rot_objects, scene.seed)
    flp = Scene(scene.image[:, ::-1].copy(), flp_objects, scene.seed)
    return ViewSet(scene, rot, flp, R, center)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    size: int = 256
    n_objects: tuple = (3, 8)
    kinds: tuple = ("cross", "airplane_polygon", "rounded_rectangle")
    long_side: tuple = (40.0, 120.0)
    margin: float = 4.0
    gap: float = 4.0
    noise: float = 0.05
    intensity: tuple = (0.6, 1.0)
    supersample: int = 4
    max_tries: int = 200
    max_restarts: int = 20


def _sample_object(rng, cfg, kind):
    L = rng.uniform(*cfg.long_side)
    lo, hi = ASPECT_RANGE[kind]
    h = L * rng.uniform(lo, hi)
    theta = rng.uniform(-0.5 * math.pi, 0.5 * math.pi)
    rb = RBox(0.0, 0.0, L, h, theta)
    ext = mcr(rb)
    lo_x = cfg.margin + 0.5 * ext.w
    lo_y = cfg.margin + 0.5 * ext.h
    if lo_x > cfg.size - lo_x or lo_y > cfg.size - lo_y:
        return None
    cx = rng.uniform(lo_x, cfg.size - lo_x)
    cy = rng.uniform(lo_y, cfg.size - lo_y)
    return ShapeSpec(kind, RBox(cx, cy, L, h, theta), float(rng.uniform(*cfg.intensity)))


def _place(rng, cfg, n):
    placed, inflated = [], []
    for _ in range(n):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        for _ in range(cfg.max_tries):
            spec = _sample_object(rng, cfg, kind)
            if spec is None:
                continue
            rb = spec.rbox
            grown = np.array([[rb.cx, rb.cy, rb.w + 2 * cfg.gap, rb.h + 2 * cfg.gap, rb.theta]])
            if inflated and rotated_iou_matrix(grown, np.array(inflated)).max() > 0.0:
                continue
            placed.append(spec)
            inflated.append(grown[0])
            break
        else:
            return None
    return placed


def generate_scene(seed, config=SceneConfig()):
    """Deterministic scene for ``seed``; placement failures retry with derived seeds."""
    for attempt in range(config.max_restarts):
        rng = np.random.default_rng([int(seed), attempt])
        lo, hi = config.n_objects
        n = int(rng.integers(lo, hi + 1))
        objects = _place(rng, config, n)
        if objects is None:
            continue
        background = rng.uniform(0.0, config.noise, (config.size, config.size)) if config.noise > 0 else None
        image = rasterize(objects, (config.size, config.size), config.supersample, background)
        return Scene(image, objects, int(seed))
    raise GenerationError(f"could not place objects for seed {seed} after {config.max_restarts} attempts")


def generate_dataset(n_scenes, seed=0, config=SceneConfig()):
    """``n_scenes`` scenes whose seeds are drawn from ``seed``, so datasets for different seeds don't overlap."""
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes) if n_scenes > 0 else []
    return [generate_scene(int(s), config) for s in seeds]
