"""Annotation text formats, box conversion, detection metrics and image files.

Line formats (single ASCII spaces, LF endings, six decimals when written)::

    rbox       x1 y1 x2 y2 x3 y3 x4 y4 <class> <difficulty>
    hbox       xmin ymin xmax ymax <class>
    detection  <class> <score> x1 y1 x2 y2 x3 y3 x4 y4

Corners are written starting from the box's (-w/2, -h/2) corner so that the
first edge runs along ``w``; :func:`corners_to_rbox` reads that edge back as the
width, which makes write/parse round trips exact up to the six-decimal
rounding.
"""
import math
import os
import re
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .geom import HBox, RBox, mcr, rbox_corners, rotated_iou_matrix
from .synth import SHAPE_KINDS, Scene, ShapeSpec, derive_annotations, local_outline, polygon_tight_hbox

DECIMALS = 6
NON_RECTANGULAR_TOL = 1.0
DEFAULT_SUBSET = ("airplane_polygon", "cross")
_TOKEN = re.compile(r"\S+")


class NonRectangularWarning(UserWarning):
    """Four corners deviate from the best-fit rectangle by more than the tolerance."""


class RBoxLine(NamedTuple):
    corners: np.ndarray
    cls: str
    difficulty: int


@dataclass(frozen=True)
class RBoxRecord:
    cls: str
    rbox: RBox
    difficulty: int = 0


@dataclass(frozen=True)
class HBoxRecord:
    cls: str
    hbox: HBox


@dataclass(frozen=True)
class DetectionRecord:
    cls: str
    rbox: RBox
    score: float

    def __post_init__(self):
        _check_token(self.cls)
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise InvalidArgumentError(f"score must be finite and in [0, 1], got {self.score}")
        object.__setattr__(self, "score", float(self.score))


def _check_token(token):
    if not isinstance(token, str) or not _TOKEN.fullmatch(token):
        raise InvalidArgumentError(f"class token must be a non-empty string without whitespace, got {token!r}")


def _fmt(x):
    s = f"{x:.{DECIMALS}f}"
    return "0.000000" if s == "-0.000000" else s


def _number(text, line_number):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", line_number) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite number: {text!r}", line_number)
    return v


def _fields(line, expected, kind, line_number):
    parts = line.rstrip("\r\n").split()
    if len(parts) != expected:
        raise ParseError(f"{kind} line needs {expected} fields, got {len(parts)}", line_number)
    return parts


# ---------------------------------------------------------------------------
# Corners <-> RBox
# ---------------------------------------------------------------------------

def rbox_to_corners(rb):
    """Corners in file order: (-w/2, -h/2), (w/2, -h/2), (w/2, h/2), (-w/2, h/2) in the box frame."""
    return np.roll(rbox_corners(rb), 1, axis=0)


def corners_to_rbox(corners, tol=NON_RECTANGULAR_TOL):
    """Least-squares RBox of four corners; returns ``(rbox, residual)``.

    Corners are taken in file order, so the first edge runs along ``w``. With
    the centroid removed, the signed corner sums ``a`` (along w) and ``b``
    (along h) give the best angle in closed form as the principal direction of
    ``a a^T + b' b'^T`` (``b'`` is ``b`` turned by -90 degrees), and the
    half-sides as the projections onto it. ``residual`` is the largest
    distance from an input corner to the nearest fitted corner; above ``tol``
    a :class:`NonRectangularWarning` is issued.
    """
    p = np.asarray(corners, dtype=float).reshape(4, 2)
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError("corners must be finite")
    c = p.mean(axis=0)
    q = p - c
    a = 0.25 * (-q[0] + q[1] + q[2] - q[3])
    b = 0.25 * (-q[0] - q[1] + q[2] + q[3])
    bp = np.array([b[1], -b[0]])
    m = np.outer(a, a) + np.outer(bp, bp)
    theta = 0.5 * math.atan2(2.0 * m[0, 1], m[0, 0] - m[1, 1])
    e1 = np.array([math.cos(theta), math.sin(theta)])
    if a @ e1 < 0:
        e1 = -e1
        theta += math.pi
    e2 = np.array([-e1[1], e1[0]])
    w = 2.0 * float(a @ e1)
    h = 2.0 * abs(float(b @ e2))
    scale = max(float(np.abs(q).max()), 1.0)
    if w <= 1e-12 * scale or h <= 1e-12 * scale:
        raise InvalidArgumentError("degenerate corners: the points are collinear or coincident")
    rb = RBox(c[0], c[1], w, h, theta)
    fitted = rbox_corners(rb)
    d = np.linalg.norm(p[:, None, :] - fitted[None, :, :], axis=2)
    residual = float(d.min(axis=1).max())
    if residual > tol:
        warnings.warn(f"corners deviate {residual:.3f} px from a rectangle", NonRectangularWarning, stacklevel=2)
    return rb, residual


# ---------------------------------------------------------------------------
# Line formats
# ---------------------------------------------------------------------------

def parse_rbox_line(line, line_number=None):
    parts = _fields(line, 10, "rbox", line_number)
    coords = np.array([_number(t, line_number) for t in parts[:8]]).reshape(4, 2)
    try:
        difficulty = int(parts[9])
    except ValueError:
        raise ParseError(f"difficulty must be an integer, got {parts[9]!r}", line_number) from None
    return RBoxLine(coords, parts[8], difficulty)


def format_rbox_line(corners, cls, difficulty=0):
    _check_token(cls)
    coords = " ".join(_fmt(v) for v in np.asarray(corners, dtype=float).reshape(8))
    return f"{coords} {cls} {int(difficulty)}\n"


def parse_hbox_line(line, line_number=None):
    parts = _fields(line, 5, "hbox", line_number)
    x1, y1, x2, y2 = (_number(t, line_number) for t in parts[:4])
    if x1 > x2 or y1 > y2:
        raise ParseError(f"inverted extents ({x1}, {y1}, {x2}, {y2})", line_number)
    return HBox.from_xyxy(x1, y1, x2, y2), parts[4]


def format_hbox_line(hb, cls):
    _check_token(cls)
    return " ".join(_fmt(v) for v in hb.xyxy) + f" {cls}\n"


def parse_detection_line(line, line_number=None):
    parts = _fields(line, 10, "detection", line_number)
    score = _number(parts[1], line_number)
    coords = np.array([_number(t, line_number) for t in parts[2:]])
    try:
        rb, _ = corners_to_rbox(coords)
        return DetectionRecord(parts[0], rb, score)
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), line_number) from None


def format_detection_line(det):
    coords = " ".join(_fmt(v) for v in rbox_to_corners(det.rbox).reshape(8))
    return f"{det.cls} {_fmt(det.score)} {coords}\n"


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                yield n, line


def read_rbox_file(path):
    out = []
    for n, line in _lines(path):
        parsed = parse_rbox_line(line, n)
        try:
            rb, _ = corners_to_rbox(parsed.corners)
        except InvalidArgumentError as exc:
            raise ParseError(str(exc), n) from None
        out.append(RBoxRecord(parsed.cls, rb, parsed.difficulty))
    return out


def write_rbox_file(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(format_rbox_line(rbox_to_corners(r.rbox), r.cls, r.difficulty))


def read_hbox_file(path):
    return [HBoxRecord(cls, hb) for hb, cls in (parse_hbox_line(line, n) for n, line in _lines(path))]


def write_hbox_file(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(format_hbox_line(r.hbox, r.cls))


def read_detection_file(path):
    return [parse_detection_line(line, n) for n, line in _lines(path)]


def write_detection_file(path, detections):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in detections:
            fh.write(format_detection_line(d))


# ---------------------------------------------------------------------------
# Conversion
# ---------------------------------------------------------------------------

def convert_rbox_to_chbox(records):
    """Coarse horizontal boxes: the circumscribing box of every RBox, order and class kept."""
    return [HBoxRecord(r.cls, mcr(r.rbox)) for r in records]


def convert_rbox_to_thbox(records, supersample=4):
    """Tight horizontal boxes from a rasterised mask of each object.

    Classes naming a synthetic shape kind are drawn as that shape; any other
    class is drawn as its full rectangle.
    """
    out = []
    for r in records:
        rb = r.rbox
        kind = r.cls if r.cls in SHAPE_KINDS else "rectangle"
        if kind == "disc":
            rb = RBox(rb.cx, rb.cy, max(rb.w, rb.h), max(rb.w, rb.h), 0.0)
        loc = local_outline(kind, rb.w, rb.h)
        c, s = math.cos(rb.theta), math.sin(rb.theta)
        poly = np.stack([rb.cx + loc[:, 0] * c - loc[:, 1] * s, rb.cy + loc[:, 0] * s + loc[:, 1] * c], axis=1)
        out.append(HBoxRecord(r.cls, polygon_tight_hbox(poly, supersample)))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def angle_error(pred, gt):
    """Absolute angle difference in degrees, folded by the pi/2 box symmetry into [0, 45]."""
    d = pred.theta - gt.theta
    d -= 0.5 * math.pi * round(d / (0.5 * math.pi))
    return min(abs(math.degrees(d)), 45.0)


def average_precision(tp, n_gt):
    """All-point interpolated AP of a score-ordered true-positive sequence.

    Precision and recall are ratios of counts, so the area is accumulated in
    exact rational arithmetic and rounded once at the end.
    """
    if n_gt <= 0:
        raise InvalidArgumentError("average precision needs at least one ground truth")
    hits = [bool(t) for t in tp]
    if not hits:
        return 0.0
    points, k = [], 0
    for i, hit in enumerate(hits, start=1):
        k += hit
        points.append((Fraction(k, n_gt), Fraction(k, i)))
    area, best, prev_recall = Fraction(0), Fraction(0), None
    # Walk from the highest recall down, carrying the precision envelope.
    for recall, precision in reversed(points):
        if prev_recall is not None:
            area += (prev_recall - recall) * best
        best = max(best, precision)
        prev_recall = recall
    area += prev_recall * best
    return float(area)


@dataclass
class MetricsReport:
    ap: dict
    map50: float
    subset_map50: float
    subset: tuple
    mean_iou: float
    median_iou: float
    median_angle_error: float
    n_gt: int
    n_pred: int
    n_tp: int
    iou_thresh: float = 0.5
    matches: list = field(default=None, repr=False)

    def items(self):
        """Report fields in their fixed print order."""
        yield "iou_thresh", self.iou_thresh
        yield "n_gt", self.n_gt
        yield "n_pred", self.n_pred
        yield "n_tp", self.n_tp
        yield "map50", self.map50
        yield "subset", ",".join(self.subset)
        yield "subset_map50", self.subset_map50
        yield "mean_iou", self.mean_iou
        yield "median_iou", self.median_iou
        yield "median_angle_error_deg", self.median_angle_error
        for cls in sorted(self.ap):
            yield f"ap50[{cls}]", self.ap[cls]

    def format(self):
        return "".join(f"{k}: {_fmt(v) if isinstance(v, float) else v}\n" for k, v in self.items())

    def to_dict(self):
        d = {k: v for k, v in self.items() if not k.startswith("ap50[")}
        d["ap50"] = dict(sorted(self.ap.items()))
        return d


def _gt_pairs(gts):
    return [(g.cls, g.rbox) if isinstance(g, RBoxRecord) else (g[0], g[1]) for g in gts]


def ap50(preds, gts, iou_thresh=0.5, subset=DEFAULT_SUBSET):
    """Per-class AP at a rotated-IoU threshold plus overall and subset means, for one image.

    ``gts`` holds ``(class, RBox)`` pairs or :class:`RBoxRecord` objects. See
    :func:`ap50_images` for the matching rule.
    """
    return ap50_images([(preds, gts)], iou_thresh, subset)


def ap50_images(images, iou_thresh=0.5, subset=DEFAULT_SUBSET):
    """AP over several images given as ``(preds, gts)`` pairs.

    Within each image and class, detections are matched greedily in
    descending score order (ties keep input order): each takes the ground
    truth it overlaps most, and counts as a true positive only if that overlap
    reaches ``iou_thresh`` and the ground truth is still unmatched. The
    resulting hits of all images are then ranked together by score per class.
    IoU and angle statistics cover the true positives.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise InvalidArgumentError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    images = [(list(p), _gt_pairs(g)) for p, g in images]
    n_gt = sum(len(g) for _, g in images)
    if n_gt == 0:
        raise InvalidArgumentError("ap50 needs at least one ground truth box")
    classes = sorted({c for _, g in images for c, _ in g})
    ap, matches = {}, []
    for cls in classes:
        scored, n_cls = [], 0  # (score, image rank, detection rank, hit)
        for k, (preds, gts) in enumerate(images):
            g = [rb for c, rb in gts if c == cls]
            n_cls += len(g)
            p = [d for d in preds if d.cls == cls]
            order = sorted(range(len(p)), key=lambda i: -p[i].score)
            p = [p[i] for i in order]
            ious = None
            if p and g:
                ious = rotated_iou_matrix(np.array([d.rbox.as_array() for d in p]), np.array([b.as_array() for b in g]))
            taken = np.zeros(len(g), dtype=bool)
            for i, det in enumerate(p):
                hit = False
                if ious is not None:
                    j = int(np.argmax(ious[i]))
                    if ious[i, j] >= iou_thresh and not taken[j]:
                        taken[j] = hit = True
                        matches.append((cls, det, g[j], float(ious[i, j])))
                scored.append((-det.score, k, i, hit))
        scored.sort(key=lambda t: t[:3])
        ap[cls] = average_precision([t[3] for t in scored], n_cls)
    picked = [ap[c] for c in subset if c in ap]
    iou = np.array([m[3] for m in matches])
    ang = np.array([angle_error(m[1].rbox, m[2]) for m in matches])
    nan = float("nan")
    return MetricsReport(
        ap=ap,
        map50=float(np.mean(list(ap.values()))),
        subset_map50=float(np.mean(picked)) if picked else nan,
        subset=tuple(subset),
        mean_iou=float(iou.mean()) if iou.size else nan,
        median_iou=float(np.median(iou)) if iou.size else nan,
        median_angle_error=float(np.median(ang)) if ang.size else nan,
        n_gt=n_gt,
        n_pred=sum(len(p) for p, _ in images),
        n_tp=len(matches),
        iou_thresh=float(iou_thresh),
        matches=matches,
    )


# ---------------------------------------------------------------------------
# Portable graymap (binary P5)
# ---------------------------------------------------------------------------

def write_pgm(path, image, maxval=65535):
    """Write a [0, 1] float image as binary PGM (16-bit big-endian when ``maxval`` > 255)."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise InvalidArgumentError("PGM images must be 2-D")
    if not 0 < maxval <= 65535:
        raise InvalidArgumentError("maxval must be in 1..65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(data)


def read_pgm(path):
    """Read a binary PGM as a float image scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed PGM header") from None
    if not 0 < maxval <= 65535:
        raise ParseError(f"{path}: maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    n = width * height
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=pos) if len(raw) - pos >= n * np.dtype(dtype).itemsize else None
    if data is None:
        raise ParseError(f"{path}: truncated PGM data")
    return data.reshape(height, width).astype(float) / maxval


# ---------------------------------------------------------------------------
# Scene directories
# ---------------------------------------------------------------------------

SCENE_PREFIX = "scene_"


def write_scene(directory, index, scene, supersample=4):
    """Write one scene as ``scene_NNNN.pgm`` plus ``.rbox.txt``, ``.thbox.txt`` and ``.chbox.txt``."""
    stem = os.path.join(directory, f"{SCENE_PREFIX}{index:04d}")
    write_pgm(stem + ".pgm", scene.image)
    anns = derive_annotations(scene, supersample)
    write_rbox_file(stem + ".rbox.txt", [RBoxRecord(o.kind, o.rbox) for o in scene.objects])
    write_hbox_file(stem + ".thbox.txt", [HBoxRecord(o.kind, a.t_hbox) for o, a in zip(scene.objects, anns)])
    write_hbox_file(stem + ".chbox.txt", [HBoxRecord(o.kind, a.c_hbox) for o, a in zip(scene.objects, anns)])
    return stem


def scene_stems(directory):
    """Scene file stems (``scene_NNNN``) in a directory, in file-name order."""
    names = sorted(f for f in os.listdir(directory) if f.startswith(SCENE_PREFIX) and f.endswith(".pgm"))
    if not names:
        raise InvalidArgumentError(f"no {SCENE_PREFIX}*.pgm files in {directory}")
    return [n[:-4] for n in names]


def load_scene_dir(directory):
    """Scenes from a directory written by :func:`write_scene`, in file-name order.

    Object classes naming a shape kind keep it; any other class is treated as
    a plain rectangle.
    """
    scenes = []
    for name in scene_stems(directory):
        stem = os.path.join(directory, name)
        image = read_pgm(stem + ".pgm")
        objects = [
            ShapeSpec(r.cls if r.cls in SHAPE_KINDS else "rectangle", r.rbox)
            for r in read_rbox_file(stem + ".rbox.txt")
        ]
        scenes.append(Scene(image, objects))
    return scenes
