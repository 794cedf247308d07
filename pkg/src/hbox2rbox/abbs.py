"""Adaptive bounding-box scaling of horizontal ground truth.

A horizontal GT box is expanded into ``n**2`` candidates whose width and
height factors come from a uniform scale grid, bent by the predicted angle
through :func:`scale_adjust`: no change for axis-aligned predictions, the full
factor at 45 degrees. The regression loss takes, per proposal, the best IoU
over the candidates and adds a small pull towards the unscaled box.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError
from .geom import HALF_PI, HBox, hbox_iou_arrays, mcr_wh, normalize_angle_quarter

QUARTER_PI = 0.25 * math.pi


@dataclass(frozen=True)
class ScaleGrid:
    s_min: float = 1.0
    s_max: float = 1.5
    n: int = 6

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise InvalidArgumentError(f"scale grid needs n >= 2, got {self.n}")
        if not self.s_min <= self.s_max:
            raise InvalidArgumentError(f"scale grid needs s_min <= s_max, got {self.s_min} > {self.s_max}")
        if self.s_min <= 0:
            raise InvalidArgumentError("scale factors must be positive")

    @classmethod
    def from_step(cls, s_min, s_max, step):
        """Grid from a range and a step; ``n = round((max - min) / step) + 1``."""
        if step <= 0:
            raise InvalidArgumentError("scale step must be positive")
        n = int(round((s_max - s_min) / step)) + 1
        return cls(float(s_min), float(s_max), max(n, 2))

    @property
    def step(self):
        return (self.s_max - self.s_min) / (self.n - 1)

    def factors(self):
        return basic_scale_factors(self)


#: Grid for tight (T-HBox) supervision.
TIGHT_GRID = ScaleGrid(1.0, 1.5, 6)
#: Grid for coarse (C-HBox) supervision.
COARSE_GRID = ScaleGrid(0.9, 1.1, 5)


@dataclass(frozen=True)
class ScaledHboxSet:
    boxes: list
    index_pairs: list

    def __len__(self):
        return len(self.boxes)


def basic_scale_factors(grid):
    if grid.n < 2:
        raise InvalidArgumentError("scale grid needs n >= 2")
    i = np.arange(grid.n)
    return grid.s_min + (grid.s_max - grid.s_min) / (grid.n - 1) * i


def _scale_adjust(theta, s):
    # theta already in [0, pi/2); vectorised, duals welcome.
    if not isinstance(theta, ad.Dual):
        theta = np.asarray(theta, dtype=float)
    rising = (4.0 / math.pi) * (s - 1.0) * theta + 1.0
    falling = (4.0 / math.pi) * (1.0 - s) * theta + (2.0 * s - 1.0)
    return ad.where(ad.value(theta) < QUARTER_PI, rising, falling)


def scale_adjust(theta, s):
    """Angle-adjusted scale: 1 at theta=0, ``s`` at pi/4, back towards 1 at pi/2."""
    if not np.all((np.asarray(theta) >= 0.0) & (np.asarray(theta) < HALF_PI)):
        raise InvalidArgumentError(f"scale_adjust needs theta in [0, pi/2), got {theta!r}")
    if not np.all(np.asarray(s) > 0):
        raise InvalidArgumentError(f"scale must be positive, got {s!r}")
    out = _scale_adjust(theta, s)
    return float(out) if np.ndim(out) == 0 else out


def adjusted_factors(theta_pred, grid):
    """Angle-adjusted factors ``f(theta', s_i)`` for every grid entry; a dual angle gives dual factors."""
    if isinstance(theta_pred, ad.Dual):
        v = np.asarray(theta_pred.val, dtype=float)
        t = theta_pred - HALF_PI * np.floor(v / HALF_PI)  # reduction shifts by a constant
        t = t.reshape(*np.shape(v), 1)
    else:
        t = np.asarray(normalize_angle_quarter(theta_pred))[..., None]
    return _scale_adjust(t, basic_scale_factors(grid))


def scaled_gt_hboxes(gt, theta_pred, grid):
    if gt.w <= 0 or gt.h <= 0:
        raise InvalidArgumentError("scaled_gt_hboxes needs a GT box with positive area")
    f = adjusted_factors(theta_pred, grid)
    boxes, pairs = [], []
    for i in range(grid.n):
        for j in range(grid.n):
            boxes.append(HBox(gt.cx, gt.cy, gt.w * f[i], gt.h * f[j]))
            pairs.append((i, j))
    return ScaledHboxSet(boxes, pairs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def abbs_terms(cx, cy, w, h, theta, gt, grid, theta_grad=False):
    """Per-proposal scaled-min IoU loss and plain IoU loss.

    Inputs are 1-D arrays (or duals over arrays) of length ``N``; ``gt`` is an
    ``(N, 4)`` array of centre-size GT boxes. ``theta`` enters the predicted
    circumscribed box, and its derivative is kept only when ``theta_grad`` is
    set, both through the circumscribed box and through the angle-adjusted
    scale factors. The minimising candidate is located on values and treated
    as constant.

    Returns ``(min_loss, plain_loss, argmin)`` with ``argmin`` an ``(N, 2)``
    integer array of grid indices.
    """
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)
    th = theta if theta_grad else ad.detach(theta)
    pw, ph = mcr_wh(w, h, th)
    th_flat = th.reshape(-1) if isinstance(th, ad.Dual) else np.asarray(th, dtype=float).reshape(-1)
    f = adjusted_factors(th_flat, grid)  # (N, n)
    n = grid.n
    gw = gt[:, 2:3] * f  # (N, n) candidate widths
    gh = gt[:, 3:4] * f
    # Values only: IoU of every (i, j) candidate.
    vcx, vcy = (np.asarray(ad.value(v), dtype=float).reshape(-1, 1, 1) for v in (cx, cy))
    vw, vh = (np.asarray(ad.value(v), dtype=float).reshape(-1, 1, 1) for v in (pw, ph))
    ious = hbox_iou_arrays(
        vcx, vcy, vw, vh,
        gt[:, 0, None, None], gt[:, 1, None, None], ad.value(gw)[:, :, None], ad.value(gh)[:, None, :],
    )
    flat = (1.0 - ious).reshape(len(gt), n * n)
    k = np.argmin(flat, axis=1)  # first minimum -> lexicographic (i, j) tie-break
    bi, bj = np.divmod(k, n)
    rows = np.arange(len(gt))
    sel_w = gw[rows, bi]
    sel_h = gh[rows, bj]
    min_loss = 1.0 - hbox_iou_arrays(cx, cy, pw, ph, gt[:, 0], gt[:, 1], sel_w, sel_h)
    plain = 1.0 - hbox_iou_arrays(cx, cy, pw, ph, gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3])
    return min_loss, plain, np.stack([bi, bj], axis=1)


def _unpack(proposals, gts):
    if len(proposals) == 0:
        raise InvalidArgumentError("abbs_loss needs at least one proposal")
    if len(proposals) != len(gts):
        raise InvalidArgumentError("proposals and GT boxes must align one-to-one")
    boxes = [getattr(p, "box", p) for p in proposals]
    arr = np.array([b.as_array() for b in boxes], dtype=float)
    for g in gts:
        if g.w <= 0 or g.h <= 0:
            raise InvalidArgumentError("GT boxes need positive area")
    gt = np.array([g.as_array() for g in gts], dtype=float)
    return arr, gt


def abbs_loss(proposals, gts, grid):
    """Mean over proposals of the best IoU loss among scaled GT candidates.

    Returns ``(loss, argmin)`` where ``argmin[l]`` is the ``(i, j)`` grid index
    pair chosen for proposal ``l``.
    """
    arr, gt = _unpack(proposals, gts)
    min_loss, _, idx = abbs_terms(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], gt, grid)
    return float(np.mean(min_loss)), [tuple(int(v) for v in row) for row in idx]


def regression_loss(proposals, gts, grid, alpha=0.01):
    arr, gt = _unpack(proposals, gts)
    min_loss, plain, _ = abbs_terms(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], gt, grid)
    return float(np.mean(min_loss) + alpha * np.mean(plain))


def regression_loss_params(params, gt, grid, alpha=0.01, theta_grad=False, enable_abbs=True):
    """Differentiable regression loss for an ``(N, 5)`` parameter block.

    ``params`` may be a dual (see :func:`hbox2rbox.autodiff.grad`). Returns the
    per-row loss vector; with ``enable_abbs`` off the scaled minimum is replaced
    by the plain IoU loss.
    """
    p = params.reshape(-1, 5) if not isinstance(params, ad.Dual) else params.reshape(-1, 5)
    cx, cy, w, h, th = (p[:, k] for k in range(5))
    if enable_abbs:
        min_loss, plain, _ = abbs_terms(cx, cy, w, h, th, gt, grid, theta_grad)
    else:
        thd = th if theta_grad else ad.detach(th)
        pw, ph = mcr_wh(w, h, thd)
        gt = np.asarray(gt, dtype=float).reshape(-1, 4)
        plain = 1.0 - hbox_iou_arrays(cx, cy, pw, ph, gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3])
        min_loss = plain
    return min_loss + alpha * plain
