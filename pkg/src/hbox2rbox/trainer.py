"""Direct optimisation of per-object box parameters on the full objective.

A desk-scale stand-in for the detector: every object owns a box per view
(original, rotated by ``R``, horizontally flipped) and those boxes are fitted by
gradient descent on the horizontal-box regression loss of each view, the
angle-consistency losses tying the three angles together, and the symmetry
loss on the original view.

The whole dataset is optimised as one batch. Objects never interact, so a
single forward-mode pass seeded on one parameter column differentiates every
object at once (see :func:`hbox2rbox.autodiff.batched_grad`). For the symmetry
loss the scene images are laid side by side on one zero-padded canvas and
each object's samples are shifted onto its own scene.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .abbs import COARSE_GRID, TIGHT_GRID, ScaleGrid, regression_loss_params
from .errors import InvalidArgumentError, NumericFailureError
from .geom import HBox, RBox, canonical_angle, hbox_iou_arrays, mcr_wh, rotated_iou_matrix
from .losses import SNAP_PERIOD, LossWeights, flp_loss, rot_loss
from .spa import DEFAULT_GRID, default_topk, spa_terms
from .synth import derive_annotations, local_outline, polygon_tight_hbox

log = logging.getLogger(__name__)

VIEWS = ("ori", "rot", "flp")
CANVAS_PAD = 96
R_RANGE = (math.pi / 12, 11 * math.pi / 12)


@dataclass(frozen=True)
class TrainConfig:
    supervision: str = "t_hbox"
    grid: ScaleGrid = TIGHT_GRID
    weights: LossWeights = LossWeights()
    iters: int = 300
    step_size: float = 1.0
    R_sampler: object = "uniform"
    enable_abbs: bool = True
    enable_spa: bool = True
    seed: int = 0
    spa_topk: object = 1.0
    spa_grid: int = DEFAULT_GRID
    reg_theta_grad: bool = False
    snap_period: float = SNAP_PERIOD
    pos_scale: float = 0.5
    size_scale: float = 3.0
    angle_scale: float = 0.01
    jitter: float = 0.02
    min_size: float = 2.0
    supersample: int = 4
    tie_sizes: bool = True
    spa_params: str = "all"
    final_lr: float = 0.2
    optimizer: str = "gd"

    def __post_init__(self):
        if self.supervision not in ("t_hbox", "c_hbox"):
            raise InvalidArgumentError(f"supervision must be 't_hbox' or 'c_hbox', got {self.supervision!r}")
        if self.iters < 0:
            raise InvalidArgumentError("iters must be non-negative")
        if self.step_size <= 0:
            raise InvalidArgumentError("step_size must be positive")
        if self.spa_grid < 2 or self.spa_grid % 2:
            raise InvalidArgumentError("spa_grid must be even")
        if self.optimizer not in ("gd", "adam"):
            raise InvalidArgumentError("optimizer must be 'gd' or 'adam'")
        if self.spa_params not in ("all", "angle"):
            raise InvalidArgumentError("spa_params must be 'all' or 'angle'")


@dataclass
class ObjectParams:
    """Box parameters of a batch of objects in each view, ``(N, 5)`` arrays of (cx, cy, w, h, theta).

    ``rot`` lives in the frame of the rotated view for angle ``R``.
    ``moments`` holds the optimiser's running first and second gradient
    moments per view, ``steps`` the number of updates applied so far.
    """

    ori: np.ndarray
    rot: np.ndarray
    flp: np.ndarray
    R: float = 0.0
    moments: dict = field(default=None, repr=False)
    steps: int = 0

    def view(self, name):
        return getattr(self, name)

    def copy(self):
        moments = None if self.moments is None else {k: v.copy() for k, v in self.moments.items()}
        return ObjectParams(self.ori.copy(), self.rot.copy(), self.flp.copy(), self.R, moments, self.steps)


@dataclass
class LossBreakdown:
    l_reg: np.ndarray
    l_rot: np.ndarray
    l_flp: np.ndarray
    l_spa: np.ndarray
    total: np.ndarray
    spa_selected: np.ndarray

    def records(self, it):
        for i in range(len(self.total)):
            yield {
                "iter": it,
                "object_id": i,
                "l_reg": float(self.l_reg[i]),
                "l_rot": float(self.l_rot[i]),
                "l_flp": float(self.l_flp[i]),
                "l_spa": float(self.l_spa[i]),
                "total": float(self.total[i]),
            }


@dataclass
class TrainReport:
    boxes: list
    true_boxes: list
    ious: np.ndarray
    angle_errors: np.ndarray
    kinds: list
    scene_index: np.ndarray
    loss_curve: np.ndarray
    object_curves: np.ndarray = field(repr=False, default=None)
    params: ObjectParams = field(repr=False, default=None)

    @property
    def mean_iou(self):
        return float(np.mean(self.ious))

    @property
    def median_angle_error(self):
        return float(np.median(self.angle_errors))

    def summary(self):
        return {
            "objects": len(self.boxes),
            "mean_iou": self.mean_iou,
            "median_iou": float(np.median(self.ious)),
            "median_angle_error_deg": self.median_angle_error,
            "final_loss": float(self.loss_curve[-1]) if len(self.loss_curve) else float("nan"),
        }

    def to_records(self):
        for i, (b, t) in enumerate(zip(self.boxes, self.true_boxes)):
            yield {
                "object_id": i,
                "scene": int(self.scene_index[i]),
                "kind": self.kinds[i],
                "pred": asdict(b),
                "true": asdict(t),
                "iou": float(self.ious[i]),
                "angle_error_deg": float(self.angle_errors[i]),
            }


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    """Flattened per-object view of a list of scenes."""

    canvas: np.ndarray
    offsets: np.ndarray
    centers: np.ndarray
    scene_index: np.ndarray
    width: np.ndarray
    gt_ori: np.ndarray
    gt_flp: np.ndarray
    true: np.ndarray
    symmetric: np.ndarray
    kinds: list
    outlines: list
    n_scenes: int

    def __len__(self):
        return len(self.kinds)


def prepare(scenes, supervision="t_hbox", supersample=4):
    """Flatten scenes into the arrays the optimiser works on."""
    if not scenes:
        raise InvalidArgumentError("no scenes to train on")
    H = max(s.image.shape[0] for s in scenes)
    widths = [s.image.shape[1] for s in scenes]
    canvas = np.zeros((H, sum(widths) + CANVAS_PAD * (len(scenes) + 1)))
    offsets, centers, scene_idx, width = [], [], [], []
    gt_ori, gt_flp, true, sym, kinds, outlines = [], [], [], [], [], []
    x = CANVAS_PAD
    for si, scene in enumerate(scenes):
        h, w = scene.image.shape
        canvas[:h, x:x + w] = scene.image
        anns = derive_annotations(scene, supersample)
        for spec, ann in zip(scene.objects, anns):
            hb = ann.t_hbox if supervision == "t_hbox" else ann.c_hbox
            gt_ori.append(hb.as_array())
            # Mirroring the pixel grid about x = W/2 mirrors a tight box exactly.
            gt_flp.append([w - hb.cx, hb.cy, hb.w, hb.h])
            true.append(spec.rbox.as_array())
            sym.append(spec.symmetric)
            kinds.append(spec.kind)
            outlines.append(local_outline(spec.kind, spec.rbox.w, spec.rbox.h))
            offsets.append(x)
            centers.append((0.5 * w, 0.5 * h))
            scene_idx.append(si)
            width.append(w)
        x += w + CANVAS_PAD
    return TrainData(
        canvas, np.array(offsets, float), np.array(centers, float), np.array(scene_idx), np.array(width, float),
        np.array(gt_ori), np.array(gt_flp), np.array(true), np.array(sym, bool), kinds, outlines, len(scenes),
    )


def rotated_view_gt(data, R, supervision="t_hbox", supersample=4):
    """Ground-truth horizontal boxes of every object in the view rotated by ``R``.

    Objects are rotated about their scene's centre on an unbounded canvas, so
    nothing is lost to the image border.
    """
    out = np.empty((len(data), 4))
    c, s = math.cos(R), math.sin(R)
    for i, t in enumerate(data.true):
        px, py = data.centers[i]
        dx, dy = t[0] - px, t[1] - py
        cx, cy = px + dx * c - dy * s, py + dx * s + dy * c
        theta = t[4] + R
        if supervision == "c_hbox":
            w, h = mcr_wh(t[2], t[3], theta)
            out[i] = (cx, cy, w, h)
            continue
        loc = data.outlines[i]
        ct, st = math.cos(theta), math.sin(theta)
        poly = np.stack([cx + loc[:, 0] * ct - loc[:, 1] * st, cy + loc[:, 0] * st + loc[:, 1] * ct], axis=1)
        out[i] = polygon_tight_hbox(poly, supersample).as_array()
    return out


def _rotate_params(p, dR, centers):
    out = p.copy()
    c, s = math.cos(dR), math.sin(dR)
    dx = p[:, 0] - centers[:, 0]
    dy = p[:, 1] - centers[:, 1]
    out[:, 0] = centers[:, 0] + dx * c - dy * s
    out[:, 1] = centers[:, 1] + dx * s + dy * c
    out[:, 4] = p[:, 4] + dR
    return out


def consistent_views(data, ori, R):
    """Parameters whose rotated and flipped views are exact transforms of ``ori``.

    Every consistency loss vanishes on the result, whatever ``ori`` is.
    """
    ori = np.asarray(ori, dtype=float).reshape(-1, 5).copy()
    flp = ori.copy()
    flp[:, 0] = data.width - ori[:, 0]
    flp[:, 4] = -ori[:, 4]
    return ObjectParams(ori, _rotate_params(ori, R, data.centers), flp, R=R)


# ---------------------------------------------------------------------------
# Optimiser pieces
# ---------------------------------------------------------------------------

def _as_gt_array(gt):
    if isinstance(gt, HBox):
        return gt.as_array()[None]
    return np.asarray(gt, dtype=float).reshape(-1, 4)


def init_params(gt_ori, gt_rot=None, gt_flp=None, rng=None, jitter=0.02, R=0.0, tie_sizes=False):
    """Boxes initialised from each view's own GT: centre and size copied, theta = 0.

    Sizes get a seeded multiplicative jitter of up to ``jitter``. With
    ``tie_sizes`` the original view's jittered size is shared by all views.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    views = []
    base = None
    for gt in (gt_ori, gt_rot if gt_rot is not None else gt_ori, gt_flp if gt_flp is not None else gt_ori):
        g = _as_gt_array(gt)
        p = np.zeros((len(g), 5))
        p[:, :4] = g
        j = 1.0 + rng.uniform(-jitter, jitter, (len(g), 2))
        p[:, 2:4] *= j
        if tie_sizes:
            if base is None:
                base = p[:, 2:4].copy()
            p[:, 2:4] = base
        views.append(p)
    return ObjectParams(*views, R=R)


def sample_R(cfg, rng):
    if cfg.R_sampler == "uniform":
        return float(rng.uniform(*R_RANGE))
    return float(cfg.R_sampler)


def spa_selection(data, params, gt_ori, cfg):
    """Top-k symmetric objects per scene by localisation score (classification score fixed at 1)."""
    p = params.ori
    pw, ph = mcr_wh(p[:, 2], p[:, 3], p[:, 4])
    loc = hbox_iou_arrays(p[:, 0], p[:, 1], pw, ph, gt_ori[:, 0], gt_ori[:, 1], gt_ori[:, 2], gt_ori[:, 3])
    score = 1.0 + loc
    selected = np.zeros(len(data), dtype=bool)
    for si in range(data.n_scenes):
        idx = np.flatnonzero((data.scene_index == si) & data.symmetric)
        if idx.size == 0:
            continue
        k = _topk_count(cfg.spa_topk, idx.size)
        order = idx[np.argsort(-score[idx], kind="stable")]
        selected[order[:k]] = True
    return selected


def _topk_count(spec, n_sym):
    if spec is None:
        return default_topk(n_sym)
    if isinstance(spec, float) and 0.0 < spec <= 1.0:
        return max(1, math.ceil(spec * n_sym))
    return min(int(spec), n_sym)


def object_losses(data, params, gt_views, R, cfg, selected):
    """Per-object loss terms at the current parameters (values only)."""
    w = cfg.weights
    reg = np.zeros(len(data))
    for name in VIEWS:
        reg += regression_loss_params(params.view(name), gt_views[name], cfg.grid, w.alpha, enable_abbs=cfg.enable_abbs)
    reg /= len(VIEWS)
    lrot = rot_loss(params.ori[:, 4], params.rot[:, 4], R, cfg.snap_period)
    lflp = flp_loss(params.ori[:, 4], params.flp[:, 4], cfg.snap_period)
    lspa = np.zeros(len(data))
    if cfg.enable_spa and selected.any():
        p = params.ori[selected]
        lspa[selected] = spa_terms(data.canvas, p[:, 0] + data.offsets[selected], p[:, 1], p[:, 2], p[:, 3], p[:, 4], cfg.spa_grid)
    ang = w.beta * (w.lambda_r * lrot + w.lambda_f * lflp) + w.gamma * lspa
    total = w.lambda_ang * ang + w.lambda_reg * reg
    return LossBreakdown(reg, np.asarray(lrot, float), np.asarray(lflp, float), lspa, total, selected)


def object_gradients(data, params, gt_views, R, cfg, selected):
    """Per-object gradients of the total objective for each view's parameter block."""
    w = cfg.weights
    n = len(data)
    grads = {name: np.zeros((n, 5)) for name in VIEWS}
    try:
        for name in VIEWS:
            _, g = ad.batched_grad(
                lambda p, name=name: regression_loss_params(
                    p, gt_views[name], cfg.grid, w.alpha, theta_grad=cfg.reg_theta_grad, enable_abbs=cfg.enable_abbs
                ),
                params.view(name),
            )
            grads[name] += w.lambda_reg * g / len(VIEWS)

        thetas = np.stack([params.ori[:, 4], params.rot[:, 4], params.flp[:, 4]], axis=1)

        def consistency(t):
            return w.lambda_ang * w.beta * (
                w.lambda_r * rot_loss(t[:, 0], t[:, 1], R, cfg.snap_period)
                + w.lambda_f * flp_loss(t[:, 0], t[:, 2], cfg.snap_period)
            )

        _, gt = ad.batched_grad(consistency, thetas)
        for k, name in enumerate(VIEWS):
            grads[name][:, 4] += gt[:, k]

        if cfg.enable_spa and selected.any():
            sel = np.flatnonzero(selected)
            offs = data.offsets[sel]

            def symmetry(p):
                return w.lambda_ang * w.gamma * spa_terms(
                    data.canvas, p[:, 0] + offs, p[:, 1], p[:, 2], p[:, 3], p[:, 4], cfg.spa_grid
                )

            cols = range(5) if cfg.spa_params == "all" else [4]
            _, gs = ad.batched_grad(symmetry, params.ori[sel], columns=cols)
            grads["ori"][sel] += gs
    except NumericFailureError as exc:
        raise NumericFailureError(f"gradient failed ({exc}); R={R:.6f}") from exc
    return grads


def _learning_rate(cfg, it):
    if cfg.iters <= 1:
        return cfg.step_size
    frac = it / (cfg.iters - 1)
    lo = cfg.final_lr
    return cfg.step_size * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * frac)))


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-12


def apply_update(data, params, grads, cfg, lr):
    """One optimiser step; sizes are projected to ``min_size`` afterwards.

    Position and size follow plain gradient descent with the gradient
    multiplied by the object's GT scale (sqrt of GT area), so their step
    scales read as pixels. Angles share one gain across the three views
    (``optimizer="gd"``) or take bias-corrected Adam steps of
    ``angle_scale`` radians (``optimizer="adam"``).
    """
    out = params.copy()
    if cfg.tie_sizes:
        swaps = view_swaps(params)
        shared = grads["ori"][:, 2:4].copy()
        for name in ("rot", "flp"):
            shared += _swap_wh(grads[name][:, 2:4], swaps[name])
        grads["ori"][:, 2:4] = shared
    scale = np.sqrt(data.gt_ori[:, 2] * data.gt_ori[:, 3])[:, None]
    if out.moments is None:
        out.moments = {f"{k}_{name}": np.zeros(len(data)) for name in VIEWS for k in "mv"}
    out.steps += 1
    b1, b2 = ADAM_BETAS
    for name in VIEWS:
        g = grads[name]
        p = out.view(name)
        p[:, 0:2] -= lr * cfg.pos_scale * scale * g[:, 0:2]
        p[:, 2:4] -= lr * cfg.size_scale * scale * g[:, 2:4]
        if cfg.optimizer == "gd":
            p[:, 4] -= lr * _angle_gain(cfg) * g[:, 4]
        else:
            m = out.moments[f"m_{name}"]
            v = out.moments[f"v_{name}"]
            m *= b1
            m += (1 - b1) * g[:, 4]
            v *= b2
            v += (1 - b2) * g[:, 4] ** 2
            mhat = m / (1 - b1 ** out.steps)
            vhat = v / (1 - b2 ** out.steps)
            p[:, 4] -= lr * cfg.angle_scale * mhat / (np.sqrt(vhat) + ADAM_EPS)
        np.maximum(p[:, 2:4], cfg.min_size, out=p[:, 2:4])
    if cfg.tie_sizes:
        tie_sizes(out)
    return out


def _angle_gain(cfg):
    """Step per unit angle gradient, measured in units of the symmetry term's weight."""
    w = cfg.weights
    return cfg.angle_scale / max(w.lambda_ang * w.gamma, 1e-12)


def _swap_wh(wh, swap):
    return np.where(swap[:, None], wh[:, ::-1], wh)


def view_swaps(params):
    """Per view, whether its box is the original one with w and h exchanged.

    Consistency is only enforced modulo pi/2, and ``(w, h, theta)`` describes
    the same rectangle as ``(h, w, theta + pi/2)``; an odd quarter-turn offset
    between views therefore means the side lengths are swapped.
    """
    q = 0.5 * math.pi
    k_rot = np.round((params.rot[:, 4] - params.ori[:, 4] - params.R) / q).astype(int)
    k_flp = np.round((params.flp[:, 4] + params.ori[:, 4]) / q).astype(int)
    return {"ori": np.zeros(len(params.ori), bool), "rot": k_rot % 2 == 1, "flp": k_flp % 2 == 1}


def tie_sizes(params):
    """Copy the original view's side lengths into the other views (swap-aware), in place."""
    swaps = view_swaps(params)
    for name in ("rot", "flp"):
        params.view(name)[:, 2:4] = _swap_wh(params.ori[:, 2:4], swaps[name])
    return params


def step(params, data, cfg, R, it=0, gt_rot=None):
    """One optimisation step at rotation ``R``; returns ``(params', LossBreakdown)``.

    The rotated-view boxes are carried from the previous rotation into the new
    frame before the gradient is taken, as a detector's prediction would follow
    its input.
    """
    params = params.copy()
    if R != params.R:
        params.rot = _rotate_params(params.rot, R - params.R, data.centers)
        params.R = R
    if gt_rot is None:
        gt_rot = rotated_view_gt(data, R, cfg.supervision, cfg.supersample)
    gt_views = {"ori": data.gt_ori, "rot": gt_rot, "flp": data.gt_flp}
    selected = spa_selection(data, params, data.gt_ori, cfg) if cfg.enable_spa else np.zeros(len(data), bool)
    breakdown = object_losses(data, params, gt_views, R, cfg, selected)
    grads = object_gradients(data, params, gt_views, R, cfg, selected)
    new = apply_update(data, params, grads, cfg, _learning_rate(cfg, it))
    return new, breakdown


def initial_state(data, cfg, rng):
    R0 = sample_R(cfg, rng)
    gt_rot = rotated_view_gt(data, R0, cfg.supervision, cfg.supersample)
    params = init_params(data.gt_ori, gt_rot, data.gt_flp, rng, cfg.jitter, R=R0)
    return tie_sizes(params) if cfg.tie_sizes else params


def evaluate(data, params):
    pred = params.ori
    ious = np.array([rotated_iou_matrix(pred[i:i + 1], data.true[i:i + 1])[0, 0] for i in range(len(data))])
    d = pred[:, 4] - data.true[:, 4]
    d = d - (math.pi / 2) * np.round(d / (math.pi / 2))
    return ious, np.degrees(np.abs(d))


def _boxes(arr):
    return [RBox(p[0], p[1], p[2], p[3], canonical_angle(p[4])) for p in arr]


def run(cfg, dataset, params=None, on_step=None):
    """Optimise every object for ``cfg.iters`` steps and report against the held-out boxes.

    ``dataset`` is a list of scenes or a prepared :class:`TrainData`. Passing
    ``params`` resumes from an earlier state; ``on_step(it, breakdown)`` is
    called after every step.
    """
    data = dataset if isinstance(dataset, TrainData) else prepare(dataset, cfg.supervision, cfg.supersample)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = initial_state(data, cfg, rng)
    curve = np.zeros(cfg.iters)
    obj_curves = np.zeros((cfg.iters, len(data)))
    for it in range(cfg.iters):
        R = sample_R(cfg, rng)
        params, breakdown = step(params, data, cfg, R, it)
        curve[it] = float(np.mean(breakdown.total))
        obj_curves[it] = breakdown.total
        if on_step is not None:
            on_step(it, breakdown)
    ious, errs = evaluate(data, params)
    return TrainReport(
        _boxes(params.ori), _boxes(data.true), ious, errs, list(data.kinds), data.scene_index, curve, obj_curves, params
    )


def detections(report, data):
    """Final original-view boxes as detection records, scored by localisation quality.

    The score is the IoU between each box's circumscribing horizontal box and
    its GT horizontal box, the same signal that ranks proposals for the
    symmetry loss.
    """
    from .evalio import DetectionRecord

    p = report.params.ori
    pw, ph = mcr_wh(p[:, 2], p[:, 3], p[:, 4])
    g = data.gt_ori
    loc = hbox_iou_arrays(p[:, 0], p[:, 1], pw, ph, g[:, 0], g[:, 1], g[:, 2], g[:, 3])
    return [DetectionRecord(k, b, float(np.clip(s, 0.0, 1.0))) for k, b, s in zip(data.kinds, report.boxes, loc)]


def write_step_log(fh, it, breakdown):
    for rec in breakdown.records(it):
        fh.write(json.dumps(rec) + "\n")


def config_with(cfg, **changes):
    return replace(cfg, **changes)
