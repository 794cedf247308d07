"""Symmetry-prior angle loss.

Each selected proposal is resampled onto a ``G x G`` grid aligned with the
box, cut along its local u-axis (the line through the centre along ``w``),
and one half is mirrored onto the other. ``1 - SSIM`` between the halves is
small only when the box axis coincides with the object's mirror axis.
"""
import math

import numpy as np

from . import _kernels
from . import autodiff as ad
from .errors import InvalidArgumentError
from .geom import hbox_iou, mcr

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEFAULT_GRID = 50


def _grid_offsets(G):
    t = np.arange(G) / (G - 1) - 0.5
    return t[None, :], t[:, None]  # (1, G) along columns -> u, (G, 1) along rows -> v


def _sample_points(cx, cy, w, h, theta, G):
    """Image coordinates of the G x G patch grid; leading axes follow the box arrays."""
    tu, tv = _grid_offsets(G)
    expand = lambda x: x.reshape(-1, 1, 1) if isinstance(x, ad.Dual) else np.reshape(x, (-1, 1, 1))  # noqa: E731
    cx, cy, w, h, theta = (expand(v) for v in (cx, cy, w, h, theta))
    u = w * tu
    v = h * tv
    c, s = ad.cos(theta), ad.sin(theta)
    x = cx + u * c - v * s
    y = cy + u * s + v * c
    return x, y


def sample_patches(image, cx, cy, w, h, theta, G=DEFAULT_GRID):
    """Bilinear patches for a batch of boxes, shape ``(N, G, G)``; duals in, duals out."""
    x, y = _sample_points(cx, cy, w, h, theta, G)
    xv = np.broadcast_to(ad.value(x), np.broadcast_shapes(np.shape(ad.value(x)), np.shape(ad.value(y))))
    yv = np.broadcast_to(ad.value(y), xv.shape)
    vals, gx, gy = _kernels.bilinear_sample(image, xv, yv)
    inside = (vals >= 0.0) & (vals <= 1.0)
    vals = np.clip(vals, 0.0, 1.0)
    if isinstance(x, ad.Dual) or isinstance(y, ad.Dual):
        dx = np.broadcast_to(ad.tangent(x) if isinstance(x, ad.Dual) else 0.0, xv.shape)
        dy = np.broadcast_to(ad.tangent(y) if isinstance(y, ad.Dual) else 0.0, xv.shape)
        return ad.Dual(vals, np.where(inside, gx * dx + gy * dy, 0.0))
    return vals


def _validate_image(image):
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise InvalidArgumentError("image must be a non-empty 2-D intensity grid")
    return image


def sample_rbox_patch(image, rb, G=DEFAULT_GRID):
    """Resample the interior of ``rb`` onto a ``G x G`` grid (rows follow v, columns follow u)."""
    image = _validate_image(image)
    if G < 2:
        raise InvalidArgumentError("patch resolution must be at least 2")
    if rb.w <= 0 or rb.h <= 0:
        raise InvalidArgumentError("cannot sample a degenerate box")
    return sample_patches(image, rb.cx, rb.cy, rb.w, rb.h, rb.theta, G)[0]


def split_and_flip(patch):
    """Split rows at v = 0 and mirror the lower half; returns ``(p1, p2_flipped)``."""
    G = (patch.val if isinstance(patch, ad.Dual) else np.asarray(patch)).shape[-2]
    if G % 2:
        raise InvalidArgumentError(f"patch resolution must be even to split, got {G}")
    half = G // 2
    p1 = patch[..., :half, :]
    p2 = patch[..., half:, :][..., ::-1, :]
    return p1, p2


def ssim_batch(a, b):
    """Global-statistics SSIM over the last two axes; duals pass through."""
    mu_a = ad.mean(ad.mean(a, axis=-1), axis=-1)
    mu_b = ad.mean(ad.mean(b, axis=-1), axis=-1)
    n = np.shape(ad.value(a))[-1] * np.shape(ad.value(a))[-2]
    ex = lambda t: t.reshape(*np.shape(ad.value(t)), 1, 1) if isinstance(t, ad.Dual) else np.reshape(t, np.shape(t) + (1, 1))  # noqa: E731
    da = a - ex(mu_a)
    db = b - ex(mu_b)
    var_a = ad.sum(ad.sum(da * da, axis=-1), axis=-1) / n
    var_b = ad.sum(ad.sum(db * db, axis=-1), axis=-1) / n
    cov = ad.sum(ad.sum(da * db, axis=-1), axis=-1) / n
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    return float(ssim_batch(a, b))


def topk_select(proposals, k):
    """The ``k`` symmetric proposals with the largest ``sc_cls + sc_loc`` (stable on ties)."""
    if k < 0:
        raise InvalidArgumentError("k must be non-negative")
    pool = [p for p in proposals if p.symmetric]
    order = sorted(range(len(pool)), key=lambda i: -(pool[i].sc_cls + pool[i].sc_loc))
    return [pool[i] for i in order[:k]]


def default_topk(n_symmetric):
    return max(1, math.ceil(n_symmetric / 4)) if n_symmetric else 0


def spa_terms(image, cx, cy, w, h, theta, G=DEFAULT_GRID):
    """Per-box ``1 - SSIM`` between mirrored halves; differentiable in all five box parameters."""
    patches = sample_patches(image, cx, cy, w, h, theta, G)
    p1, p2 = split_and_flip(patches)
    return 1.0 - ssim_batch(p1, p2)


def spa_loss(image, proposals, k=None, G=DEFAULT_GRID):
    """Mean ``1 - SSIM`` over the Top-k symmetric proposals; 0 if none qualifies."""
    image = _validate_image(image)
    if G < 2 or G % 2:
        raise InvalidArgumentError(f"patch resolution must be even and >= 2, got {G}")
    if k is None:
        k = default_topk(sum(1 for p in proposals if p.symmetric))
    chosen = topk_select(proposals, k)
    if not chosen:
        return 0.0
    arr = np.array([p.box.as_array() for p in chosen])
    terms = spa_terms(image, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], G)
    return float(np.mean(terms))


def localization_score(rb, gt):
    return hbox_iou(mcr(rb), gt)
