"""Angle-consistency losses, auxiliary detector losses and the total objective.

Every loss accepts floats, numpy arrays or duals. The snap loss compares an
angle against the nearest member of ``target + k * period`` so the
consistency losses vanish on the whole manifold of mutually consistent
predictions, correct or not; only the symmetry term distinguishes them.
"""
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError

SNAP_PERIOD = 0.5 * math.pi


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_f: float = 0.05
    beta: float = 0.6
    gamma: float = 0.05
    lambda_ang: float = 1.0
    lambda_reg: float = 1.0
    lambda_cn: float = 1.0
    lambda_cls: float = 1.0
    alpha: float = 0.01

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown loss weight keys: {sorted(unknown)}")
        return replace(cls(), **{k: float(v) for k, v in d.items()})

    def to_dict(self):
        return asdict(self)


def smooth_l1(x, delta=1.0):
    if delta <= 0:
        raise InvalidArgumentError("smooth_l1 needs delta > 0")
    ax = ad.abs(x)
    return ad.where(ad.value(ax) < delta, 0.5 * x * x / delta, ax - 0.5 * delta)


def wrap_angle(x, period=SNAP_PERIOD):
    """Representative of ``x`` modulo ``period`` in (-period/2, period/2]."""
    return x - period * ad.ceil((ad.value(x) - 0.5 * period) / period)


def snap_loss(x, target, period=SNAP_PERIOD, delta=1.0):
    return smooth_l1(wrap_angle(x - target, period), delta)


def rot_loss(theta, theta_rot, R, period=SNAP_PERIOD, delta=1.0):
    return snap_loss(theta_rot - theta, R, period, delta)


def flp_loss(theta, theta_flp, period=SNAP_PERIOD, delta=1.0):
    return snap_loss(theta_flp + theta, 0.0, period, delta)


def angle_loss(l_rot, l_flp, l_spa, weights=LossWeights()):
    return weights.beta * (weights.lambda_r * l_rot + weights.lambda_f * l_flp) + weights.gamma * l_spa


def focal_loss(p, target, gamma_f=2.0, alpha_f=0.25):
    pv = np.asarray(ad.value(p))
    if not np.all((pv > 0.0) & (pv < 1.0)):
        raise InvalidArgumentError("focal_loss needs p in (0, 1)")
    if target not in (0, 1):
        raise InvalidArgumentError("focal_loss target must be 0 or 1")
    p_t = p if target == 1 else 1.0 - p
    alpha_t = alpha_f if target == 1 else 1.0 - alpha_f
    return -alpha_t * (1.0 - p_t) ** gamma_f * ad.log(p_t)


def centerness_loss(pred, target):
    pv = np.asarray(ad.value(pred))
    if not np.all((pv > 0.0) & (pv < 1.0)):
        raise InvalidArgumentError("centerness prediction must lie in (0, 1)")
    if not 0.0 <= target <= 1.0:
        raise InvalidArgumentError("centerness target must lie in [0, 1]")
    return -(target * ad.log(pred) + (1.0 - target) * ad.log(1.0 - pred))


def total_loss(l_ang, l_reg, l_cn, l_cls, weights=LossWeights()):
    return weights.lambda_ang * l_ang + weights.lambda_reg * l_reg + weights.lambda_cn * l_cn + weights.lambda_cls * l_cls
