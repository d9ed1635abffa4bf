"""Region-balanced supervised losses on the predicted alpha matte.

Three parts, each weighted per pixel by the regional scaling mask S
(1/region-size) so small transition regions are not drowned out:

* weighted L1 on alpha (transition pixels count double),
* weighted binary cross-entropy with soft targets (transition pixels
  count half, since CE there mostly pushes toward 0/1),
* a gradient-magnitude L1 term that fights over-blurring; it carries no
  S weighting but is divided by the pixel count so its scale does not
  depend on resolution.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, clamp, log, sqrt, pad2d
from .synth import TR_LABEL

__all__ = ["gradient_magnitude", "alpha_loss", "CE_EPS"]

CE_EPS = 1e-6


def gradient_magnitude(x: Tensor) -> Tensor:
    """Central-difference gradient magnitude with replicate boundary.

    sqrt(dx^2 + dy^2 + 1e-12); the epsilon keeps the square root
    differentiable where the gradient vanishes.
    """
    h, w = x.data.shape[-2:]
    xp = pad2d(x, 1, mode="replicate")
    dx = (xp[:, :, 1:h + 1, 2:w + 2] - xp[:, :, 1:h + 1, 0:w]) * 0.5
    dy = (xp[:, :, 2:h + 2, 1:w + 1] - xp[:, :, 0:h, 1:w + 1]) * 0.5
    return sqrt(dx * dx + dy * dy + 1e-12)


def _as_const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def alpha_loss(pred: Tensor, gt, trimap, scaling, ce_eps=CE_EPS,
               grad_per_pixel=True) -> Tensor:
    """Weighted L1 + weighted CE + gradient term, averaged over the batch.

    ``trimap`` and ``scaling`` are constants; only ``pred`` carries
    gradients.  ``grad_per_pixel=False`` gives the raw unnormalized
    gradient sum.
    """
    gt = _as_const(gt)
    trimap = _as_const(trimap)
    scaling = _as_const(scaling)
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.data.shape} shapes differ")
    if trimap.data.shape[-2:] != pred.data.shape[-2:]:
        raise ValueError(f"trimap {trimap.data.shape} does not match pred "
                         f"{pred.shape}")
    if pred.data.min() < -1e-9 or pred.data.max() > 1.0 + 1e-9:
        raise ValueError("pred values outside [0, 1]")
    if gt.data.min() < -1e-9 or gt.data.max() > 1.0 + 1e-9:
        raise ValueError("gt values outside [0, 1]")

    tr = trimap.data == TR_LABEL
    w_l1 = Tensor(np.where(tr, 2.0, 1.0))
    w_ce = Tensor(np.where(tr, 0.5, 1.0))
    s = scaling.detach()
    gt = gt.detach()

    l1 = (w_l1 * s * abs(pred - gt)).sum()

    p = clamp(pred, ce_eps, 1.0 - ce_eps)
    ce_map = -(gt * log(p) + (1.0 - gt) * log(1.0 - p))
    ce = (w_ce * s * ce_map).sum()

    gdiff = abs(gradient_magnitude(pred) - gradient_magnitude(gt)).sum()
    if grad_per_pixel:
        h, w = pred.data.shape[-2:]
        gdiff = gdiff * (1.0 / (h * w))

    n = pred.data.shape[0]
    return (l1 + ce + gdiff) * (1.0 / n)
