"""Training objective: local NCC similarity + displacement smoothness.

The NCC term is computed over fully-interior (valid) cubic windows with
window-mean-centered operands and a squared correlation,

    cc = (sum f*w)^2 / (sum f^2 * sum w^2 + eps),

so it is insensitive to per-window affine intensity maps — the reason it
serves as the cross-modality surrogate.  ``eps`` is a variance floor: a
constant window contributes zero correlation, and identical non-constant
volumes reach loss 0 only up to the floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, conv3d, tmean
from .warp import DeformationField, Volume, warp_trilinear


@dataclass
class LossConfig:
    ncc_window: int = 5      # 9 at full scale
    ncc_eps: float = 1e-5
    smooth_weight: float = 1.0

    def validate(self) -> list[str]:
        problems = []
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            problems.append(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        if self.ncc_eps <= 0:
            problems.append(f"ncc_eps must be positive, got {self.ncc_eps}")
        if self.smooth_weight < 0:
            problems.append(f"smooth_weight must be >= 0, got {self.smooth_weight}")
        return problems


@dataclass
class CompositeLoss:
    total: Tensor
    similarity: Tensor
    smoothness: Tensor
    warped: Volume


def ncc_loss(fixed: Volume, warped: Volume, cfg: LossConfig | None = None) -> Tensor:
    """1 - mean local squared NCC over valid windows. Range [0, 1]."""
    cfg = cfg or LossConfig()
    f = fixed.values
    w = warped.values
    if f.shape != w.shape:
        raise ShapeError(f"ncc_loss: volume shapes differ, {f.shape} vs {w.shape}")
    if f.shape[0] != 1:
        raise ShapeError(f"ncc_loss expects single-channel volumes, got {f.shape}")
    k = cfg.ncc_window
    if any(e < k for e in f.shape[1:]):
        raise ShapeError(
            f"ncc_loss: extents {f.shape[1:]} smaller than window {k}"
        )
    dtype = f.dtype
    if w.dtype != dtype:
        raise ShapeError(f"ncc_loss: dtype mismatch {dtype.name} vs {w.dtype.name}")
    kern = Tensor(np.ones((1, 1, k, k, k), dtype=dtype))
    n = float(k ** 3)

    sf = conv3d(f, kern)
    sw = conv3d(w, kern)
    sff = conv3d(f * f, kern)
    sww = conv3d(w * w, kern)
    sfw = conv3d(f * w, kern)

    cross = sfw - sf * sw * (1.0 / n)
    var_f = sff - sf * sf * (1.0 / n)
    var_w = sww - sw * sw * (1.0 / n)
    cc = (cross * cross) / (var_f * var_w + cfg.ncc_eps)
    return 1.0 - tmean(cc)


def smoothness_loss(field: DeformationField) -> Tensor:
    """Mean squared forward differences of the displacement.

    For each axis the one-sided border plane is excluded; per-axis means are
    taken over (component, interior position) and summed over axes, i.e. the
    voxel-mean squared gradient magnitude averaged over the 3 components.
    """
    u = field.u
    total = None
    for axis in (1, 2, 3):
        lead = [slice(None)] * 4
        lag = [slice(None)] * 4
        lead[axis] = slice(1, None)
        lag[axis] = slice(None, -1)
        d = u[tuple(lead)] - u[tuple(lag)]
        term = tmean(d * d)
        total = term if total is None else total + term
    return total


def composite_loss(
    fixed: Volume,
    moving: Volume,
    field: DeformationField,
    cfg: LossConfig | None = None,
) -> CompositeLoss:
    """ncc_loss(fixed, warp(moving, field)) + smooth_weight * smoothness(field)."""
    cfg = cfg or LossConfig()
    warped = warp_trilinear(moving, field)
    sim = ncc_loss(fixed, warped, cfg)
    smooth = smoothness_loss(field)
    total = sim + smooth * cfg.smooth_weight
    return CompositeLoss(total=total, similarity=sim, smoothness=smooth, warped=warped)
