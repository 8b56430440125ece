"""Correlation cost volumes, one per pyramid scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Function, ShapeError, Tensor, apply
from .features import FeatureMap, FeaturePyramid


class Correlate(Function):
    """``C[b, d, h, w] = mean_c L[b, c, h, w] * R[b, c, h, w - d]``, zero where ``w < d``."""

    name = "correlate"

    def __init__(self, max_disp: int):
        self.max_disp = int(max_disp)

    def check(self, left, right):
        if left.shape != right.shape or left.ndim != 4:
            raise ShapeError(f"correlate: left {left.shape} and right {right.shape} must match (B, N, H, W)")
        if self.max_disp < 1:
            raise ShapeError(f"correlate: max disparity must be >= 1, got {self.max_disp}")
        if self.max_disp > left.shape[3]:
            raise ShapeError(f"correlate: max disparity {self.max_disp} exceeds width {left.shape[3]}")

    def forward(self, left, right):
        bsz, n, h, w = left.shape
        out = np.zeros((bsz, self.max_disp, h, w))
        for d in range(self.max_disp):
            out[:, d, :, d:] = np.einsum("bchw,bchw->bhw", left[..., d:], right[..., : w - d]) / n
        return out, (left, right)

    def backward(self, saved, g):
        left, right = saved
        n, w = left.shape[1], left.shape[3]
        gl = np.zeros_like(left)
        gr = np.zeros_like(right)
        for d in range(self.max_disp):
            gd = g[:, d, None, :, d:] / n
            gl[..., d:] += gd * right[..., : w - d]
            gr[..., : w - d] += gd * left[..., d:]
        return gl, gr


def validity_mask(max_disp: int, height: int, width: int) -> np.ndarray:
    """Boolean ``D x H x W`` mask, True where ``w - d >= 0``."""
    d = np.arange(max_disp)[:, None, None]
    w = np.arange(width)[None, None, :]
    return np.broadcast_to(w >= d, (max_disp, height, width)).copy()


@dataclass
class CostVolume:
    scale: int
    values: Tensor  # B x D x H x W

    @property
    def max_disp(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def valid(self) -> np.ndarray:
        return validity_mask(self.max_disp, self.height, self.width)


def correlate(left, right, max_disp: int, scale: int = 1) -> CostVolume:
    lv = left.values if isinstance(left, FeatureMap) else left
    rv = right.values if isinstance(right, FeatureMap) else right
    if isinstance(left, FeatureMap):
        scale = left.scale
    return CostVolume(scale, apply(Correlate(max_disp), lv, rv))


def scale_disparities(max_disp: int, base_factor: int, scales: int) -> list[int]:
    """``D_s = D_max / (b * 2**(s-1))``; every level must divide exactly."""
    out = []
    for s in range(1, scales + 1):
        factor = base_factor * 2 ** (s - 1)
        if max_disp % factor:
            raise ValueError(
                f"max disparity {max_disp} not divisible by {factor} at scale {s} "
                f"(b={base_factor}, S={scales})"
            )
        out.append(max_disp // factor)
    return out


def build_pyramid(left: FeaturePyramid, right: FeaturePyramid, max_disp: int) -> list[CostVolume]:
    if len(left) != len(right):
        raise ShapeError(f"build_pyramid: {len(left)} left scales vs {len(right)} right scales")
    disps = scale_disparities(max_disp, left.base_factor, len(left))
    return [correlate(lm, rm, d) for lm, rm, d in zip(left.maps, right.maps, disps)]
