"""Soft-argmin regression, masked smooth-L1 supervision and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Function, ShapeError, Tensor, add, apply, as_tensor, reshape, scale
from .cost_volume import CostVolume

FIVE_TERM_LOSS_WEIGHTS = (1.0, 1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0)


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ShapeError(f"DisparityMap: mask {self.valid.shape} != values {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    def mask(self) -> np.ndarray:
        return np.ones(self.values.shape, dtype=bool) if self.valid is None else self.valid


class SoftArgmin(Function):
    """Expected disparity under a softmax over axis 1 of a ``(B, D, H, W)`` volume."""

    name = "soft_argmin"

    def check(self, x):
        if x.ndim != 4 or x.shape[1] < 1:
            raise ShapeError(f"soft_argmin: expected (B, D, H, W) volume, got {x.shape}")

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        denom = e.sum(axis=1, keepdims=True)
        disp = np.arange(x.shape[1], dtype=np.float64).reshape(1, -1, 1, 1)
        # one division at the end: uniform costs give exactly (D - 1) / 2
        out = (e * disp).sum(axis=1) / denom[:, 0]
        return out, (e / denom, out)

    def backward(self, saved, g):
        prob, out = saved
        disp = np.arange(prob.shape[1], dtype=np.float64).reshape(1, -1, 1, 1)
        return (prob * (disp - out[:, None]) * g[:, None],)


def soft_argmin(volume) -> Tensor:
    """Sub-pixel disparity ``(B, H, W)``; a ``(D, H, W)`` input gives ``(H, W)``."""
    x = volume.values if isinstance(volume, CostVolume) else as_tensor(volume)
    if x.ndim == 3:
        out = apply(SoftArgmin(), reshape(x, (1, *x.shape)))
        return reshape(out, out.shape[1:])
    return apply(SoftArgmin(), x)


class SmoothL1(Function):
    name = "smooth_l1"

    def forward(self, x):
        a = np.abs(x)
        return np.where(a < 1.0, 0.5 * x * x, a - 0.5), x

    def backward(self, x, g):
        return (g * np.clip(x, -1.0, 1.0),)


def smooth_l1(x) -> Tensor:
    return apply(SmoothL1(), x)


def _smooth_l1(x):
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


class MaskedLoss(Function):
    """Mean over pixels of ``V*L(pred - gt) + (1 - V)*L(pred - pseudo)``.

    Without a pseudo map the second term is dropped and the mean runs over
    valid pixels only.
    """

    name = "masked_loss"

    def __init__(self, mask: np.ndarray, use_pseudo: bool = True):
        self.mask = np.asarray(mask, dtype=bool)
        self.use_pseudo = use_pseudo
        if not use_pseudo and not self.mask.any():
            raise ValueError("masked_loss: no valid pixels and no pseudo labels; loss undefined")

    def check(self, pred, gt, pseudo):
        if not (pred.shape == gt.shape == pseudo.shape == self.mask.shape):
            raise ShapeError(f"masked_loss: shapes pred {pred.shape}, gt {gt.shape}, "
                             f"pseudo {pseudo.shape}, mask {self.mask.shape} disagree")

    def forward(self, pred, gt, pseudo):
        v = self.mask.astype(np.float64)
        if self.use_pseudo:
            total = np.sum(v * _smooth_l1(pred - gt) + (1.0 - v) * _smooth_l1(pred - pseudo))
            return total / pred.size, (pred, gt, pseudo)
        return np.sum(v * _smooth_l1(pred - gt)) / v.sum(), (pred, gt, pseudo)

    def backward(self, saved, g):
        pred, gt, pseudo = saved
        v = self.mask.astype(np.float64)
        g = float(g)
        if self.use_pseudo:
            a = v * np.clip(pred - gt, -1.0, 1.0) * g / pred.size
            b = (1.0 - v) * np.clip(pred - pseudo, -1.0, 1.0) * g / pred.size
            return a + b, -a, -b
        a = v * np.clip(pred - gt, -1.0, 1.0) * g / v.sum()
        return a, -a, np.zeros_like(pseudo)


def masked_loss(pred, gt, pseudo=None, mask=None) -> Tensor:
    """Smooth-L1 loss against ``gt`` where valid, ``pseudo`` elsewhere.

    ``gt`` and ``pseudo`` may be DisparityMaps or arrays/Tensors; the
    validity mask comes from ``mask`` or else from ``gt.valid``.
    """
    if mask is None:
        mask = gt.mask() if isinstance(gt, DisparityMap) else np.ones(as_tensor(pred).shape, dtype=bool)
    gt_t = Tensor(gt.values) if isinstance(gt, DisparityMap) else as_tensor(gt)
    use_pseudo = pseudo is not None
    if pseudo is None:
        pseudo_t = Tensor(np.zeros(gt_t.shape))
    else:
        pseudo_t = Tensor(pseudo.values) if isinstance(pseudo, DisparityMap) else as_tensor(pseudo)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), gt_t.shape)
    return apply(MaskedLoss(mask, use_pseudo), pred, gt_t, pseudo_t)


def total_loss(losses: Sequence, weights: Sequence[float]) -> Tensor:
    """``sum_i weights[i] * losses[i]``."""
    if len(losses) != len(weights):
        raise ValueError(f"total_loss: {len(losses)} losses but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError(f"total_loss: weights must be >= 0, got {list(weights)}")
    out = Tensor(0.0)
    for loss, w in zip(losses, weights):
        out = add(out, scale(as_tensor(loss), w))
    return out


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    epe: float
    bad1: float
    d1: float
    count: int

    def to_text(self) -> str:
        return (f"epe = {self.epe:.6f}\n"
                f"bad1 = {self.bad1:.4f}\n"
                f"d1 = {self.d1:.4f}\n"
                f"count = {self.count}\n")

    def to_line(self) -> str:
        return f"METRICS epe={self.epe!r} bad1={self.bad1!r} d1={self.d1!r} count={self.count}"

    @classmethod
    def from_line(cls, line: str) -> "MetricsReport":
        fields = dict(tok.split("=", 1) for tok in line.split()[1:])
        return cls(float(fields["epe"]), float(fields["bad1"]), float(fields["d1"]), int(fields["count"]))


def evaluate(pred, gt, mask=None) -> MetricsReport:
    """EPE, percentage of pixels off by more than 1 px, and D1 (>3 px and >5% of gt)."""
    p = pred.values if isinstance(pred, DisparityMap) else np.asarray(as_tensor(pred).data)
    g = gt.values if isinstance(gt, DisparityMap) else np.asarray(as_tensor(gt).data)
    if p.shape != g.shape:
        raise ShapeError(f"evaluate: prediction {p.shape} vs ground truth {g.shape}")
    valid = gt.mask() if isinstance(gt, DisparityMap) else np.ones(g.shape, dtype=bool)
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("evaluate: no valid pixels")
    err = np.abs(p - g)[valid]
    gv = g[valid]
    return MetricsReport(
        epe=float(err.mean()),
        bad1=100.0 * float(np.count_nonzero(err > 1.0)) / n,
        d1=100.0 * float(np.count_nonzero((err > 3.0) & (err > 0.05 * gv))) / n,
        count=n,
    )
