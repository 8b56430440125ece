"""Intra-scale cost aggregation.

``window_aggregate`` is the fixed-window baseline. ``adaptive_aggregate``
samples K*K sparse points per pixel at learned fractional offsets and weights
each sample by a learned modulation in [0, 1]; offsets and modulation are
shared within each of G contiguous disparity groups. ``isa_block`` wraps it in
a 1x1 / adaptive / 1x1 bottleneck with a residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Function, ShapeError, Tensor, add, apply, as_tensor, sigmoid
from .cost_volume import CostVolume
from .features import ConvLayerParams, conv2d


def grid_offsets(kernel: int, dilation: int) -> list[tuple[int, int]]:
    """Base sampling offsets ``r * (i, j)`` in row-major order."""
    half = (kernel - 1) // 2
    return [(dilation * i, dilation * j) for i in range(-half, half + 1) for j in range(-half, half + 1)]


# ---------------------------------------------------------------------------
# fixed-window baseline

@dataclass
class WindowAggregationParams:
    kernel: int = 3
    scheme: str = "uniform"
    sigma: float = 1.0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"window extent must be odd, got {self.kernel}")
        if self.scheme not in ("uniform", "gaussian"):
            raise ValueError(f"unknown weighting scheme {self.scheme!r}")

    def raw_weights(self) -> np.ndarray:
        """Unnormalised ``K x K`` kernel (all ones for the uniform scheme)."""
        half = (self.kernel - 1) // 2
        if self.scheme == "uniform":
            return np.ones((self.kernel, self.kernel))
        i = np.arange(-half, half + 1, dtype=np.float64) * self.dilation
        return np.exp(-(i[:, None] ** 2 + i[None, :] ** 2) / (2.0 * self.sigma ** 2))

    def weights(self) -> np.ndarray:
        """``K x K`` nonnegative weights summing to 1."""
        w = self.raw_weights()
        return w / w.sum()


def window_aggregate(volume, params: WindowAggregationParams, border: str = "renormalize"):
    """Weighted sum over a (dilated) K x K window for every disparity slice.

    ``border="renormalize"`` rescales the weights over in-image neighbours;
    ``border="zero"`` treats out-of-image neighbours as cost 0 without
    rescaling (the zero-padding convention of the adaptive layer).
    Accepts a CostVolume or an array whose last two axes are H, W.
    """
    if border not in ("renormalize", "zero"):
        raise ValueError(f"unknown border mode {border!r}")
    is_volume = isinstance(volume, CostVolume)
    arr = volume.values.data if is_volume else np.asarray(as_tensor(volume).data)
    # accumulate with the raw kernel and divide once, so uniform windows are exact
    w = params.raw_weights()
    offsets = grid_offsets(params.kernel, params.dilation)
    pad = params.dilation * ((params.kernel - 1) // 2)
    h, wd = arr.shape[-2:]
    lead = [(0, 0)] * (arr.ndim - 2)
    padded = np.pad(arr, lead + [(pad, pad), (pad, pad)])
    ones = np.pad(np.ones((h, wd)), [(pad, pad), (pad, pad)])
    out = np.zeros_like(arr)
    norm = np.zeros((h, wd))
    for (dy, dx), wk in zip(offsets, w.reshape(-1)):
        sy = slice(pad + dy, pad + dy + h)
        sx = slice(pad + dx, pad + dx + wd)
        out += wk * padded[..., sy, sx]
        norm += wk * ones[sy, sx]
    out = out / (norm if border == "renormalize" else w.sum())
    if is_volume:
        return CostVolume(volume.scale, Tensor(out))
    return out


# ---------------------------------------------------------------------------
# bilinear sampling with zero outside the image

def _bilinear(planes: np.ndarray, plane_idx: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Sample ``planes[plane_idx]`` at fractional ``(py, px)``.

    Returns the values, their partials w.r.t. ``py`` and ``px``, and the four
    corner records ``(flat_index, weight, inside)`` needed to scatter
    gradients back onto the planes.
    """
    h, w = planes.shape[-2:]
    flat = planes.reshape(-1)
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly, lx = py - y0f, px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    val = np.zeros(py.shape)
    dval_dy = np.zeros(py.shape)
    dval_dx = np.zeros(py.shape)
    corners = []
    spec = (
        (0, 0, (1 - ly) * (1 - lx), -(1 - lx), -(1 - ly)),
        (0, 1, (1 - ly) * lx, -lx, (1 - ly)),
        (1, 0, ly * (1 - lx), (1 - lx), -ly),
        (1, 1, ly * lx, lx, ly),
    )
    for oy, ox, wgt, wy, wx in spec:
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (plane_idx * h + np.clip(yy, 0, h - 1)) * w + np.clip(xx, 0, w - 1)
        v = np.where(inside, flat[idx], 0.0)
        val += wgt * v
        dval_dy += wy * v
        dval_dx += wx * v
        corners.append((idx, wgt, inside))
    return val, dval_dy, dval_dx, corners


def _scatter(corners, grad, size: int) -> np.ndarray:
    out = np.zeros(size)
    for idx, wgt, inside in corners:
        contrib = np.where(inside, wgt * grad, 0.0)
        out += np.bincount(idx.reshape(-1), weights=contrib.reshape(-1), minlength=size)
    return out


class BilinearSample(Function):
    """Sample an ``H x W`` slice at ``P`` fractional ``(y, x)`` points."""

    name = "bilinear_sample"

    def check(self, plane, points):
        if plane.ndim != 2 or points.ndim != 2 or points.shape[1] != 2:
            raise ShapeError(f"bilinear_sample: expected (H, W) plane and (P, 2) points, got {plane.shape}, {points.shape}")

    def forward(self, plane, points):
        idx = np.zeros(points.shape[0], dtype=np.int64)
        val, _, _, _ = _bilinear(plane, idx, points[:, 0], points[:, 1])
        return val, (plane, points)

    def backward(self, saved, g):
        plane, points = saved
        idx = np.zeros(points.shape[0], dtype=np.int64)
        _, gy, gx, corners = _bilinear(plane, idx, points[:, 0], points[:, 1])
        gplane = _scatter(corners, g, plane.size).reshape(plane.shape)
        gpoints = np.stack([g * gy, g * gx], axis=1)
        return gplane, gpoints


def bilinear_sample(plane, points) -> Tensor:
    """Bilinear values of ``plane`` at a ``(P, 2)`` array of ``(y, x)`` points.

    A single ``(y, x)`` pair is accepted and yields a length-1 result.
    """
    points = as_tensor(points)
    if points.ndim == 1:
        points = Tensor(points.data[None, :], requires_grad=points.requires_grad)
    return apply(BilinearSample(), plane, points)


# ---------------------------------------------------------------------------
# adaptive sparse-point aggregation

class DeformAggregate(Function):
    """``out[d, p] = sum_k w_k * m_k(g, p) * C(d, p + p_k + dp_k(g, p))`` with ``g`` the group of ``d``.

    Inputs: volume ``(B, D, H, W)``, offsets ``(B, G*K*K*2, H, W)`` laid out as
    ``[group][point][dy, dx]``, modulation ``(B, G*K*K, H, W)`` and base
    weights ``(K*K,)``.
    """

    name = "adaptive_aggregate"

    def __init__(self, kernel: int = 3, dilation: int = 1, groups: int = 1):
        self.kernel, self.dilation, self.groups = kernel, dilation, groups
        self.points = grid_offsets(kernel, dilation)

    def check(self, vol, off, mod, weight):
        if vol.ndim != 4:
            raise ShapeError(f"adaptive_aggregate: volume must be (B, D, H, W), got {vol.shape}")
        b, d, h, w = vol.shape
        g, k2 = self.groups, len(self.points)
        if d % g:
            raise ShapeError(f"adaptive_aggregate: {g} groups do not divide {d} disparities")
        if off.shape != (b, g * k2 * 2, h, w):
            raise ShapeError(f"adaptive_aggregate: offsets {off.shape} != {(b, g * k2 * 2, h, w)}")
        if mod.shape != (b, g * k2, h, w):
            raise ShapeError(f"adaptive_aggregate: modulation {mod.shape} != {(b, g * k2, h, w)}")
        if weight.shape != (k2,):
            raise ShapeError(f"adaptive_aggregate: weights {weight.shape} != ({k2},)")

    def _samples(self, vol, off, k):
        b, d, h, w = vol.shape
        per = d // self.groups
        k2 = len(self.points)
        dy, dx = self.points[k]
        o = off.reshape(b, self.groups, k2, 2, h, w)[:, :, k]
        hh = np.arange(h, dtype=np.float64)[:, None]
        ww = np.arange(w, dtype=np.float64)[None, :]
        py = np.repeat(hh + dy + o[:, :, 0], per, axis=1)
        px = np.repeat(ww + dx + o[:, :, 1], per, axis=1)
        plane_idx = np.broadcast_to(np.arange(b * d).reshape(b, d, 1, 1), (b, d, h, w))
        return _bilinear(vol, plane_idx, py, px)

    def forward(self, vol, off, mod, weight):
        b, d, h, w = vol.shape
        per = d // self.groups
        k2 = len(self.points)
        m = mod.reshape(b, self.groups, k2, h, w)
        out = np.zeros_like(vol)
        for k in range(k2):
            val = self._samples(vol, off, k)[0]
            out += weight[k] * np.repeat(m[:, :, k], per, axis=1) * val
        return out, (vol, off, mod, weight)

    def backward(self, saved, g):
        vol, off, mod, weight = saved
        b, d, h, w = vol.shape
        groups, per, k2 = self.groups, d // self.groups, len(self.points)
        m = mod.reshape(b, groups, k2, h, w)
        gvol = np.zeros(vol.size)
        goff = np.zeros((b, groups, k2, 2, h, w))
        gmod = np.zeros((b, groups, k2, h, w))
        gw = np.zeros(k2)
        for k in range(k2):
            val, dy, dx, corners = self._samples(vol, off, k)
            mk = np.repeat(m[:, :, k], per, axis=1)
            gw[k] = np.sum(g * mk * val)
            gmod[:, :, k] = (g * weight[k] * val).reshape(b, groups, per, h, w).sum(axis=2)
            gs = g * weight[k] * mk
            goff[:, :, k, 0] = (gs * dy).reshape(b, groups, per, h, w).sum(axis=2)
            goff[:, :, k, 1] = (gs * dx).reshape(b, groups, per, h, w).sum(axis=2)
            gvol += _scatter(corners, gs, vol.size)
        return (gvol.reshape(vol.shape), goff.reshape(off.shape),
                gmod.reshape(mod.shape), gw)


@dataclass
class AdaptiveAggregationParams:
    kernel: int
    dilation: int
    groups: int
    weights: Tensor
    offset_conv: ConvLayerParams
    modulation_conv: ConvLayerParams

    @classmethod
    def create(cls, max_disp: int, kernel: int = 3, dilation: int = 2, groups: int = 2,
               name: str = "adaptive"):
        """Box-filter initialisation: zero offsets, m = 0.5, ``w_k = 2 / K**2``."""
        if max_disp % groups:
            raise ValueError(f"{groups} groups do not divide {max_disp} disparities")
        k2 = kernel * kernel
        weights = Tensor(np.full(k2, 2.0 / k2), requires_grad=True, name=f"{name}.weights")
        offset_conv = ConvLayerParams.create(max_disp, 2 * k2 * groups, kernel, dilation=dilation,
                                             zero=True, name=f"{name}.offset")
        modulation_conv = ConvLayerParams.create(max_disp, k2 * groups, kernel, dilation=dilation,
                                                 zero=True, name=f"{name}.modulation")
        return cls(kernel, dilation, groups, weights, offset_conv, modulation_conv)

    def parameters(self) -> list[Tensor]:
        return [self.weights, *self.offset_conv.parameters(), *self.modulation_conv.parameters()]


def _values(volume):
    return volume.values if isinstance(volume, CostVolume) else as_tensor(volume)


def offsets_and_modulation(volume, params: AdaptiveAggregationParams) -> tuple[Tensor, Tensor]:
    """Offset field ``(B, 2*K*K*G, H, W)`` and sigmoid modulation field ``(B, K*K*G, H, W)``."""
    x = _values(volume)
    return conv2d(x, params.offset_conv), sigmoid(conv2d(x, params.modulation_conv))


def adaptive_aggregate(volume, params: AdaptiveAggregationParams):
    x = _values(volume)
    if x.shape[1] % params.groups:
        raise ShapeError(f"adaptive_aggregate: {params.groups} groups do not divide {x.shape[1]} disparities")
    offsets, modulation = offsets_and_modulation(x, params)
    op = DeformAggregate(params.kernel, params.dilation, params.groups)
    out = apply(op, x, offsets, modulation, params.weights)
    return CostVolume(volume.scale, out) if isinstance(volume, CostVolume) else out


@dataclass
class IsaParams:
    conv_in: ConvLayerParams
    adaptive: AdaptiveAggregationParams
    conv_out: ConvLayerParams

    @classmethod
    def create(cls, max_disp: int, kernel: int = 3, dilation: int = 2, groups: int = 2,
               name: str = "isa"):
        """Identity 1x1 input conv, box-filter adaptive stage, zero output conv (block = identity)."""
        conv_in = ConvLayerParams.create(max_disp, max_disp, 1, name=f"{name}.conv_in")
        conv_in.weight.data[:, :, 0, 0] = np.eye(max_disp)
        conv_out = ConvLayerParams.create(max_disp, max_disp, 1, zero=True, name=f"{name}.conv_out")
        adaptive = AdaptiveAggregationParams.create(max_disp, kernel, dilation, groups,
                                                    name=f"{name}.adaptive")
        return cls(conv_in, adaptive, conv_out)

    def parameters(self) -> list[Tensor]:
        return [*self.conv_in.parameters(), *self.adaptive.parameters(), *self.conv_out.parameters()]


def isa_block(volume, params: IsaParams):
    x = _values(volume)
    y = conv2d(x, params.conv_in)
    y = adaptive_aggregate(y, params.adaptive)
    y = conv2d(y, params.conv_out)
    out = add(x, y)
    return CostVolume(volume.scale, out) if isinstance(volume, CostVolume) else out
