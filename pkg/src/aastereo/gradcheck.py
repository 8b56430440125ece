"""Seeded finite-difference checks for every differentiable operator in the package."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from .autodiff import Function, GradCheckReport, Tape, Tensor, concat, finite_difference_check, reshape
from .cost_volume import Correlate
from .cross_scale import BilinearUpsample, CsaParams, csa
from .features import Conv2d, ConvLayerParams
from .head import MaskedLoss, SmoothL1, SoftArgmin
from .intra import AdaptiveAggregationParams, BilinearSample, IsaParams, adaptive_aggregate, isa_block
from .model import RefineParams, refine

STEP = 1e-5
TOLERANCE = 1e-4
# fixtures that are smooth everywhere within reach of the probe can afford a
# coarser step, which keeps roundoff off their smallest gradients
STEP_OVERRIDES = {"adaptive_aggregate": 1e-4, "isa_block": 1e-4}


class Composite(Function):
    """Wrap a tape-recorded computation ``fn(*tensors) -> Tensor`` as one operator."""

    def __init__(self, fn: Callable, name: str):
        self.fn, self.name = fn, name

    def forward(self, *arrays):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = self.fn(*inputs)
        return out.data, (tape, inputs, out)

    def backward(self, saved, g):
        tape, inputs, out = saved
        return tuple(tape.gradient(out, inputs, g))


def _bind(layer: ConvLayerParams, w, b) -> ConvLayerParams:
    return ConvLayerParams(w, b, layer.stride, layer.padding, layer.dilation)


def _conv2d(rng):
    return Conv2d(stride=2, padding=1, dilation=1), [
        rng.standard_normal((2, 3, 6, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]


def _conv2d_dilated(rng):
    return Conv2d(stride=1, padding=2, dilation=2), [
        rng.standard_normal((1, 2, 5, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]


def _correlate(rng):
    return Correlate(3), [rng.standard_normal((1, 3, 4, 6)), rng.standard_normal((1, 3, 4, 6))]


def _bilinear_sample(rng):
    pts = rng.uniform(0.1, 3.9, size=(6, 2))
    pts += 0.25 * (np.abs(pts - np.round(pts)) < 0.05)
    return BilinearSample(), [rng.standard_normal((5, 5)), pts]


def _offset_bias(rng, shape):
    # fractional parts kept near 1/2 so no sample point crosses a grid line (bilinear kink)
    return rng.integers(-1, 2, shape) + rng.uniform(0.35, 0.65, shape) * rng.choice([-1, 1], shape)


def _adaptive(rng):
    d, g = 4, 2
    template = AdaptiveAggregationParams.create(d, 3, 2, g)

    def fn(vol, weights, ow, ob, mw, mb):
        params = AdaptiveAggregationParams(3, 2, g, weights, _bind(template.offset_conv, ow, ob),
                                           _bind(template.modulation_conv, mw, mb))
        return adaptive_aggregate(vol, params)

    oc, mc = template.offset_conv, template.modulation_conv
    return Composite(fn, "adaptive_aggregate"), [
        rng.standard_normal((1, d, 5, 6)),
        rng.standard_normal(9),
        0.01 * rng.standard_normal(oc.weight.shape), _offset_bias(rng, oc.bias.shape),
        0.3 * rng.standard_normal(mc.weight.shape), rng.standard_normal(mc.bias.shape),
    ]


def _isa(rng):
    d = 4
    template = IsaParams.create(d, 3, 2, 2)
    ad = template.adaptive

    def fn(vol, iw, ib, weights, ow, ob, mw, mb, xw, xb):
        params = IsaParams(
            _bind(template.conv_in, iw, ib),
            AdaptiveAggregationParams(3, 2, 2, weights, _bind(ad.offset_conv, ow, ob),
                                      _bind(ad.modulation_conv, mw, mb)),
            _bind(template.conv_out, xw, xb),
        )
        return isa_block(vol, params)

    return Composite(fn, "isa_block"), [
        rng.standard_normal((1, d, 3, 4)),
        0.5 * rng.standard_normal((d, d, 1, 1)), rng.standard_normal(d),
        rng.standard_normal(9),
        0.01 * rng.standard_normal(ad.offset_conv.weight.shape), _offset_bias(rng, ad.offset_conv.bias.shape),
        0.3 * rng.standard_normal(ad.modulation_conv.weight.shape), rng.standard_normal(ad.modulation_conv.bias.shape),
        rng.standard_normal((d, d, 1, 1)), rng.standard_normal(d),
    ]


def _csa(rng):
    disps = [4, 2]
    template = CsaParams.create(disps, rng)
    layers = [template.branches[1][0][0], template.branches[0][1]]

    def fn(v1, v2, dw, db, uw, ub):
        branches = [[None, _bind(layers[1], uw, ub)], [[_bind(layers[0], dw, db)], None]]
        a, b = csa([v1, v2], CsaParams(disps, branches))
        # one output: both scales flattened and concatenated
        return concat([reshape(a, (-1,)), reshape(b, (-1,))], axis=0)

    return Composite(fn, "csa"), [
        rng.standard_normal((1, 4, 6, 6)), rng.standard_normal((1, 2, 3, 3)),
        rng.standard_normal(layers[0].weight.shape), rng.standard_normal(2),
        rng.standard_normal(layers[1].weight.shape), rng.standard_normal(4),
    ]


def _upsample(rng):
    return BilinearUpsample(5, 7), [rng.standard_normal((1, 2, 3, 4))]


def _soft_argmin(rng):
    return SoftArgmin(), [rng.standard_normal((2, 5, 3, 4))]


def _smooth_l1(rng):
    x = rng.uniform(-3, 3, size=20)
    x[np.abs(np.abs(x) - 1.0) < 0.05] += 0.2
    return SmoothL1(), [x]


def _masked_loss(rng):
    mask = rng.random((2, 4, 5)) < 0.6
    pred = rng.uniform(0, 6, (2, 4, 5))
    gt = pred + rng.uniform(-2.5, 2.5, pred.shape)
    pseudo = pred + rng.uniform(-2.5, 2.5, pred.shape)
    for ref in (gt, pseudo):
        near = np.abs(np.abs(pred - ref) - 1.0) < 0.05
        ref[near] += 0.2
    return MaskedLoss(mask, use_pseudo=True), [pred, gt, pseudo]


def _refine(rng):
    template = RefineParams.create(3, 4, rng)

    def fn(disp, image, *weights):
        convs = [_bind(c, weights[2 * i], weights[2 * i + 1]) for i, c in enumerate(template.convs)]
        return refine(disp, image, RefineParams(convs), factor=3, max_disp=8.0)

    inputs = [rng.uniform(0, 4, (1, 3, 4)), rng.standard_normal((1, 3, 8, 11))]
    for c in template.convs:
        inputs += [rng.standard_normal(c.weight.shape) * 0.5, rng.standard_normal(c.bias.shape) * 0.5]
    return Composite(fn, "refine"), inputs


REGISTRY: dict[str, Callable] = {
    "conv2d": _conv2d,
    "conv2d_dilated": _conv2d_dilated,
    "correlate": _correlate,
    "bilinear_sample": _bilinear_sample,
    "adaptive_aggregate": _adaptive,
    "isa_block": _isa,
    "csa": _csa,
    "bilinear_upsample": _upsample,
    "soft_argmin": _soft_argmin,
    "smooth_l1": _smooth_l1,
    "masked_loss": _masked_loss,
    "refine": _refine,
}


def run_gradchecks(names=None, seed: int = 0, registry=None, step=None,
                   tolerance=TOLERANCE) -> list[GradCheckReport]:
    """Check each named operator; ``step=None`` uses the per-operator default."""
    registry = REGISTRY if registry is None else registry
    names = list(registry) if names is None else list(names)
    unknown = [n for n in names if n not in registry]
    if unknown:
        raise KeyError(f"unknown operator(s): {', '.join(unknown)}")
    reports = []
    for name in names:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        op, inputs = registry[name](rng)
        h = step if step is not None else STEP_OVERRIDES.get(name, STEP)
        report = finite_difference_check(op, inputs, step=h, tolerance=tolerance)
        report.op = name
        reports.append(report)
    return reports
