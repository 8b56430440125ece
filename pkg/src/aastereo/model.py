"""Compact stereo model: feature pyramid, correlation volumes, stacked aggregation modules,
soft-argmin regression and a single-stage refinement back to full resolution."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import ShapeError, Tensor, add, concat, crop, leaky_relu, reshape, scale
from .cost_volume import build_pyramid, scale_disparities
from .cross_scale import CsaParams, bilinear_upsample, csa
from .features import IMAGENET_MEAN, IMAGENET_STD, ConvLayerParams, FeatureExtractor, conv2d, normalize_image
from .head import soft_argmin
from .intra import IsaParams, isa_block


@dataclass
class ModelConfig:
    scales: int = 3
    base_factor: int = 3
    channels: int = 16
    max_disp: int = 24
    num_modules: int = 6
    num_plain: int = 3
    kernel: int = 3
    groups: int = 2
    dilation: int = 2
    refinement: bool = True
    in_channels: int = 3
    refine_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.num_plain <= self.num_modules:
            raise ValueError(f"num_plain={self.num_plain} must lie in 0..num_modules={self.num_modules}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        for s, d in enumerate(self.disparities(), start=1):
            if d % self.groups:
                raise ValueError(f"groups={self.groups} does not divide D={d} at scale {s}")

    def disparities(self) -> list[int]:
        return scale_disparities(self.max_disp, self.base_factor, self.scales)

    def scale_factor(self, s: int) -> int:
        """Image pixels per pixel at (1-based) scale ``s``."""
        return self.base_factor * 2 ** (s - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in data.items():
            if key not in kinds:
                raise ValueError(f"unknown model config key {key!r}")
            if kinds[key] in ("bool", bool):
                out[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            else:
                out[key] = int(value)
        return cls(**out)


def default_loss_weights(scales: int) -> list[float]:
    """Full-resolution output first, then scale s weighted ``(S - s + 1) / S`` (1 for s = 1)."""
    return [1.0] + [1.0 if s == 1 else (scales - s + 1) / scales for s in range(1, scales + 1)]


@dataclass
class PlainStageParams:
    conv1: ConvLayerParams
    conv2: ConvLayerParams

    @classmethod
    def create(cls, max_disp, rng, name="plain"):
        return cls(ConvLayerParams.create(max_disp, max_disp, 3, rng, name=f"{name}.conv1"),
                   ConvLayerParams.create(max_disp, max_disp, 3, zero=True, name=f"{name}.conv2"))

    def parameters(self):
        return [*self.conv1.parameters(), *self.conv2.parameters()]


def plain_stage(x, params: PlainStageParams):
    y = leaky_relu(conv2d(x, params.conv1))
    return add(x, conv2d(y, params.conv2))


@dataclass
class AaModuleParams:
    intra: list  # PlainStageParams | IsaParams per scale
    csa: CsaParams

    def parameters(self):
        return [p for stage in self.intra for p in stage.parameters()] + self.csa.parameters()


def aa_module(volumes: list, params: AaModuleParams) -> list:
    out = []
    for x, stage in zip(volumes, params.intra):
        out.append(isa_block(x, stage) if isinstance(stage, IsaParams) else plain_stage(x, stage))
    return csa(out, params.csa)


@dataclass
class RefineParams:
    convs: list

    @classmethod
    def create(cls, image_channels, hidden, rng, name="refine"):
        return cls([
            ConvLayerParams.create(1 + image_channels, hidden, 3, rng, name=f"{name}.conv0"),
            ConvLayerParams.create(hidden, hidden, 3, rng, name=f"{name}.conv1"),
            ConvLayerParams.create(hidden, 1, 3, zero=True, name=f"{name}.conv2"),
        ])

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()]


def upsample_disparity(disp, factor: int, height: int, width: int) -> Tensor:
    """Bilinear ``x factor`` upsampling of a ``(B, h, w)`` map, cropped to ``height x width``,
    with values multiplied by ``factor`` to stay in full-resolution pixels."""
    h, w = disp.shape[-2:]
    if h * factor < height or w * factor < width or -(-height // factor) != h or -(-width // factor) != w:
        raise ShapeError(f"upsample_disparity: {h}x{w} map x{factor} does not cover {height}x{width}")
    up = bilinear_upsample(disp, h * factor, w * factor)
    if (h * factor, w * factor) != (height, width):
        up = crop(up, height, width)
    return scale(up, float(factor))


def refine(disp, image, params: RefineParams | None, factor: int, max_disp: float = 1.0) -> Tensor:
    """Upsample the low-resolution map by ``factor`` and add a convolutional residual.

    ``disp`` is ``(B, h, w)``, ``image`` is ``(B, C, H, W)``; with
    ``params=None`` (or a zero final conv) the output is the scaled bilinear
    upsampling alone.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    bsz, _, height, width = image.shape
    up = upsample_disparity(disp, factor, height, width)
    if params is None:
        return up
    x = concat([reshape(scale(up, 1.0 / max_disp), (bsz, 1, height, width)), image], axis=1)
    x = leaky_relu(conv2d(x, params.convs[0]))
    x = leaky_relu(conv2d(x, params.convs[1]))
    residual = conv2d(x, params.convs[2])
    return add(up, reshape(residual, (bsz, height, width)))


@dataclass
class ModelOutput:
    per_scale: list  # (B, H_s, W_s) Tensors, scale 1 first; empty in inference mode
    final: Tensor  # (B, H, W)


class StereoModel:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        disps = config.disparities()
        self.extractor = FeatureExtractor(config.in_channels, config.channels, config.scales,
                                          config.base_factor, rng)
        self.modules: list[AaModuleParams] = []
        for m in range(config.num_modules):
            intra = []
            for s, d in enumerate(disps):
                tag = f"aa{m}.s{s + 1}"
                if m < config.num_plain:
                    intra.append(PlainStageParams.create(d, rng, name=f"{tag}.plain"))
                else:
                    intra.append(IsaParams.create(d, config.kernel, config.dilation, config.groups,
                                                  name=f"{tag}.isa"))
            self.modules.append(AaModuleParams(intra, CsaParams.create(disps, rng, name=f"aa{m}.csa")))
        self.refinement = (RefineParams.create(config.in_channels, config.refine_channels, rng)
                           if config.refinement else None)

    def parameters(self) -> list[Tensor]:
        params = list(self.extractor.parameters())
        for module in self.modules:
            params.extend(module.parameters())
        if self.refinement is not None:
            params.extend(self.refinement.parameters())
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.parameters()
        names = [p.name for p in params]
        assert len(set(names)) == len(names), "duplicate parameter names"
        return list(zip(names, params))

    def check_input(self, height: int, width: int) -> None:
        """Reject images too small for the pyramid or the per-scale disparity range."""
        cfg = self.config
        need_h = need_w = cfg.scale_factor(cfg.scales)
        for s, d in enumerate(cfg.disparities(), start=1):
            need_w = max(need_w, d * cfg.scale_factor(s))
        if height < need_h or width < need_w:
            raise ShapeError(
                f"input {height}x{width} too small: needs at least {need_h}x{need_w}; "
                f"pad by {max(need_h - height, 0)} rows and {max(need_w - width, 0)} columns"
            )

    def prepare(self, images) -> Tensor:
        """``H x W x C`` or ``B x H x W x C`` in [0, 1] -> normalised NCHW Tensor."""
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != self.config.in_channels:
            raise ShapeError(f"expected (B,) H x W x {self.config.in_channels} images, got {arr.shape}")
        if arr.shape[-1] == 3:
            arr = normalize_image(arr, IMAGENET_MEAN, IMAGENET_STD)
        else:
            arr = normalize_image(arr, 0.45, 0.225)
        return Tensor(arr.transpose(0, 3, 1, 2))

    def forward(self, left, right, training: bool = True) -> ModelOutput:
        cfg = self.config
        left_t, right_t = self.prepare(left), self.prepare(right)
        if left_t.shape != right_t.shape:
            raise ShapeError(f"left {left_t.shape} and right {right_t.shape} differ")
        height, width = left_t.shape[2:]
        self.check_input(height, width)
        fl = self.extractor(left_t)
        fr = self.extractor(right_t)
        volumes = [v.values for v in build_pyramid(fl, fr, cfg.max_disp)]
        for module in self.modules:
            volumes = aa_module(volumes, module)
        if training:
            per_scale = [soft_argmin(v) for v in volumes]
            low = per_scale[0]
        else:
            per_scale = []
            low = soft_argmin(volumes[0])
        final = refine(low, left_t, self.refinement, cfg.base_factor, cfg.max_disp)
        return ModelOutput(per_scale, final)

    __call__ = forward

    def predict(self, left, right) -> np.ndarray:
        """Full-resolution disparity for one pair (``H x W``) or a batch."""
        out = self.forward(left, right, training=False).final.data
        return out[0] if np.asarray(left).ndim == 3 else out

    def upsampled_predictions(self, output: ModelOutput, height: int, width: int) -> list[Tensor]:
        """Final map followed by every per-scale map brought to full resolution."""
        preds = [output.final]
        for s, p in enumerate(output.per_scale, start=1):
            preds.append(upsample_disparity(p, self.config.scale_factor(s), height, width))
        return preds
