"""Convolution operator and the small shared feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Function, ShapeError, Tensor, apply, leaky_relu

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


class Conv2d(Function):
    """Batched 2D cross-correlation, NCHW input, OIHW weight."""

    name = "conv2d"

    def __init__(self, stride: int = 1, padding: int = 0, dilation: int = 1):
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def check(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4D input/weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        for size, k in ((x.shape[2], w.shape[2]), (x.shape[3], w.shape[3])):
            if conv_output_size(size, k, self.stride, self.padding, self.dilation) < 1:
                raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")

    def _slices(self, kh, kw, ho, wo):
        s, d = self.stride, self.dilation
        for i in range(kh):
            for j in range(kw):
                yield i, j, (slice(i * d, i * d + s * (ho - 1) + 1, s),
                             slice(j * d, j * d + s * (wo - 1) + 1, s))

    def forward(self, x, w, b):
        p = self.padding
        bsz, cin, h, wd = x.shape
        cout, _, kh, kw = w.shape
        ho = conv_output_size(h, kh, self.stride, p, self.dilation)
        wo = conv_output_size(wd, kw, self.stride, p, self.dilation)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # im2col: (B, Cin*kh*kw, Ho*Wo), channel-major to match w.reshape(cout, -1)
        cols = np.stack([xp[:, :, sy, sx] for _, _, (sy, sx) in self._slices(kh, kw, ho, wo)], axis=2)
        cols = cols.reshape(bsz, cin * kh * kw, ho * wo)
        out = np.matmul(w.reshape(cout, -1), cols) + b[None, :, None]
        out = out.reshape(bsz, cout, ho, wo)
        return out, (cols, w, xp.shape, x.shape)

    def backward(self, saved, g):
        cols, w, xpshape, xshape = saved
        p = self.padding
        bsz, cout, ho, wo = g.shape
        _, cin, kh, kw = w.shape
        g2 = g.reshape(bsz, cout, ho * wo)
        gw = np.einsum("bol,bkl->ok", g2, cols).reshape(w.shape)
        gcols = np.matmul(w.reshape(cout, -1).T, g2).reshape(bsz, cin, kh * kw, ho, wo)
        gxp = np.zeros(xpshape)
        for n, (_, _, (sy, sx)) in enumerate(self._slices(kh, kw, ho, wo)):
            gxp[:, :, sy, sx] += gcols[:, :, n]
        gx = gxp[:, :, p:p + xshape[2], p:p + xshape[3]] if p else gxp
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb


@dataclass
class ConvLayerParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def create(cls, cin, cout, kernel, rng=None, stride=1, padding=None, dilation=1,
               gain=1.0, zero=False, name=""):
        if padding is None:
            padding = dilation * (kernel // 2)
        shape = (cout, cin, kernel, kernel)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * gain * np.sqrt(2.0 / (cin * kernel * kernel))
        return cls(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                   Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias"),
                   stride, padding, dilation)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def conv2d(x, params: ConvLayerParams) -> Tensor:
    op = Conv2d(params.stride, params.padding, params.dilation)
    return apply(op, x, params.weight, params.bias)


def normalize_image(image, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` on an ``H x W x C`` (or ``... x C``) array."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (image.shape[-1],))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), (image.shape[-1],))
    if np.any(std <= 0):
        raise ValueError(f"normalize_image: std must be positive, got {std.tolist()}")
    return (image - mean) / std


@dataclass
class FeatureMap:
    scale: int
    values: Tensor  # B x N x H_s x W_s

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]


@dataclass
class FeaturePyramid:
    maps: list[FeatureMap]
    base_factor: int

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i) -> FeatureMap:
        return self.maps[i]

    def shapes(self) -> list[tuple[int, int]]:
        return [(m.height, m.width) for m in self.maps]


def pyramid_shapes(height: int, width: int, base_factor: int, scales: int) -> list[tuple[int, int]]:
    """Spatial extents of every scale: ceil-division by ``b`` then repeated halving."""
    h, w = -(-height // base_factor), -(-width // base_factor)
    shapes = [(h, w)]
    for _ in range(scales - 1):
        h, w = -(-h // 2), -(-w // 2)
        shapes.append((h, w))
    return shapes


class FeatureExtractor:
    """Stride-``b`` stem, one 3x3 conv at scale 1, then a stride-2 conv per extra scale.

    With S=3 this is the four-layer stack; every layer is followed by a leaky
    ReLU with slope 0.1.
    """

    def __init__(self, in_channels=3, channels=16, scales=3, base_factor=3, rng=None, slope=0.1):
        if scales < 1:
            raise ValueError("scales must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.scales, self.base_factor, self.slope = scales, base_factor, slope
        # non-overlapping b x b stem over a bottom/right zero-padded image
        kernel, pad = (base_factor, 0) if base_factor > 1 else (3, 1)
        self.stem = ConvLayerParams.create(in_channels, channels, kernel, rng, stride=base_factor,
                                           padding=pad, name="features.stem")
        self.scale1 = ConvLayerParams.create(channels, channels, 3, rng, name="features.s1")
        self.down = [ConvLayerParams.create(channels, channels, 3, rng, stride=2, padding=1,
                                            name=f"features.down{s + 2}")
                     for s in range(scales - 1)]

    def layers(self) -> list[ConvLayerParams]:
        return [self.stem, self.scale1, *self.down]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def __call__(self, images) -> FeaturePyramid:
        return extract_pyramid(images, self)


def _to_nchw(image) -> np.ndarray | Tensor:
    if isinstance(image, Tensor):
        return image
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim == 3:  # H x W x C
        arr = arr.transpose(2, 0, 1)[None]
    elif arr.ndim == 4:  # B x H x W x C
        arr = arr.transpose(0, 3, 1, 2)
    else:
        raise ShapeError(f"extract_pyramid: unsupported image shape {arr.shape}")
    return Tensor(arr)


def extract_pyramid(image, extractor: FeatureExtractor, scales: int | None = None) -> FeaturePyramid:
    """Run the shared extractor; ``image`` is ``H x W x C``, ``B x H x W x C``, or an NCHW Tensor."""
    scales = extractor.scales if scales is None else scales
    if not 1 <= scales <= extractor.scales:
        raise ValueError(f"extract_pyramid: scales={scales} outside 1..{extractor.scales}")
    x = _to_nchw(image)
    h, w = x.shape[2:]
    need = extractor.base_factor * 2 ** (scales - 1)
    if h < need or w < need:
        raise ShapeError(f"extract_pyramid: image {h}x{w} smaller than total downsampling factor {need}")
    expected = pyramid_shapes(h, w, extractor.base_factor, scales)
    b = extractor.base_factor
    if b > 1 and (h % b or w % b):
        x = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, -h % b), (0, -w % b))))
    x = leaky_relu(conv2d(x, extractor.stem), extractor.slope)
    x = leaky_relu(conv2d(x, extractor.scale1), extractor.slope)
    maps = [FeatureMap(1, x)]
    for s in range(1, scales):
        x = leaky_relu(conv2d(x, extractor.down[s - 1]), extractor.slope)
        maps.append(FeatureMap(s + 1, x))
    assert [(m.height, m.width) for m in maps] == expected
    return FeaturePyramid(maps, extractor.base_factor)
