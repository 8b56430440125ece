"""File codecs (PFM, binary PGM/PPM) and synthetic random-dot stereograms."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .head import DisparityMap

MAX_DIM = 1 << 16


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


@dataclass
class StereoPair:
    left: np.ndarray  # H x W x C in [0, 1]
    right: np.ndarray
    gt: DisparityMap | None = None
    pseudo: DisparityMap | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"StereoPair: left {self.left.shape} != right {self.right.shape}")
        for label, m in (("gt", self.gt), ("pseudo", self.pseudo)):
            if m is not None and m.shape != self.left.shape[:2]:
                raise ValueError(f"StereoPair: {label} {m.shape} != image {self.left.shape[:2]}")


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SyntheticSceneSpec:
    """Layered random-dot scene.

    ``layers`` lists ``(top, left, bottom, right, disparity)`` rectangles in
    left-image coordinates, front to back; a full-frame background layer is
    appended automatically using ``background_disparity``. When ``layers`` is
    None, ``num_layers - 1`` random rectangles are drawn from the seed.
    """

    height: int = 32
    width: int = 64
    num_layers: int = 2
    disp_min: int = 0
    disp_max: int = 8
    density: float = 0.5
    channels: int = 3
    seed: int = 0
    layers: list | None = None
    background_disparity: int | None = None

    def __post_init__(self):
        if self.disp_max >= self.width:
            raise ValueError(f"disparity {self.disp_max} must be smaller than width {self.width}")
        if not 0 <= self.disp_min <= self.disp_max:
            raise ValueError(f"bad disparity range [{self.disp_min}, {self.disp_max}]")
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"dot density must lie in (0, 1], got {self.density}")


def scene_layers(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[tuple]:
    """Front-to-back ``(top, left, bottom, right, disparity)`` list including the background."""
    h, w = spec.height, spec.width
    if spec.layers is not None:
        layers = [tuple(int(v) for v in layer) for layer in spec.layers]
    else:
        layers = []
        for _ in range(max(spec.num_layers - 1, 0)):
            lh = int(rng.integers(max(h // 4, 1), max(h // 2, 1) + 1))
            lw = int(rng.integers(max(w // 6, 1), max(w // 3, 1) + 1))
            top = int(rng.integers(0, h - lh + 1))
            left = int(rng.integers(0, w - lw + 1))
            layers.append((top, left, top + lh, left + lw,
                           int(rng.integers(spec.disp_min, spec.disp_max + 1))))
    for layer in layers:
        if layer[4] >= w or layer[4] < 0:
            raise ValueError(f"layer disparity {layer[4]} outside [0, {w})")
    bg = spec.background_disparity
    if bg is None:
        bg = spec.disp_min if spec.layers is not None else int(rng.integers(spec.disp_min, spec.disp_max + 1))
    if bg >= w:
        raise ValueError(f"background disparity {bg} must be smaller than width {w}")
    return layers + [(0, 0, h, w, int(bg))]


def _dots(rng, shape, density):
    values = rng.random(shape)
    keep = rng.random(shape[:2]) < density
    return np.where(keep[..., None], values, 0.5)


def generate_stereogram(spec: SyntheticSceneSpec) -> StereoPair:
    """Left random-dot image, right image composed by shifting each layer left by its disparity.

    Front layers win in both views. Right-image pixels that see no layer get
    fresh noise. A left pixel is valid when the right view shows the same
    layer at ``w - disparity``.
    """
    rng = np.random.default_rng(spec.seed)
    layers = scene_layers(spec, rng)
    h, w, c = spec.height, spec.width, spec.channels
    textures = [_dots(rng, (h, w, c), spec.density) for _ in layers]
    cols = np.arange(w)

    def covers(layer, rows, x):
        top, lft, bot, rgt, _ = layer
        return (rows >= top) & (rows < bot) & (x >= lft) & (x < rgt)

    rows = np.arange(h)[:, None]
    # left view: frontmost covering layer
    left_id = np.full((h, w), -1)
    for i in range(len(layers) - 1, -1, -1):
        left_id = np.where(covers(layers[i], rows, cols[None, :]), i, left_id)
    # right view: pixel x sees layer i at left column x + d_i
    right_id = np.full((h, w), -1)
    for i in range(len(layers) - 1, -1, -1):
        src = cols[None, :] + layers[i][4]
        right_id = np.where(covers(layers[i], rows, src) & (src < w), i, right_id)

    left = np.empty((h, w, c))
    right = _dots(rng, (h, w, c), spec.density)
    gt = np.zeros((h, w))
    for i, layer in enumerate(layers):
        d = layer[4]
        m = left_id == i
        left[m] = textures[i][m]
        gt[m] = d
        rm = right_id == i
        rr, rc = np.nonzero(rm)
        right[rr, rc] = textures[i][rr, rc + d]
    target = cols[None, :] - gt.astype(int)
    inside = target >= 0
    valid = inside & (right_id[rows, np.clip(target, 0, w - 1)] == left_id)
    return StereoPair(left, right, DisparityMap(gt, valid))


def generate_dataset(count: int, height=32, width=64, disp_max=8, seed=0, **kw) -> list[StereoPair]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_stereogram(SyntheticSceneSpec(height=height, width=width, disp_max=disp_max,
                                                   seed=int(s), **kw)) for s in seeds]


def sparsify_mask(gt: DisparityMap, keep: float, seed: int = 0) -> DisparityMap:
    """Keep exactly ``round(keep * n)`` of the ``n`` valid pixels, chosen uniformly."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep fraction must lie in (0, 1], got {keep}")
    mask = gt.mask()
    idx = np.flatnonzero(mask)
    n_keep = int(round(keep * idx.size))
    chosen = np.random.default_rng(seed).choice(idx, size=n_keep, replace=False)
    new = np.zeros(mask.size, dtype=bool)
    new[chosen] = True
    return DisparityMap(gt.values.copy(), new.reshape(mask.shape))


# ---------------------------------------------------------------------------
# PFM

def write_pfm(disp, path) -> None:
    """Grayscale little-endian PFM; rows stored bottom-up; values narrowed to float32."""
    values = disp.values if isinstance(disp, DisparityMap) else np.asarray(disp)
    if values.ndim != 2:
        raise FormatError(f"write_pfm: expected a 2D map, got {values.shape}")
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.flipud(values).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path) -> DisparityMap:
    raw = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(3):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated PFM header")
        lines.append(raw[pos:end].strip())
        pos = end + 1
    magic, dims, scale_txt = lines
    if magic == b"PF":
        raise FormatError(f"{path}: color PFM ('PF') is not supported")
    if magic != b"Pf":
        raise FormatError(f"{path}: bad PFM magic {magic!r}")
    m = re.fullmatch(rb"(\d+)\s+(\d+)", dims)
    if not m:
        raise FormatError(f"{path}: bad PFM dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
        raise FormatError(f"{path}: PFM dimensions {w}x{h} out of range")
    try:
        scale = float(scale_txt)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale {scale_txt!r}") from None
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(raw) - pos < need:
        raise FormatError(f"{path}: PFM data short by {need - (len(raw) - pos)} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return DisparityMap(np.flipud(data).astype(np.float64))


# ---------------------------------------------------------------------------
# PGM / PPM

_PNM_NAMES = {b"P1": "ASCII PBM", b"P2": "ASCII PGM", b"P3": "ASCII PPM", b"P4": "binary PBM",
              b"P7": "PAM"}


def _pnm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Binary PGM (P5) -> ``H x W x 1``, PPM (P6) -> ``H x W x 3``, scaled to [0, 1] by maxval."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        name = _PNM_NAMES.get(magic, "unknown format")
        raise FormatError(f"{path}: unsupported image format ({name}); only binary PGM/PPM are read")
    (_, w, h, maxval), pos = _pnm_tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM) or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PNM header {w}x{h} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * c * dtype.itemsize
    if len(raw) - pos < need:
        raise FormatError(f"{path}: image data short by {need - (len(raw) - pos)} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=w * h * c, offset=pos).reshape(h, w, c)
    return data.astype(np.float64) / maxval


def write_image(image, path, maxval: int = 255) -> None:
    """Write ``H x W`` / ``H x W x 1`` as P5 or ``H x W x 3`` as P6, clipping to [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] not in (1, 3):
        raise FormatError(f"write_image: need 1 or 3 channels, got {arr.shape}")
    magic = b"P5" if arr.shape[2] == 1 else b"P6"
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.round(np.clip(arr, 0.0, 1.0) * maxval).astype(dtype)
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode("ascii") + q.tobytes())


def write_stereo_pair(pair: StereoPair, directory, stem: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_image(pair.left, directory / f"{stem}_left.ppm" if pair.left.shape[2] == 3 else directory / f"{stem}_left.pgm")
    write_image(pair.right, directory / f"{stem}_right.ppm" if pair.right.shape[2] == 3 else directory / f"{stem}_right.pgm")
    if pair.gt is not None:
        write_pfm(pair.gt, directory / f"{stem}_disp.pfm")
        write_image(pair.gt.mask().astype(np.float64), directory / f"{stem}_mask.pgm")


def load_stereo_dir(directory) -> list[StereoPair]:
    """Load ``*_left.p[gp]m`` / ``*_right`` / optional ``*_disp.pfm``, ``*_mask.pgm``, ``*_pseudo.pfm``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    pairs = []
    for left_path in sorted(directory.glob("*_left.p[gp]m")):
        stem = left_path.name[: -len("_left.ppm")]
        right_path = left_path.with_name(f"{stem}_right{left_path.suffix}")
        left, right = read_image(left_path), read_image(right_path)
        gt = pseudo = None
        if (directory / f"{stem}_disp.pfm").exists():
            gt = read_pfm(directory / f"{stem}_disp.pfm")
            mask_path = directory / f"{stem}_mask.pgm"
            if mask_path.exists():
                gt.valid = read_image(mask_path)[..., 0] > 0.5
        if (directory / f"{stem}_pseudo.pfm").exists():
            pseudo = read_pfm(directory / f"{stem}_pseudo.pfm")
        pairs.append(StereoPair(left, right, gt, pseudo))
    if not pairs:
        raise FileNotFoundError(f"no *_left.ppm / *_left.pgm images in {directory}")
    return pairs
