"""Cross-scale cost aggregation and the closed-form inter-scale solver.

``csa`` fuses per-scale volumes: for output scale ``s`` every input scale
``k`` is mapped to scale ``s``'s shape (identity when ``k == s``, a chain of
``s - k`` stride-2 3x3 convolutions halving disparity channels when
``k < s``, bilinear upsampling followed by a 1x1 convolution when ``k > s``)
and the results are summed.

``solve_cross_scale`` solves the regularised multi-scale least-squares
problem exactly: with normalised aggregation weights, the minimiser satisfies
``(I + lam * L) v_hat = v_tilde`` where ``L`` is the Laplacian of the path
graph over scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Function, ShapeError, Tensor, add, apply, as_tensor
from .cost_volume import CostVolume
from .features import ConvLayerParams, conv2d


def upsample_matrix(src: int, dst: int) -> np.ndarray:
    """``dst x src`` linear-interpolation matrix, half-pixel centres, clamped at the ends."""
    if dst < src:
        raise ValueError(f"bilinear_upsample: cannot downscale {src} -> {dst}")
    mat = np.zeros((dst, src))
    ratio = src / dst
    for t in range(dst):
        pos = min(max((t + 0.5) * ratio - 0.5, 0.0), src - 1.0)
        i0 = int(np.floor(pos))
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        mat[t, i0] += 1.0 - frac
        mat[t, i1] += frac
    return mat


class BilinearUpsample(Function):
    """Resize the last two axes to ``(height, width)``."""

    name = "bilinear_upsample"

    def __init__(self, height: int, width: int):
        self.height, self.width = height, width

    def check(self, x):
        if x.ndim < 2:
            raise ShapeError(f"bilinear_upsample: need at least 2 axes, got {x.shape}")
        if self.height < x.shape[-2] or self.width < x.shape[-1]:
            raise ShapeError(
                f"bilinear_upsample: target {(self.height, self.width)} smaller than source {x.shape[-2:]}"
            )

    def forward(self, x):
        ay = upsample_matrix(x.shape[-2], self.height)
        ax = upsample_matrix(x.shape[-1], self.width)
        out = np.einsum("ty,...yx,ux->...tu", ay, x, ax, optimize=True)
        return out, (ay, ax)

    def backward(self, saved, g):
        ay, ax = saved
        return (np.einsum("ty,...tu,ux->...yx", ay, g, ax, optimize=True),)


def bilinear_upsample(x, height: int, width: int):
    if isinstance(x, CostVolume):
        return CostVolume(x.scale, apply(BilinearUpsample(height, width), x.values))
    return apply(BilinearUpsample(height, width), x)


# ---------------------------------------------------------------------------
# learned cross-scale fusion

@dataclass
class CsaParams:
    """``branches[s][k]`` maps input scale ``k`` onto output scale ``s`` (0-based).

    ``None`` is the identity, a list of ConvLayerParams is the stride-2
    downsampling chain, a single ConvLayerParams is the 1x1 conv applied after
    upsampling.
    """

    disparities: list[int]
    branches: list[list]

    @classmethod
    def create(cls, disparities, rng=None, name="csa"):
        """Cross branches end in a zero conv so the module starts as per-scale identity."""
        rng = rng if rng is not None else np.random.default_rng(0)
        scales = len(disparities)
        branches = []
        for s in range(scales):
            row = []
            for k in range(scales):
                tag = f"{name}.{s}.{k}"
                if k == s:
                    row.append(None)
                elif k < s:
                    chain = []
                    ch = disparities[k]
                    for step in range(s - k):
                        last = step == s - k - 1
                        if ch % 2:
                            raise ValueError(f"csa: disparity channels {ch} at scale {k + 1} not halvable")
                        chain.append(ConvLayerParams.create(ch, ch // 2, 3, rng, stride=2, padding=1,
                                                            zero=last, name=f"{tag}.down{step}"))
                        ch //= 2
                    if ch != disparities[s]:
                        raise ValueError(f"csa: chain from scale {k + 1} lands on {ch} channels, "
                                         f"scale {s + 1} has {disparities[s]}")
                    row.append(chain)
                else:
                    row.append(ConvLayerParams.create(disparities[k], disparities[s], 1, zero=True,
                                                      name=f"{tag}.up"))
            branches.append(row)
        return cls(list(disparities), branches)

    def parameters(self) -> list[Tensor]:
        out = []
        for row in self.branches:
            for br in row:
                if br is None:
                    continue
                for layer in br if isinstance(br, list) else [br]:
                    out.extend(layer.parameters())
        return out


def csa_branch(x, branch, height: int, width: int):
    if branch is None:
        return x
    if isinstance(branch, list):
        for layer in branch:
            x = conv2d(x, layer)
        return x
    return conv2d(bilinear_upsample(x, height, width), branch)


def csa(volumes, params: CsaParams) -> list:
    """Fused volumes ``C_hat[s] = sum_k f_sk(C_tilde[k])``."""
    is_volume = isinstance(volumes[0], CostVolume)
    xs = [v.values if is_volume else as_tensor(v) for v in volumes]
    scales = len(xs)
    if scales != len(params.branches):
        raise ShapeError(f"csa: {scales} volumes for {len(params.branches)}-scale parameters")
    out = []
    for s in range(scales):
        target = xs[s].shape
        total = None
        for k in range(scales):
            y = csa_branch(xs[k], params.branches[s][k], target[2], target[3])
            if y.shape != target:
                raise ShapeError(f"csa: branch (s={s + 1}, k={k + 1}) produced {y.shape}, expected {target}")
            total = y if total is None else add(total, y)
        out.append(CostVolume(s + 1, total) if is_volume else total)
    return out


# ---------------------------------------------------------------------------
# closed-form inter-scale consistency

def path_laplacian(scales: int) -> np.ndarray:
    lap = np.zeros((scales, scales))
    for s in range(1, scales):
        lap[s, s] += 1.0
        lap[s - 1, s - 1] += 1.0
        lap[s, s - 1] -= 1.0
        lap[s - 1, s] -= 1.0
    return lap


def _thomas(lower, diag, upper, rhs):
    """Tridiagonal solve; ``rhs`` may carry extra trailing columns."""
    n = len(diag)
    c = np.zeros(n)
    d = np.array(rhs, dtype=np.float64)
    b = np.array(diag, dtype=np.float64)
    for i in range(n):
        if i:
            denom = b[i] - lower[i - 1] * c[i - 1]
            d[i] = (d[i] - lower[i - 1] * d[i - 1]) / denom
            b[i] = denom
        else:
            d[i] = d[i] / b[i]
        if i < n - 1:
            c[i] = upper[i] / b[i]
    for i in range(n - 2, -1, -1):
        d[i] = d[i] - c[i] * d[i + 1]
    return d


@dataclass
class CrossScaleSolverProblem:
    values: np.ndarray
    lam: float

    def solve(self):
        return solve_cross_scale(self.values, self.lam)


def solve_cross_scale(values, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(v_hat, P)`` with ``P = (I + lam * L_path)^-1`` and ``v_hat = P @ values``."""
    if lam < 0:
        raise ValueError(f"regularisation strength must be >= 0, got {lam}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    n = v.size
    diag = 1.0 + lam * np.diag(path_laplacian(n))
    off = np.full(n - 1, -float(lam))
    proj = _thomas(off, diag, off, np.eye(n))
    return proj @ v, proj
