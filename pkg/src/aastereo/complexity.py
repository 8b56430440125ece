"""Operation counts for a 3D convolution over a 4D volume vs an adaptive aggregation layer."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class ComplexityQuery:
    k: int = 3
    c: int = 64
    d: int = 64
    h: int = 1
    w: int = 1

    def __post_init__(self):
        for name in ("k", "c", "d", "h", "w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class ComplexityReport:
    query: ComplexityQuery
    conv3d: int
    terms: tuple[int, int, int]  # K^2 D^2 HW, 3 K^4 D HW, 3 K^2 D HW
    layers: int = 1

    @property
    def adaptive(self) -> int:
        return sum(self.terms)

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.adaptive, self.conv3d)

    def lines(self) -> list[str]:
        q = self.query
        r = self.ratio
        return [
            f"K={q.k} C={q.c} D={q.d} H={q.h} W={q.w}",
            f"conv3d = {self.conv3d}",
            f"adaptive = {self.adaptive}  (aggregation {self.terms[0]} + sampling {self.terms[1]} + modulation {self.terms[2]})",
            f"ratio = {r.numerator}/{r.denominator} = 1/{float(1 / r):.4f}",
            f"total_conv3d[{self.layers}] = {self.conv3d * self.layers}",
            f"total_adaptive[{self.layers}] = {self.adaptive * self.layers}",
        ]


def complexity(query: ComplexityQuery, layers: int = 1) -> ComplexityReport:
    k, c, d, hw = query.k, query.c, query.d, query.h * query.w
    conv3d = k ** 3 * c ** 2 * d * hw
    terms = (k ** 2 * d ** 2 * hw, 3 * k ** 4 * d * hw, 3 * k ** 2 * d * hw)
    return ComplexityReport(query, conv3d, terms, layers)
