"""PASI arithmetic: regional and weighted total scores from ordinal sub-scores."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

PASI_MIN = 0.0
PASI_MAX = 72.0


class PasiValidationError(ValueError):
    """Raised when an ordinal sub-score or score container is malformed."""


class Region(enum.Enum):
    """Body regions, in the canonical HN, UE, LE, TR order."""

    HN = "HN"
    UE = "UE"
    LE = "LE"
    TR = "TR"

    @property
    def weight(self) -> float:
        return float(REGION_WEIGHTS[self])

    @property
    def image_count(self) -> int:
        return REGION_IMAGE_COUNTS[self]

    @classmethod
    def parse(cls, value: "Region | str") -> "Region":
        if isinstance(value, Region):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise PasiValidationError(f"unknown region code {value!r}") from None


REGIONS = tuple(Region)

# head&neck, upper extremities, lower extremities, trunk
REGION_WEIGHTS = {
    Region.HN: Fraction(1, 10),
    Region.UE: Fraction(2, 10),
    Region.LE: Fraction(4, 10),
    Region.TR: Fraction(3, 10),
}
REGION_IMAGE_COUNTS = {Region.HN: 12, Region.UE: 18, Region.LE: 13, Region.TR: 10}

assert sum(REGION_WEIGHTS.values()) == 1


@dataclass(frozen=True)
class SeverityComponents:
    """The four ordinal sub-scores for one body region."""

    erythema: int
    induration: int
    desquamation: int
    area_score: int

    _BOUNDS = {"erythema": 4, "induration": 4, "desquamation": 4, "area_score": 6}

    def __post_init__(self):
        for name, upper in self._BOUNDS.items():
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise PasiValidationError(f"{name} must be an integer, got {value!r}")
            if not 0 <= value <= upper:
                raise PasiValidationError(f"{name}={value} outside 0..{upper}")

    @property
    def severity_sum(self) -> int:
        return self.erythema + self.induration + self.desquamation

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.erythema, self.induration, self.desquamation, self.area_score)


def regional_pasi(components: SeverityComponents | tuple, region: Region | str | None = None) -> float:
    """Regional PASI ``(erythema + induration + desquamation) * area_score``.

    The product is formed in integer arithmetic and only then converted to
    float, so label-side scores are exact. ``region`` is accepted for symmetry
    with the model side; it does not change the value.
    """
    if not isinstance(components, SeverityComponents):
        components = SeverityComponents(*components)
    if region is not None:
        Region.parse(region)
    return float(components.severity_sum * components.area_score)


def total_pasi(regional: Mapping[Region | str, float]) -> float:
    """Weighted sum of the four regional scores.

    Raises PasiValidationError if a region is missing, duplicated (e.g. both
    ``"HN"`` and ``Region.HN``) or a value lies outside [0, 72].
    """
    seen: dict[Region, float] = {}
    for key, value in regional.items():
        region = Region.parse(key)
        if region in seen:
            raise PasiValidationError(f"duplicate region {region.value}")
        value = float(value)
        if not PASI_MIN <= value <= PASI_MAX:
            raise PasiValidationError(f"regional PASI for {region.value} out of range: {value}")
        seen[region] = value
    missing = [r.value for r in REGIONS if r not in seen]
    if missing:
        raise PasiValidationError(f"missing regions: {', '.join(missing)}")
    total = sum(REGION_WEIGHTS[r] * Fraction(seen[r]) for r in REGIONS)
    return min(max(float(total), PASI_MIN), PASI_MAX)


# lower edges of area scores 2..6; any positive fraction below 0.10 is score 1
_AREA_EDGES = (0.10, 0.30, 0.50, 0.70, 0.90)


def area_fraction_to_score(fraction: float) -> int:
    """Map an affected-area fraction in [0, 1] to the 0..6 ordinal area score.

    Bins: 0 -> 0, (0, 10%) -> 1, [10, 30%) -> 2, [30, 50%) -> 3,
    [50, 70%) -> 4, [70, 90%) -> 5, [90, 100%] -> 6.
    """
    fraction = float(fraction)
    if not 0.0 <= fraction <= 1.0:
        raise PasiValidationError(f"area fraction {fraction} outside [0, 1]")
    if fraction == 0.0:
        return 0
    return 1 + bisect.bisect_right(_AREA_EDGES, fraction)
