"""Input checking shared by the estimator, training loop and CLI."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data.images import RegionalImageSet, set_capacity
from .data.manifest import VisitSample
from .pasi import PASI_MAX, REGIONS, Region


@dataclass
class VisitArrays:
    """Visits stacked per region for batched evaluation.

    ``images[code]`` is (n_visits, capacity, 3, H, W) float32 and
    ``masks[code]`` the matching (n_visits, capacity) boolean validity.
    """

    images: dict
    masks: dict
    keys: list
    labels: Optional[np.ndarray] = None  # (n_visits, 4), HN, UE, LE, TR

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def totals(self) -> Optional[np.ndarray]:
        if self.labels is None:
            return None
        from .pasi import total_pasi

        return np.array([total_pasi(dict(zip(REGIONS, row))) for row in self.labels])

    def take(self, idx) -> "VisitArrays":
        idx = np.asarray(idx)
        return VisitArrays(
            images={k: v[idx] for k, v in self.images.items()},
            masks={k: v[idx] for k, v in self.masks.items()},
            keys=[self.keys[i] for i in idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    @property
    def mode(self) -> str:
        n = self.images["HN"].shape[1]
        return "four_crop" if n == 4 * Region.HN.image_count else "low_res"

    @property
    def image_size(self) -> tuple:
        return tuple(self.images["HN"].shape[-2:])


def check_region_set(s: RegionalImageSet, mode: Optional[str] = None, size: Optional[tuple] = None) -> None:
    if not isinstance(s, RegionalImageSet):
        raise TypeError(f"expected RegionalImageSet, got {type(s).__name__}")
    allowed = [set_capacity(s.region, m) for m in ((mode,) if mode else ("low_res", "four_crop"))]
    if s.capacity not in allowed:
        raise ValueError(f"{s.region.value} set has {s.capacity} slots, expected one of {allowed}")
    if size is not None and tuple(s.image_size) != tuple(size):
        raise ValueError(f"{s.region.value} images are {s.image_size}, expected {tuple(size)}")
    if not np.all(np.isfinite(s.images)):
        raise ValueError(f"{s.region.value} set contains non-finite values")
    if np.any(s.images[~s.valid_mask] != 0):
        raise ValueError(f"{s.region.value} set has non-zero data in masked slots")


def check_visits(
    X, mode: Optional[str] = None, input_size: Optional[Sequence[int]] = None, require_labels: bool = False
) -> VisitArrays:
    """Validate visits and stack them; ``VisitArrays`` pass through after checks."""
    if isinstance(X, VisitArrays):
        arrays = X
        if input_size is not None and arrays.image_size != tuple(input_size):
            raise ValueError(f"images are {arrays.image_size}, expected {tuple(input_size)}")
        if mode is not None and arrays.mode != mode:
            raise ValueError(f"sets were assembled in {arrays.mode} mode, expected {mode}")
    else:
        X = list(X)
        if not X:
            raise ValueError("no visits given")
        images = {r.value: [] for r in REGIONS}
        masks = {r.value: [] for r in REGIONS}
        labels = []
        for v in X:
            if not isinstance(v, VisitSample):
                raise TypeError(f"expected VisitSample, got {type(v).__name__}")
            for r in REGIONS:
                s = v.region_sets.get(r) or v.region_sets.get(r.value)
                if s is None:
                    raise ValueError(f"visit {v.key} has no {r.value} image set")
                check_region_set(s, mode, tuple(input_size) if input_size is not None else None)
                images[r.value].append(s.images)
                masks[r.value].append(s.valid_mask)
            if v.labels is not None:
                labels.append([v.labels[r.value] for r in REGIONS])
        try:
            arrays = VisitArrays(
                images={k: np.stack(v) for k, v in images.items()},
                masks={k: np.stack(v) for k, v in masks.items()},
                keys=[v.key for v in X],
                labels=np.asarray(labels, dtype=np.float64) if len(labels) == len(X) else None,
            )
        except ValueError as exc:
            raise ValueError(f"visits do not share one image geometry: {exc}") from None
        if mode is None and len({a.shape[1] // r.image_count for r, a in zip(REGIONS, arrays.images.values())}) > 1:
            raise ValueError("region sets mix low_res and four_crop capacities")
    if require_labels and arrays.labels is None:
        raise ValueError("every visit needs regional labels")
    return arrays


def check_targets(y, n: int) -> np.ndarray:
    """Regional targets as an (n, 4) float array."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape != (n, len(REGIONS)):
        raise ValueError(f"targets must have shape ({n}, 4), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if y.min() < 0 or y.max() > PASI_MAX:
        raise ValueError("targets must lie in [0, 72]")
    return y
