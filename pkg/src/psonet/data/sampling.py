"""Two-bin inverse-frequency weights for the skewed total-PASI distribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class SamplingWeights:
    weights: np.ndarray
    threshold: float
    keys: Optional[list] = None
    warning: Optional[str] = None

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def high_bin_probability(self, totals) -> float:
        high = np.asarray(totals) > self.threshold
        return float(self.probabilities[high].sum())

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of ``n`` visits drawn with replacement."""
        return rng.choice(len(self.weights), size=n, replace=True, p=self.probabilities)


def compute_sampling_weights(totals, threshold: float = 10.0, keys=None, base: float = 1.0) -> SamplingWeights:
    """Weight visits so the ``total > threshold`` bin is drawn about half the time.

    ``totals`` is either an array of total-PASI labels or a manifest. When one
    bin is empty the weights fall back to uniform and ``warning`` is set.
    """
    if hasattr(totals, "total_labels"):
        keys = totals.visits()
        totals = totals.total_labels(keys)
    totals = np.asarray(totals, dtype=np.float64)
    if totals.ndim != 1 or totals.size == 0:
        raise ValueError("need a non-empty 1-d array of total PASI labels")
    if not np.all(np.isfinite(totals)):
        raise ValueError("total PASI labels must be finite")
    high = totals > threshold
    n_high = int(high.sum())
    n_low = totals.size - n_high
    weights = np.full(totals.size, float(base))
    warning = None
    if n_high == 0 or n_low == 0:
        warning = f"degenerate sampling bins (low={n_low}, high={n_high}) at threshold {threshold}; using uniform weights"
    else:
        weights[high] = base * n_low / n_high
    return SamplingWeights(weights=weights, threshold=float(threshold), keys=keys, warning=warning)
