"""Agreement between two score sources: ICC(2,1) with confidence bounds and MAE +/- STD."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats


class UndefinedIccError(ValueError):
    """Between-subject variance is zero, so the ICC has no meaning."""


class SubjectMismatchError(ValueError):
    pass


@dataclass
class RatingPairs:
    ids: list
    a: np.ndarray
    b: np.ndarray
    source_a: str = "a"
    source_b: str = "b"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError("score columns must be 1-d and of equal length")
        if len(self.ids) != len(self.a):
            raise ValueError("one id per subject is required")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("scores must be finite")

    @classmethod
    def from_columns(cls, a, b, ids=None, source_a="a", source_b="b") -> "RatingPairs":
        a = np.asarray(a, dtype=np.float64)
        ids = list(range(len(a))) if ids is None else list(ids)
        return cls(ids, a, b, source_a, source_b)

    @classmethod
    def from_tables(cls, a: Mapping, b: Mapping, source_a="a", source_b="b") -> "RatingPairs":
        missing_b = sorted(set(a) - set(b))
        missing_a = sorted(set(b) - set(a))
        if missing_a or missing_b:
            raise SubjectMismatchError(
                f"subject ids differ: missing from {source_b}: {missing_b[:5]}, missing from {source_a}: {missing_a[:5]}"
            )
        ids = sorted(a)
        return cls(ids, [a[i] for i in ids], [b[i] for i in ids], source_a, source_b)

    def __len__(self) -> int:
        return len(self.ids)

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.a, self.b])


def _as_pairs(pairs, b=None) -> RatingPairs:
    if isinstance(pairs, RatingPairs):
        return pairs
    return RatingPairs.from_columns(pairs, b)


def mae_std(pairs, b=None) -> tuple[float, float]:
    """Mean and population standard deviation of ``|a - b|``."""
    p = _as_pairs(pairs, b)
    if len(p) == 0:
        raise ValueError("mae_std needs at least one subject")
    d = np.abs(p.a - p.b)
    return float(d.mean()), float(d.std(ddof=0))


@dataclass
class IccResult:
    value: float
    ci_low: float
    ci_high: float
    n_subjects: int
    confidence: float = 0.95
    variant: str = "ICC(2,1)"
    ci_method: str = "F"


def mean_squares(Y: np.ndarray) -> tuple[float, float, float]:
    """Two-way ANOVA mean squares (rows, columns, residual) of an n x k table."""
    n, k = Y.shape
    grand = Y.mean()
    row = Y.mean(axis=1)
    col = Y.mean(axis=0)
    msr = k * np.sum((row - grand) ** 2) / (n - 1)
    msc = n * np.sum((col - grand) ** 2) / (k - 1)
    resid = Y - row[:, None] - col[None, :] + grand
    mse = np.sum(resid**2) / ((n - 1) * (k - 1))
    return float(msr), float(msc), float(mse)


def _icc21(msr, msc, mse, n, k) -> float:
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def _f_interval(msr, msc, mse, n, k, icc, confidence) -> tuple[float, float]:
    # McGraw & Wong (1996), case 2A, single measure
    alpha = 1.0 - confidence
    if mse == 0.0 and msc == 0.0:
        return 1.0, 1.0
    a = k * icc / (n * (1.0 - icc))
    b = 1.0 + k * icc * (n - 1) / (n * (1.0 - icc))
    v = (a * msc + b * mse) ** 2 / ((a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1)))
    f_low = stats.f.ppf(1.0 - alpha / 2.0, n - 1, v)
    f_high = stats.f.ppf(1.0 - alpha / 2.0, v, n - 1)
    low = n * (msr - f_low * mse) / (f_low * (k * msc + (k * n - k - n) * mse) + n * msr)
    high = n * (f_high * msr - mse) / (k * msc + (k * n - k - n) * mse + n * f_high * msr)
    return float(low), float(high)


def icc(
    pairs,
    b=None,
    confidence: float = 0.95,
    ci_method: str = "F",
    n_boot: int = 2000,
    seed: int = 0,
) -> IccResult:
    """Two-way random effects, absolute agreement, single-measure ICC.

    ``ci_method="bootstrap"`` swaps the F-distribution interval for a
    percentile bootstrap over subjects.
    """
    p = _as_pairs(pairs, b)
    Y = p.matrix()
    n, k = Y.shape
    if n < 3:
        raise ValueError(f"ICC needs at least 3 subjects, got {n}")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    msr, msc, mse = mean_squares(Y)
    if msr <= 0.0:
        raise UndefinedIccError("between-subject variance is zero; ICC is undefined")
    value = 1.0 if (mse == 0.0 and msc == 0.0) else _icc21(msr, msc, mse, n, k)
    if ci_method == "F":
        low, high = _f_interval(msr, msc, mse, n, k, value, confidence)
    elif ci_method == "bootstrap":
        low, high = _bootstrap_interval(Y, confidence, n_boot, seed)
    else:
        raise ValueError(f"unknown ci_method {ci_method!r}")
    return IccResult(value, min(low, value), max(high, value), n, confidence, ci_method=ci_method)


def _bootstrap_interval(Y, confidence, n_boot, seed) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n, k = Y.shape
    values = []
    for _ in range(n_boot):
        sample = Y[rng.integers(0, n, size=n)]
        msr, msc, mse = mean_squares(sample)
        if msr <= 0.0:
            continue
        values.append(1.0 if mse == 0.0 and msc == 0.0 else _icc21(msr, msc, mse, n, k))
    if not values:
        raise UndefinedIccError("every bootstrap resample had zero between-subject variance")
    alpha = 1.0 - confidence
    low, high = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(low), float(high)


@dataclass
class Comparison:
    source_a: str
    source_b: str
    icc: IccResult
    mae: float
    std: float
    n_subjects: int


@dataclass
class MetricsReport:
    comparisons: list
    config: dict = field(default_factory=dict)

    def row(self, source_a: str, source_b: str) -> Comparison:
        for c in self.comparisons:
            if {c.source_a, c.source_b} == {source_a, source_b}:
                return c
        raise KeyError(f"no comparison {source_a} vs {source_b}")

    def to_dict(self) -> dict:
        return {"config": self.config, "comparisons": [asdict(c) for c in self.comparisons]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = f"{'Comparison':<28} {'ICC [CI]':<26} {'MAE +/- STD':<16} n"
        lines = [head, "-" * len(head)]
        for c in self.comparisons:
            pct = int(round(100 * c.icc.confidence))
            ci = f"{c.icc.value:.3f} [{c.icc.ci_low:.2f}, {c.icc.ci_high:.2f}]"
            lines.append(
                f"{c.source_a + ' vs ' + c.source_b:<28} {ci:<26} {f'{c.mae:.2f} +/- {c.std:.2f}':<16} {c.n_subjects}"
            )
        lines.append(f"(ICC(2,1), {pct if self.comparisons else 95}% CI)")
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        j = out / f"{stem}.json"
        t = out / f"{stem}.txt"
        j.write_text(self.to_json() + "\n")
        t.write_text(self.to_text())
        return j, t


def compare(a: Mapping, b: Mapping, name_a: str, name_b: str, confidence=0.95, ci_method="F") -> Comparison:
    pairs = RatingPairs.from_tables(a, b, name_a, name_b)
    m, s = mae_std(pairs)
    return Comparison(name_a, name_b, icc(pairs, confidence=confidence, ci_method=ci_method), m, s, len(pairs))


def build_report(
    model_scores: Mapping,
    rater_tables: Mapping[str, Mapping],
    confidence: float = 0.95,
    model_name: str = "model",
    ci_method: str = "F",
    config: Optional[dict] = None,
) -> MetricsReport:
    """Model vs each rater, then every rater pair, in the order given."""
    rows = [compare(model_scores, table, model_name, name, confidence, ci_method) for name, table in rater_tables.items()]
    for (na, ta), (nb, tb) in itertools.combinations(rater_tables.items(), 2):
        rows.append(compare(ta, tb, na, nb, confidence, ci_method))
    cfg = {"confidence": confidence, "ci_method": ci_method, "variant": "ICC(2,1)"}
    cfg.update(config or {})
    return MetricsReport(rows, cfg)


def read_rating_csv(path: str | Path) -> dict:
    """``subject_id,score`` rows -> {subject_id: score}."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"subject_id", "score"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns subject_id,score")
        for line, row in enumerate(reader, start=2):
            sid = row["subject_id"]
            if sid in out:
                raise ValueError(f"{path}:{line}: duplicate subject {sid!r}")
            try:
                out[sid] = float(row["score"])
            except ValueError:
                raise ValueError(f"{path}:{line}: score {row['score']!r} is not a number") from None
    return out


def write_rating_csv(path: str | Path, scores: Mapping) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "score"])
        for sid in sorted(scores):
            w.writerow([sid, repr(float(scores[sid]))])
    return path
