"""Ranked Grad-RAM saliency, overlays and max-attention quartile analysis.

Explaining a set is two-step: one inference over the whole set ranks images
by attention weight, then each chosen image is pushed alone (a one-image set,
so its attention weight is exactly 1) through the regional model and the
regression output is back-propagated to the encoder's final spatial map.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import stats

from .data.images import RegionalImageSet
from .model import AttentionOutput, RegionalModel, attention_pool
from .pasi import REGIONS, Region

GRID_SIZE = (224, 224)


class GradRamError(RuntimeError):
    pass


@dataclass
class GradRamMap:
    grid: np.ndarray  # (224, 224) in [0, 1]
    source: object
    score: float
    attention_weight: float = 1.0
    raw: Optional[np.ndarray] = None  # channel-weighted map at encoder resolution

    def sidecar(self) -> dict:
        return {
            "source": list(self.source) if isinstance(self.source, tuple) else self.source,
            "score": self.score,
            "attention_weight": self.attention_weight,
            "grid_minmax": [float(self.grid.min()), float(self.grid.max())],
        }


def rank_attention(output, mask=None) -> list[tuple[int, float]]:
    """Valid slots as (slot, weight), heaviest first; ties keep slot order.

    ``output`` is an :class:`AttentionOutput` for one set, or a 1-d weight
    vector. Slots excluded by ``mask`` (or carrying a -inf logit) are dropped.
    """
    if isinstance(output, AttentionOutput):
        weights = output.weights.detach().cpu().numpy().reshape(-1)
        valid = np.isfinite(output.logits.detach().cpu().numpy().reshape(-1))
    else:
        weights = np.asarray(output, dtype=np.float64).reshape(-1)
        valid = np.ones(weights.shape, dtype=bool)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).reshape(-1)
    slots = [i for i in range(len(weights)) if valid[i]]
    slots.sort(key=lambda i: (-weights[i], i))
    return [(i, float(weights[i])) for i in slots]


def _normalize(grid: torch.Tensor) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    span = float(hi - lo)
    # rounding ripple from upsampling a constant map counts as constant
    tol = 64 * torch.finfo(grid.dtype).eps * max(float(hi.abs()), float(lo.abs()))
    if not np.isfinite(span) or span <= tol or span == 0.0:
        return np.zeros(tuple(grid.shape), dtype=np.float64)
    return ((grid - lo) / (hi - lo)).double().numpy()


def grad_ram(
    image,
    model: RegionalModel,
    signed: bool = False,
    reference: str = "mean",
    size: tuple = GRID_SIZE,
    source=None,
    attention_weight: float = 1.0,
) -> GradRamMap:
    """Gradient regression activation map for one standardized (3, H, W) image.

    Channel weights are the spatially averaged gradients of the head output
    with respect to the final-stage map. The weighted channel sum is taken
    relative to ``reference``: ``"mean"`` subtracts its spatial average,
    ``"zero"`` keeps it as is (textbook Grad-CAM). It is then rectified
    (unless ``signed``), bilinearly upsampled to ``size`` and min-max scaled.

    Global average pooling makes the gradient identical at every location,
    so the map's spatial average is just the linearised score; with the
    zero reference a negative score offset can push every cell below zero
    and rectification then erases the whole map.

    The gradient is taken before the [0, 72] clamp so images scored at the
    floor still get a map; ``score`` is the clamped value.
    """
    if reference not in ("mean", "zero"):
        raise ValueError(f"reference must be 'mean' or 'zero', got {reference!r}")
    x = torch.as_tensor(np.asarray(image), dtype=next(model.parameters()).dtype)
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    was_training = model.training
    model.eval()
    with torch.enable_grad():
        spatial = model.encode(x.unsqueeze(0))
        spatial.retain_grad()
        emb = model.embed_features(spatial)
        att = attention_pool(emb.unsqueeze(0), None, model.attention)
        raw_score = model.head(att.pooled).squeeze()
        model.zero_grad(set_to_none=True)
        raw_score.backward()
    model.train(was_training)
    grad = spatial.grad
    if grad is None or not torch.isfinite(grad).all():
        raise GradRamError("non-finite gradient with respect to the final spatial map")
    with torch.no_grad():
        weights = grad.mean(dim=(2, 3), keepdim=True)
        cam = (weights * spatial).sum(dim=1, keepdim=True)
        if reference == "mean":
            cam = cam - cam.mean()
        if not signed:
            cam = F.relu(cam)
        up = F.interpolate(cam, size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
    score = float(raw_score.detach().clamp(0.0, 72.0)) if model.config.clamp_output else float(raw_score.detach())
    return GradRamMap(
        grid=_normalize(up),
        source=source,
        score=score,
        attention_weight=float(attention_weight),
        raw=cam[0, 0].detach().double().numpy(),
    )


@dataclass
class Explanation:
    maps: list
    ranking: list
    set_score: float
    notice: Optional[str] = None


def explain_set(
    image_set: RegionalImageSet,
    model: RegionalModel,
    top_k: int = 1,
    signed: bool = False,
    hook: Optional[Callable[[str, dict], None]] = None,
    reference: str = "mean",
) -> Explanation:
    """Grad-RAM maps for the ``top_k`` highest-attention images of a set.

    ``hook(event, info)`` is called once with ``"set_inference"`` and once per
    map with ``"backward"``.
    """
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(image_set.images, dtype=dtype).unsqueeze(0)
    mask = torch.as_tensor(image_set.valid_mask).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        out = model(images, mask)
    if hook:
        hook("set_inference", {"region": image_set.region.value, "n_valid": image_set.n_valid})
    ranking = rank_attention(AttentionOutput(*(t[0] for t in out.attention)), image_set.valid_mask)
    notice = None
    if top_k > len(ranking):
        notice = f"top_k={top_k} exceeds {len(ranking)} valid images; truncated"
        warnings.warn(notice, stacklevel=2)
    maps = []
    for slot, weight in ranking[: max(0, top_k)]:
        src = image_set.sources[slot] if image_set.sources and image_set.sources[slot] is not None else slot
        m = grad_ram(
            image_set.images[slot], model, signed=signed, reference=reference, source=src, attention_weight=weight
        )
        if hook:
            hook("backward", {"slot": slot})
        maps.append(m)
    return Explanation(maps=maps, ranking=ranking, set_score=float(out.score[0]), notice=notice)


def colorize(grid: np.ndarray) -> np.ndarray:
    """Map [0, 1] values through the jet colormap to uint8 RGB."""
    from matplotlib import colormaps

    rgba = colormaps["jet"](np.clip(grid, 0.0, 1.0))
    return np.rint(rgba[..., :3] * 255.0).astype(np.uint8)


def overlay(image: np.ndarray, grid: np.ndarray, alpha: float = 0.5, path: str | Path | None = None) -> np.ndarray:
    """Alpha-blend a colorized map over an 8-bit RGB image (map resized to the image)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    g = torch.as_tensor(np.asarray(grid, dtype=np.float64))[None, None]
    g = F.interpolate(g, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    heat = colorize(g)
    out = np.rint((1.0 - alpha) * image.astype(np.float64) + alpha * heat.astype(np.float64)).astype(np.uint8)
    if path is not None:
        Image.fromarray(out, mode="RGB").save(path, format="PNG")
    return out


def save_map(out_dir: str | Path, name: str, image: np.ndarray, m: GradRamMap, alpha: float = 0.5) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png = out / f"{name}.png"
    side = out / f"{name}.json"
    overlay(image, m.grid, alpha, png)
    side.write_text(json.dumps(m.sidecar(), indent=2) + "\n")
    return png, side


@dataclass
class RegionQuartiles:
    boundaries: tuple  # (q25, q50, q75)
    members: list  # (max_attention, label, quartile 1..4)
    degenerate: bool = False
    notice: Optional[str] = None

    def mean_labels(self) -> dict:
        out = {}
        for q in range(1, 5):
            labels = [lab for _, lab, qq in self.members if qq == q]
            if labels:
                out[q] = float(np.mean(labels))
        return out

    def spearman(self) -> float:
        means = self.mean_labels()
        if len(means) < 2:
            return float("nan")
        rho = stats.spearmanr(list(means), list(means.values())).statistic
        return float(rho)


@dataclass
class QuartileTable:
    regions: dict = field(default_factory=dict)

    def to_rows(self) -> list[tuple]:
        rows = []
        for code, rq in self.regions.items():
            for att, lab, q in rq.members:
                rows.append((code, f"Q{q}", att, lab))
        return rows

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "quartile", "max_attention", "label"])
            for row in self.to_rows():
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
        return path


def _quartiles_one(pairs: Sequence[tuple]) -> RegionQuartiles:
    att = np.array([p[0] for p in pairs], dtype=np.float64)
    lab = [float(p[1]) for p in pairs]
    if len(att) < 4:
        lo = float(att.min()) if len(att) else float("nan")
        return RegionQuartiles(
            boundaries=(lo, lo, lo),
            members=[(float(a), l, 1) for a, l in zip(att, lab)],
            degenerate=True,
            notice=f"only {len(att)} sets; single bucket",
        )
    b = tuple(float(v) for v in np.percentile(att, [25, 50, 75]))
    q = 1 + np.searchsorted(np.asarray(b), att, side="left")
    degenerate = not (b[0] < b[1] < b[2])
    return RegionQuartiles(
        boundaries=b,
        members=[(float(a), l, int(qq)) for a, l, qq in zip(att, lab, q)],
        degenerate=degenerate,
        notice="quartile boundaries are not strictly increasing" if degenerate else None,
    )


def attention_quartiles(pairs_by_region: dict) -> QuartileTable:
    """Bucket sets by their max attention weight at the 25/50/75th percentiles, per region.

    ``pairs_by_region`` maps region code -> [(max_attention, regional label), ...].
    A value equal to a boundary falls in the lower quartile.
    """
    table = QuartileTable()
    for code, pairs in pairs_by_region.items():
        code = Region.parse(code).value
        table.regions[code] = _quartiles_one(list(pairs))
        if table.regions[code].notice:
            warnings.warn(f"{code}: {table.regions[code].notice}", stacklevel=2)
    return table


@torch.no_grad()
def max_attention_pairs(model, data) -> dict:
    """Per region, (max attention weight, regional label) for every visit in ``data`` (VisitArrays)."""
    from .training import batch_tensors

    model.eval()
    out = {r.value: [] for r in REGIONS}
    for start in range(0, len(data), 8):
        idx = np.arange(start, min(start + 8, len(data)))
        _, _, attention = model(batch_tensors(data, idx))
        for i, r in enumerate(REGIONS):
            wmax = attention[r.value].weights.max(dim=1).values.double().numpy()
            for j, k in enumerate(idx):
                out[r.value].append((float(wmax[j]), float(data.labels[k, i])))
    return out
