"""Procedural lesion images with PASI ground truth known by construction.

Every region image is bare skin of one patient-specific tone. Lesions are
elliptical patches whose look is driven by three integer levels 0..4:

* redness blends the patch toward a red hue (erythema),
* a directional shading ramp across the patch fakes relief (induration),
* bright speckles cover a level-dependent share of the patch (desquamation).

The area score comes from the union of lesion pixels summed over all images
of the region, divided by the summed skin pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..pasi import REGIONS, Region, SeverityComponents, area_fraction_to_score, regional_pasi, total_pasi
from .images import write_rgb
from .manifest import DatasetManifest, ImageRecord, visit_key

DEFAULT_PALETTE = [
    (244, 208, 177),
    (231, 188, 145),
    (209, 163, 120),
    (187, 128, 88),
    (141, 85, 54),
    (96, 62, 42),
]

LESION_RED = np.array([196.0, 48.0, 52.0])
SCALE_WHITE = np.array([238.0, 236.0, 228.0])


class SyntheticSpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _default_counts():
    # up to three lesions per photo at full activity
    return {r.value: [0, 3 * r.image_count] for r in REGIONS}


@dataclass
class SyntheticSpec:
    patients: int = 120
    visits_per_patient: tuple = (2, 2)
    image_size: tuple = (64, 64)
    lesion_count_range: dict = field(default_factory=_default_counts)
    lesion_radius_range: tuple = (0.15, 0.42)
    erythema_range: tuple = (0, 4)
    induration_range: tuple = (0, 4)
    desquamation_range: tuple = (0, 4)
    skin_palette: list = field(default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])
    rng_seed: int = 0
    # probability that a region of a fully inactive visit still carries lesions
    baseline_involvement: float = 0.3
    pixel_noise: float = 4.0

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise SyntheticSpecError(sorted(unknown)[0], "unknown field")
        spec = cls(**doc)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visits_per_patient"] = list(self.visits_per_patient)
        d["image_size"] = list(self.image_size)
        d["lesion_radius_range"] = list(self.lesion_radius_range)
        for name in ("erythema_range", "induration_range", "desquamation_range"):
            d[name] = list(d[name])
        return d

    def validate(self) -> None:
        def pair(name, lo_bound=None, hi_bound=None, integer=True):
            value = getattr(self, name)
            try:
                lo, hi = value
            except (TypeError, ValueError):
                raise SyntheticSpecError(name, f"expected a [low, high] pair, got {value!r}") from None
            if integer and (int(lo) != lo or int(hi) != hi):
                raise SyntheticSpecError(name, "bounds must be integers")
            if lo > hi:
                raise SyntheticSpecError(name, f"empty range [{lo}, {hi}]")
            if lo_bound is not None and lo < lo_bound or hi_bound is not None and hi > hi_bound:
                raise SyntheticSpecError(name, f"range [{lo}, {hi}] outside [{lo_bound}, {hi_bound}]")

        if int(self.patients) != self.patients or self.patients < 1:
            raise SyntheticSpecError("patients", f"must be a positive integer, got {self.patients!r}")
        pair("visits_per_patient", 1, None)
        h, w = self.image_size
        if h < 8 or w < 8 or h % 2 or w % 2:
            raise SyntheticSpecError("image_size", f"sides must be even and >= 8, got {self.image_size}")
        pair("lesion_radius_range", 0.01, 1.0, integer=False)
        for name in ("erythema_range", "induration_range", "desquamation_range"):
            pair(name, 0, 4)
        if set(self.lesion_count_range) != {r.value for r in REGIONS}:
            raise SyntheticSpecError("lesion_count_range", "needs exactly the keys HN, UE, LE, TR")
        for code, rng in self.lesion_count_range.items():
            lo, hi = rng
            if int(lo) != lo or int(hi) != hi or lo < 0 or lo > hi:
                raise SyntheticSpecError(f"lesion_count_range.{code}", f"invalid range {rng!r}")
        if not self.skin_palette:
            raise SyntheticSpecError("skin_palette", "empty palette")
        for rgb in self.skin_palette:
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise SyntheticSpecError("skin_palette", f"bad RGB triple {rgb!r}")
        if not 0.0 <= self.baseline_involvement <= 1.0:
            raise SyntheticSpecError("baseline_involvement", "must lie in [0, 1]")


@dataclass
class Lesion:
    slot: int
    center: tuple  # (row, col) in pixels
    radii: tuple  # (semi-axis along rows, along cols) in pixels
    angle: float

    def mask(self, size) -> np.ndarray:
        h, w = size
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = yy + 0.5 - self.center[0], xx + 0.5 - self.center[1]
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dy * c + dx * s) / self.radii[0]
        v = (-dy * s + dx * c) / self.radii[1]
        return u * u + v * v <= 1.0


def skin_image(rng: np.random.Generator, tone, size, noise: float = 4.0) -> np.ndarray:
    """Float (H, W, 3) skin background with gentle illumination falloff and grain."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gy, gx = rng.uniform(-0.06, 0.06, size=2)
    light = 1.0 + gy * (yy - 0.5) + gx * (xx - 0.5) + rng.uniform(-0.03, 0.03)
    img = np.asarray(tone, dtype=np.float64)[None, None, :] * light[..., None]
    return img + rng.normal(0.0, noise, size=(h, w, 3))


def paint_lesion(
    img: np.ndarray, mask: np.ndarray, lesion: Lesion, levels, rng: np.random.Generator
) -> None:
    """Draw one lesion in place. Levels are (redness, relief, scaling) in 0..4."""
    redness, relief, scaling = levels
    if not mask.any():
        return
    region = img[mask]
    if redness:
        alpha = 0.16 * redness
        region = (1.0 - alpha) * region + alpha * LESION_RED
    if relief:
        h, w = mask.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy = (yy + 0.5 - lesion.center[0]) / lesion.radii[0]
        dx = (xx + 0.5 - lesion.center[1]) / lesion.radii[1]
        ramp = np.clip(-(dy + dx) / math.sqrt(2.0), -1.0, 1.0)[mask]
        region = region * (1.0 + 0.11 * relief * ramp)[:, None]
    if scaling:
        speckle = rng.random(region.shape[0]) < 0.09 * scaling
        region[speckle] = 0.2 * region[speckle] + 0.8 * SCALE_WHITE
    img[mask] = region


def region_truth(levels, lesion_masks, skin_pixels: int) -> SeverityComponents:
    """Ground-truth sub-scores from drawing levels and the per-image union masks."""
    covered = int(sum(int(np.count_nonzero(m)) for m in lesion_masks))
    fraction = covered / float(skin_pixels)
    area = area_fraction_to_score(min(fraction, 1.0))
    return SeverityComponents(int(levels[0]), int(levels[1]), int(levels[2]), area)


def render_region(
    rng: np.random.Generator,
    region: Region,
    levels,
    lesions: list,
    tone,
    size,
    noise: float = 4.0,
):
    """Render all ``region.image_count`` photos; returns (images, union masks, truth)."""
    images, masks = [], []
    for slot in range(region.image_count):
        img = skin_image(rng, tone, size, noise)
        union = np.zeros(size, dtype=bool)
        for lesion in (l for l in lesions if l.slot == slot):
            m = lesion.mask(size)
            paint_lesion(img, m, lesion, levels, rng)
            union |= m
        images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        masks.append(union)
    truth = region_truth(levels, masks, region.image_count * size[0] * size[1])
    return images, masks, truth


def random_lesion(rng: np.random.Generator, slot: int, size, radius_range) -> Lesion:
    h, w = size
    side = min(h, w)
    r0, r1 = (rng.uniform(*radius_range) * side for _ in range(2))
    center = (rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0.1 * w, 0.9 * w))
    return Lesion(slot=slot, center=center, radii=(r0, r1), angle=float(rng.uniform(0, math.pi)))


def _level(rng, activity: float, bounds) -> int:
    lo, hi = bounds
    return int(np.clip(round(activity * 4 + rng.normal(0.0, 0.7)), lo, hi))


def sample_region(rng: np.random.Generator, spec: SyntheticSpec, region: Region, activity: float):
    lo, hi = spec.lesion_count_range[region.value]
    involved = rng.random() < spec.baseline_involvement + (1.0 - spec.baseline_involvement) * activity
    if involved and hi > 0:
        n = int(round(hi * activity * rng.uniform(0.6, 1.0)))
        n = int(np.clip(n, max(lo, 1), hi))
    else:
        n = int(lo)
    levels = [
        _level(rng, activity, spec.erythema_range),
        _level(rng, activity, spec.induration_range),
        _level(rng, activity, spec.desquamation_range),
    ]
    # involved skin is at least faintly red
    if n and levels[0] == 0 and spec.erythema_range[1] > 0:
        levels[0] = 1
    lesions = [
        random_lesion(rng, int(rng.integers(region.image_count)), spec.image_size, spec.lesion_radius_range)
        for _ in range(n)
    ]
    return levels, lesions


def generate_synthetic_dataset(spec: SyntheticSpec, output_dir: str | Path) -> DatasetManifest:
    """Write PNGs plus ``manifest.json`` under ``output_dir`` and return the manifest.

    Output is a pure function of ``spec``: each patient draws from its own
    child seed, so files and labels are byte-identical across runs.
    """
    spec.validate()
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    size = tuple(int(s) for s in spec.image_size)
    width = max(4, len(str(spec.patients)))
    children = np.random.SeedSequence(spec.rng_seed).spawn(int(spec.patients))
    records, labels, truth = [], {}, {}
    for p, seq in enumerate(children):
        rng = np.random.default_rng(seq)
        pid = f"P{p:0{width}d}"
        tone = spec.skin_palette[int(rng.integers(len(spec.skin_palette)))]
        base = float(rng.beta(1.2, 1.6))
        lo, hi = spec.visits_per_patient
        for v in range(int(rng.integers(lo, hi + 1))):
            vid = f"V{v + 1}"
            key = visit_key(pid, vid)
            activity = float(np.clip(base + rng.normal(0.0, 0.12), 0.0, 1.0))
            vdir = out / "images" / pid / vid
            vdir.mkdir(parents=True, exist_ok=True)
            regional, comps = {}, {}
            for region in REGIONS:
                levels, lesions = sample_region(rng, spec, region, activity)
                images, _, comp = render_region(rng, region, levels, lesions, tone, size, spec.pixel_noise)
                for slot, img in enumerate(images):
                    name = f"{region.value}_{slot:02d}.png"
                    write_rgb(vdir / name, img)
                    records.append(
                        ImageRecord(
                            path=f"images/{pid}/{vid}/{name}",
                            patient_id=pid,
                            visit_id=vid,
                            region=region,
                            slot_index=slot,
                        )
                    )
                regional[region.value] = regional_pasi(comp)
                comps[region.value] = list(comp.as_tuple())
            labels[key] = dict(regional, total=total_pasi(regional))
            truth[key] = comps
    manifest = DatasetManifest(records=records, labels=labels, root=out, truth=truth)
    manifest.save(out / "manifest.json")
    return manifest


def single_lesion_image(
    rng: np.random.Generator,
    size=(64, 64),
    levels=(3, 3, 3),
    tone=None,
    radius_range=(0.14, 0.2),
    center_box=None,
):
    """One photo holding exactly one lesion; returns (uint8 image, lesion mask).

    ``center_box`` = ((row_lo, row_hi), (col_lo, col_hi)) in pixels restricts
    where the lesion is centred.
    """
    tone = tone if tone is not None else DEFAULT_PALETTE[int(rng.integers(len(DEFAULT_PALETTE)))]
    h, w = size
    side = min(h, w)
    if center_box is None:
        center_box = ((0.25 * h, 0.75 * h), (0.25 * w, 0.75 * w))
    center = (rng.uniform(*center_box[0]), rng.uniform(*center_box[1]))
    r0, r1 = (rng.uniform(*radius_range) * side for _ in range(2))
    lesion = Lesion(slot=0, center=center, radii=(r0, r1), angle=float(rng.uniform(0, math.pi)))
    img = skin_image(rng, tone, size)
    mask = lesion.mask(size)
    paint_lesion(img, mask, lesion, levels, rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask
