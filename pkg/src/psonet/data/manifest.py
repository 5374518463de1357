"""Dataset manifests: JSON I/O, validation, patient-level splits and visit assembly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..pasi import REGIONS, PasiValidationError, Region, SeverityComponents, total_pasi
from .images import RegionalImageSet, assemble_region_set, read_rgb

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: str
    patient_id: str
    visit_id: str
    region: Region
    slot_index: int
    crop_index: Optional[int] = None

    @property
    def visit_key(self) -> str:
        return visit_key(self.patient_id, self.visit_id)


def visit_key(patient_id: str, visit_id: str) -> str:
    return f"{patient_id}/{visit_id}"


def split_key(key: str) -> tuple[str, str]:
    patient, _, visit = key.partition("/")
    return patient, visit


@dataclass
class VisitSample:
    patient_id: str
    visit_id: str
    region_sets: dict
    labels: Optional[dict] = None
    truth_components: Optional[dict] = None

    @property
    def key(self) -> str:
        return visit_key(self.patient_id, self.visit_id)

    def regional_labels(self) -> np.ndarray:
        return np.array([self.labels[r.value] for r in REGIONS], dtype=np.float64)


@dataclass
class DatasetManifest:
    records: list
    labels: dict
    split: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)
    truth: dict = field(default_factory=dict)

    @property
    def patients(self) -> list[str]:
        ids = {r.patient_id for r in self.records}
        ids.update(split_key(k)[0] for k in self.labels)
        return sorted(ids)

    def visits(self) -> list[str]:
        keys = {r.visit_key for r in self.records}
        keys.update(self.labels)
        return sorted(keys)

    def records_for(self, key: str, region: Region | str | None = None) -> list[ImageRecord]:
        region = Region.parse(region) if region is not None else None
        out = [r for r in self.records if r.visit_key == key and (region is None or r.region is region)]
        return sorted(out, key=lambda r: (REGIONS.index(r.region), r.slot_index))

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, patients: Iterable[str]) -> "DatasetManifest":
        keep = set(patients)
        return DatasetManifest(
            records=[r for r in self.records if r.patient_id in keep],
            labels={k: v for k, v in self.labels.items() if split_key(k)[0] in keep},
            split={p: s for p, s in self.split.items() if p in keep},
            root=self.root,
            truth={k: v for k, v in self.truth.items() if split_key(k)[0] in keep},
        )

    def split_subset(self, name: str) -> "DatasetManifest":
        if not self.split:
            raise ManifestError("manifest carries no split assignment")
        return self.subset(p for p, s in self.split.items() if s == name)

    def total_labels(self, keys: Sequence[str] | None = None) -> np.ndarray:
        keys = self.visits() if keys is None else keys
        return np.array([self.labels[k]["total"] for k in keys], dtype=np.float64)

    def to_dict(self) -> dict:
        doc = {
            "patients": self.patients,
            "records": [
                {
                    "path": r.path,
                    "patient_id": r.patient_id,
                    "visit_id": r.visit_id,
                    "region": r.region.value,
                    "slot": r.slot_index,
                }
                for r in self.records
            ],
            "labels": {k: dict(v) for k, v in sorted(self.labels.items())},
            "split": dict(sorted(self.split.items())),
        }
        if self.truth:
            doc["truth"] = {k: dict(v) for k, v in sorted(self.truth.items())}
        return doc

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n")
        return path


def _field(obj: dict, name: str, where: str):
    if name not in obj:
        raise ManifestError(f"{where}: missing field {name!r}")
    return obj[name]


def _parse_labels(raw, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ManifestError(f"{where}: label block must be an object")
    out = {}
    for name in [r.value for r in REGIONS] + ["total"]:
        if name not in raw:
            continue
        value = raw[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ManifestError(f"{where}.{name}: expected a finite number, got {value!r}")
        if not 0.0 <= value <= 72.0:
            raise ManifestError(f"{where}.{name}: {value} outside [0, 72]")
        out[name] = float(value)
    if "total" not in out:
        if all(r.value in out for r in REGIONS):
            out["total"] = total_pasi({r: out[r.value] for r in REGIONS})
        else:
            raise ManifestError(f"{where}: needs 'total' or all four regional labels")
    elif all(r.value in out for r in REGIONS):
        expected = total_pasi({r: out[r.value] for r in REGIONS})
        if abs(expected - out["total"]) > 1e-6:
            raise ManifestError(f"{where}: total {out['total']} inconsistent with regional labels ({expected})")
    return out


def manifest_from_dict(doc: dict, root: str | Path = ".", check_files: bool = True) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    root = Path(root)
    records = []
    seen = set()
    for i, raw in enumerate(_field(doc, "records", "manifest")):
        where = f"records[{i}]"
        if not isinstance(raw, dict):
            raise ManifestError(f"{where}: expected an object")
        try:
            region = Region.parse(_field(raw, "region", where))
        except PasiValidationError as exc:
            raise ManifestError(f"{where}.region: {exc}") from None
        slot = _field(raw, "slot", where)
        if isinstance(slot, bool) or not isinstance(slot, int):
            raise ManifestError(f"{where}.slot: expected an integer, got {slot!r}")
        if not 0 <= slot < region.image_count:
            raise ManifestError(
                f"{where}.slot: {slot} outside 0..{region.image_count - 1} for region {region.value}"
            )
        rec = ImageRecord(
            path=str(_field(raw, "path", where)),
            patient_id=str(_field(raw, "patient_id", where)),
            visit_id=str(_field(raw, "visit_id", where)),
            region=region,
            slot_index=slot,
        )
        ident = (rec.patient_id, rec.visit_id, region, slot)
        if ident in seen:
            raise ManifestError(
                f"{where}: duplicate slot {slot} for {rec.visit_key} region {region.value}"
            )
        seen.add(ident)
        records.append(rec)

    labels = {}
    for key, block in (doc.get("labels") or {}).items():
        if "/" not in key:
            raise ManifestError(f"labels[{key!r}]: key must be '<patient>/<visit>'")
        labels[key] = _parse_labels(block, f"labels[{key!r}]")

    imaged = {r.visit_key for r in records}
    for key in labels:
        if key not in imaged:
            raise ManifestError(f"labels[{key!r}]: labeled visit has no images")

    split = {}
    for pid, name in (doc.get("split") or {}).items():
        if name not in SPLITS:
            raise ManifestError(f"split[{pid!r}]: {name!r} is not one of {SPLITS}")
        split[str(pid)] = name

    truth = {}
    for key, block in (doc.get("truth") or {}).items():
        try:
            truth[key] = {Region.parse(r).value: list(v) for r, v in block.items()}
            for v in truth[key].values():
                SeverityComponents(*v)
        except (PasiValidationError, TypeError) as exc:
            raise ManifestError(f"truth[{key!r}]: {exc}") from None

    m = DatasetManifest(records=records, labels=labels, split=split, root=root, truth=truth)
    if check_files:
        for rec in records:
            if not m.resolve(rec).is_file():
                raise ManifestError(f"image file not found: {m.resolve(rec)}")
    return m


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest; relative image paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    return manifest_from_dict(doc, root=path.parent, check_files=check_files)


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items, at least one per split."""
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    if n < len(ratios):
        raise ValueError(f"need at least {len(ratios)} patients to split, got {n}")
    exact = [n * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] = 1
    return counts


def split_by_patient(
    manifest: DatasetManifest, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Assign whole patients to train/val/test.

    The returned manifests each carry the full assignment in ``split``
    restricted to their own patients.
    """
    patients = manifest.patients
    counts = split_counts(len(patients), ratios)
    order = np.random.default_rng(seed).permutation(len(patients))
    assignment = {}
    start = 0
    for name, c in zip(SPLITS, counts):
        for idx in order[start : start + c]:
            assignment[patients[idx]] = name
        start += c
    full = DatasetManifest(
        records=manifest.records, labels=manifest.labels, split=assignment, root=manifest.root, truth=manifest.truth
    )
    return tuple(full.split_subset(name) for name in SPLITS)


def with_split(manifest: DatasetManifest, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetManifest:
    parts = split_by_patient(manifest, ratios, seed)
    assignment = {}
    for part in parts:
        assignment.update(part.split)
    return DatasetManifest(manifest.records, manifest.labels, assignment, manifest.root, manifest.truth)


def load_visit(
    manifest: DatasetManifest, key: str, mode: str = "low_res", target_size=(224, 224)
) -> VisitSample:
    patient, visit = split_key(key)
    sets = {}
    for region in REGIONS:
        recs = manifest.records_for(key, region)
        pairs = [(r.slot_index, read_rgb(manifest.resolve(r))) for r in recs]
        sources = [(r.patient_id, r.visit_id, region.value, r.slot_index) for r in recs]
        sets[region] = assemble_region_set(pairs, region, mode, tuple(target_size), sources=sources)
    truth = None
    if key in manifest.truth:
        truth = {Region.parse(r): SeverityComponents(*v) for r, v in manifest.truth[key].items()}
    return VisitSample(patient, visit, sets, manifest.labels.get(key), truth)


def load_visits(manifest: DatasetManifest, mode: str = "low_res", target_size=(224, 224)) -> list[VisitSample]:
    return [load_visit(manifest, key, mode, target_size) for key in manifest.visits()]
