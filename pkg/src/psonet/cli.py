"""Command-line entry point: ``psonet synth | train | eval | infer | explain``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .data.images import MODES, read_rgb
from .data.manifest import ManifestError, load_manifest, load_visit, load_visits, with_split
from .data.synthetic import SyntheticSpec, SyntheticSpecError, generate_synthetic_dataset
from .metrics import SubjectMismatchError, UndefinedIccError, build_report, read_rating_csv, write_rating_csv
from .model import CheckpointError, EncoderConfig, ModelConfig, ShapeError, load_arrays, load_model
from .pasi import REGIONS, PasiValidationError, Region, total_pasi
from .training import TrainConfig, fit, predict_arrays
from .validation import check_visits

log = logging.getLogger("psonet")


class ConfigError(ValueError):
    pass


PROFILES = {
    "desk": {
        "model": {"encoder": {"variant": "tiny_conv", "base_width": 16, "input_size": [64, 64]}},
        "train": {"learning_rate": 1e-3, "epochs": 30},
    },
    "full": {
        "model": {"encoder": {"variant": "tiny_conv", "base_width": 96, "input_size": [224, 224]}},
        "train": {"learning_rate": 1e-6, "epochs": 100},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve_run_config(args) -> dict:
    """Defaults <- profile <- config file <- command-line flags."""
    file_cfg = load_config_file(getattr(args, "config", None))
    profile = getattr(args, "profile", None) or file_cfg.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r}")
    cfg = _merge({"profile": profile, "data": {"split_ratios": [0.7, 0.1, 0.2], "split_seed": 0}, "train": {}, "model": {}},
                 PROFILES[profile])
    cfg = _merge(cfg, file_cfg)
    if getattr(args, "manifest", None):
        cfg["data"]["manifest"] = str(args.manifest)
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["data"]["split_seed"] = args.seed
    if getattr(args, "mode", None):
        cfg["train"]["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    try:
        TrainConfig(**cfg["train"])
        ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return cfg


def echo_config(out: Path, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    doc = load_config_file(args.spec)
    doc = doc.get("synth", doc)
    if args.seed is not None:
        doc["rng_seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(doc)
    except SyntheticSpecError as exc:
        raise ConfigError(f"synthetic spec field {exc.field}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from None
    out = Path(args.out)
    manifest = generate_synthetic_dataset(spec, out)
    echo_config(out, {"synth": spec.to_dict()})
    totals = manifest.total_labels()
    path = out / "manifest.json"
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    print(f"manifest: {path}")
    print(f"patients: {len(manifest.patients)}  visits: {len(manifest.visits())}  images: {len(manifest.records)}")
    print(
        "total PASI: mean {:.2f}  median {:.2f}  max {:.2f}  share > 10: {:.2f}".format(
            totals.mean(), float(np.median(totals)), totals.max(), float((totals > 10).mean())
        )
    )
    print(f"sha256: {digest}")
    return 0


def _load_split_manifest(cfg: dict):
    manifest = load_manifest(cfg["data"]["manifest"])
    if not manifest.split:
        manifest = with_split(manifest, cfg["data"]["split_ratios"], cfg["data"]["split_seed"])
    return manifest


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if "manifest" not in cfg["data"]:
        raise ConfigError("data.manifest: no manifest given (--manifest or config file)")
    out = Path(args.out)
    echo_config(out, cfg)
    tcfg = TrainConfig(**cfg["train"])
    mcfg = ModelConfig.from_dict(cfg["model"])
    manifest = _load_split_manifest(cfg)
    (out / "split.json").write_text(json.dumps(manifest.split, indent=1, sort_keys=True) + "\n")
    size = mcfg.encoder.input_size
    train = check_visits(load_visits(manifest.split_subset("train"), tcfg.mode, size), require_labels=True)
    val = check_visits(load_visits(manifest.split_subset("val"), tcfg.mode, size), require_labels=True)
    log.info("train visits %d, val visits %d, set capacity HN=%d", len(train), len(val), train.images["HN"].shape[1])
    result = fit(train, val, tcfg, mcfg, out_dir=out, resume=args.resume)
    with open(out / "sample_weights.csv", "w") as fh:
        fh.write("subject_id,total,weight\n")
        for k, t, w in zip(result.weights.keys, train.totals, result.weights.weights):
            fh.write(f"{k},{float(t)!r},{float(w)!r}\n")
    # the split travels with the best checkpoint so eval/explain need only it
    header, arrays = load_arrays(out / "best.npz")
    header["meta"]["split"] = manifest.split
    header["meta"]["manifest"] = str(Path(cfg["data"]["manifest"]).resolve())
    header.pop("format", None)
    from .model import save_arrays

    save_arrays(out / "best.npz", arrays, header)
    print(f"checkpoint: {out / 'best.npz'}")
    print(f"metrics: {out / 'metrics.csv'} ({len(result.log)} epochs, best epoch {result.state.best_epoch})")
    return 0


def _checkpoint(path):
    model, header, _ = load_model(path)
    model.eval()
    mode = header.get("train_config", {}).get("mode", "low_res")
    return model, header, mode


def _split_from(header, manifest):
    split = header.get("meta", {}).get("split") or manifest.split
    if not split:
        raise ConfigError("checkpoint carries no split and the manifest has none")
    manifest.split = split
    return manifest


def _manifest_for(args, header):
    path = args.manifest or header.get("meta", {}).get("manifest")
    if not path:
        raise ConfigError("no manifest given and none recorded in the checkpoint")
    return load_manifest(path)


def cmd_eval(args) -> int:
    model, header, mode = _checkpoint(args.checkpoint)
    manifest = _split_from(header, _manifest_for(args, header))
    part = manifest.split_subset(args.split)
    data = check_visits(load_visits(part, mode, model.config.encoder.input_size))
    regional, total = predict_arrays(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_scores = dict(zip(data.keys, total.tolist()))
    with open(out / "predictions.csv", "w") as fh:
        fh.write("subject_id," + ",".join(r.value for r in REGIONS) + ",total\n")
        for k, row, t in zip(data.keys, regional, total):
            fh.write(k + "," + ",".join(repr(float(v)) for v in row) + f",{float(t)!r}\n")
    write_rating_csv(out / "model_scores.csv", model_scores)
    raters = {}
    if args.truth_as_rater:
        raters["truth"] = {k: part.labels[k]["total"] for k in data.keys}
    for spec in args.rater or []:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        raters[name] = read_rating_csv(path)
    if not raters:
        raise ConfigError("no rater tables given (--rater NAME=path or --truth-as-rater)")
    report = build_report(model_scores, raters, confidence=args.confidence,
                          config={"checkpoint": str(args.checkpoint), "split": args.split, "mode": mode})
    j, t = report.save(out)
    sys.stdout.write(report.to_text())
    print(f"report: {j}")
    return 0


def cmd_explain(args) -> int:
    from .interpret import explain_set, save_map
    from .data.images import denormalize_image

    model, header, mode = _checkpoint(args.checkpoint)
    manifest = _manifest_for(args, header)
    if args.visit not in manifest.visits():
        raise ConfigError(f"unknown visit {args.visit!r}")
    regions = list(REGIONS) if args.region == "all" else [Region.parse(args.region)]
    visit = load_visit(manifest, args.visit, mode, model.config.encoder.input_size)
    out = Path(args.out)
    written = 0
    for region in regions:
        s = visit.region_sets[region]
        if s.n_valid == 0:
            raise ConfigError(f"visit {args.visit} has no {region.value} images")
        exp = explain_set(s, model.region[region.value], top_k=args.top_k)
        rdir = out / region.value
        for rank, m in enumerate(exp.maps, start=1):
            slot = exp.ranking[rank - 1][0]
            image = np.clip(np.rint(denormalize_image(s.images[slot])), 0, 255).astype(np.uint8)
            m.score = exp.set_score
            save_map(rdir, f"rank{rank:02d}_slot{slot:02d}", image, m, alpha=args.alpha)
            written += 1
        print(f"{region.value}: score {exp.set_score:.4f}, {len(exp.maps)} map(s) -> {rdir}")
        if exp.notice:
            print(f"{region.value}: {exp.notice}")
    return 0


def assemble_directory(visit_dir: Path, mode: str, size) -> dict:
    """Region sets from ``<visit>/<REGION>/*.png`` (slot order = sorted filenames)."""
    from .data.images import assemble_region_set

    sets = {}
    for region in REGIONS:
        d = visit_dir / region.value
        files = sorted(d.glob("*.png")) if d.is_dir() else []
        if len(files) > region.image_count:
            raise ConfigError(f"{d}: {len(files)} images, at most {region.image_count} allowed")
        pairs = [(i, read_rgb(f)) for i, f in enumerate(files)]
        sets[region] = assemble_region_set(pairs, region, mode, tuple(size), sources=[str(f) for f in files])
    if all(s.n_valid == 0 for s in sets.values()):
        raise ConfigError(f"{visit_dir}: no images found in any region folder")
    empty = [r.value for r, s in sets.items() if s.n_valid == 0]
    if empty:
        raise ConfigError(
            f"{visit_dir}: no images for region(s) {', '.join(empty)}; "
            "a fully masked set cannot be scored (attention needs at least one image)"
        )
    return sets


def cmd_infer(args) -> int:
    import torch

    model, header, mode = _checkpoint(args.checkpoint)
    sets = assemble_directory(Path(args.images), mode, model.config.encoder.input_size)
    batch = {
        r.value: (torch.from_numpy(sets[r].images[None]), torch.from_numpy(sets[r].valid_mask[None])) for r in REGIONS
    }
    with torch.no_grad():
        regional, _, attention = model(batch)
    scores = {r.value: float(regional[0, i]) for i, r in enumerate(REGIONS)}
    result = dict(scores, total=total_pasi(scores))
    text = json.dumps(result, indent=2, sort_keys=False)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scores.json").write_text(text + "\n")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psonet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic lesion dataset")
    s.add_argument("--spec", help="YAML/JSON synthetic spec (fields of SyntheticSpec)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="split, weight and fit")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--profile", choices=sorted(PROFILES))
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="resume from a last.npz training state")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="agreement report on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--rater", action="append", help="NAME=path.csv with subject_id,score")
    e.add_argument("--truth-as-rater", action="store_true")
    e.add_argument("--confidence", type=float, default=0.95)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="score one visit directory")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--images", required=True, help="directory with HN/ UE/ LE/ TR/ subfolders")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("explain", help="Grad-RAM overlays for the top-attention images")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest")
    x.add_argument("--visit", required=True, help="<patient>/<visit>")
    x.add_argument("--region", default="all")
    x.add_argument("--top-k", type=int, default=1)
    x.add_argument("--alpha", type=float, default=0.5)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)
    return p


CONFIG_ERRORS = (
    ConfigError,
    ManifestError,
    PasiValidationError,
    ShapeError,
    SubjectMismatchError,
    UndefinedIccError,
    CheckpointError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
