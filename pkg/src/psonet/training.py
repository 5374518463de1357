"""MAE-loss training with weighted visit sampling, checkpointing and resume."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data.sampling import SamplingWeights, compute_sampling_weights
from .model import ModelConfig, PsoNet, init_params, load_arrays, load_state_into, model_state, save_arrays
from .pasi import REGIONS
from .validation import VisitArrays

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_mae", "val_mae", "lr", "wall_seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    mode: str = "low_res"
    seed: int = 0
    target: str = "per_region"
    sampling_threshold: float = 10.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    init_head_bias: bool = True
    # fit the unclamped head output; the clamp then only guards inference
    loss_on_raw: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.mode not in ("low_res", "four_crop"):
            raise ValueError(f"mode must be low_res or four_crop, got {self.mode!r}")
        if self.target not in ("per_region", "absolute"):
            raise ValueError(f"target must be per_region or absolute, got {self.target!r}")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        """Recipe for pretrained 224x224 encoders."""
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Recipe for randomly initialised tiny encoders on 64x64 synthetic data."""
        base = dict(learning_rate=1e-3, epochs=30)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def mae_loss(predictions, targets):
    """Mean absolute error. Tensors stay differentiable; other inputs give a float."""
    as_float = not isinstance(predictions, torch.Tensor)
    p = torch.as_tensor(predictions, dtype=torch.float64) if as_float else predictions
    t = torch.as_tensor(targets, dtype=p.dtype, device=p.device)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    if p.numel() == 0:
        raise ValueError("mae_loss needs at least one element")
    if not (torch.isfinite(p).all() and torch.isfinite(t).all()):
        raise ValueError("mae_loss inputs must be finite")
    loss = (p - t).abs().mean()
    return float(loss) if as_float else loss


def batch_tensors(data: VisitArrays, idx) -> dict:
    return {
        r.value: (torch.from_numpy(data.images[r.value][idx]), torch.from_numpy(data.masks[r.value][idx]))
        for r in REGIONS
    }


def objective(regional: torch.Tensor, total: torch.Tensor, labels: torch.Tensor, target: str) -> torch.Tensor:
    if target == "absolute":
        label_total = labels @ torch.tensor([r.weight for r in REGIONS], dtype=labels.dtype)
        return mae_loss(total, label_total)
    return sum(mae_loss(regional[:, i], labels[:, i]) for i in range(len(REGIONS)))


@torch.no_grad()
def predict_arrays(model: PsoNet, data: VisitArrays, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """(regional (n, 4), total (n,)) in float64."""
    model.eval()
    regional = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        reg, _, _ = model(batch_tensors(data, idx))
        regional.append(reg.double().numpy())
    regional = np.concatenate(regional) if regional else np.zeros((0, 4))
    weights = np.array([r.weight for r in REGIONS])
    return regional, regional @ weights


def evaluate_mae(model: PsoNet, data: VisitArrays) -> float:
    _, total = predict_arrays(model, data)
    return float(np.mean(np.abs(total - data.totals)))


@dataclass
class TrainState:
    model: PsoNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    best_val_mae: float = math.inf
    best_epoch: int = -1
    best_params: Optional[dict] = None
    log: list = field(default_factory=list)

    def param_names(self) -> list[str]:
        return [name for name, _ in self.model.named_parameters()]


def make_optimizer(model: PsoNet, config: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
        foreach=False,
    )


def init_state(model: PsoNet, config: TrainConfig) -> TrainState:
    return TrainState(model=model, optimizer=make_optimizer(model, config), rng=np.random.default_rng(config.seed))


def set_head_bias(model: PsoNet, labels: np.ndarray, target: str) -> None:
    """Start each regional head at the mean training label so early steps refine, not translate."""
    mean_total = float(np.mean(labels @ np.array([r.weight for r in REGIONS])))
    with torch.no_grad():
        for i, r in enumerate(REGIONS):
            value = mean_total if target == "absolute" else float(labels[:, i].mean())
            model.region[r.value].head.bias.fill_(value)


def train_epoch(
    state: TrainState, data: VisitArrays, weights: SamplingWeights, config: TrainConfig
) -> tuple[TrainState, float]:
    """One pass of ``len(data)`` weighted draws; returns (state, total-PASI MAE over the draws)."""
    if data.labels is None:
        raise TrainingError("training visits carry no labels")
    model = state.model
    model.train()
    order = weights.draw(len(data), state.rng)
    label_t = torch.from_numpy(data.labels.astype(np.float32))
    abs_err, seen = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        regional, total, _ = model(batch_tensors(data, idx), raw=config.loss_on_raw)
        labels = label_t[idx]
        finite = bool(torch.isfinite(regional).all())
        loss = objective(regional, total, labels, config.target) if finite else None
        if loss is None or not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at epoch {state.epoch} batch {start // config.batch_size} (visits {[data.keys[i] for i in idx]})"
            )
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        with torch.no_grad():
            label_total = labels @ torch.tensor([r.weight for r in REGIONS])
            reported = total.detach().clamp(0.0, 72.0)
            abs_err += float((reported - label_total).abs().sum())
            seen += len(idx)
    return state, abs_err / max(seen, 1)


def save_train_state(path: str | Path, state: TrainState, train_config: TrainConfig) -> Path:
    arrays = dict(model_state(state.model))
    names = dict(state.model.named_parameters())
    step = 0
    for name, p in names.items():
        st = state.optimizer.state.get(p)
        if st:
            arrays[f"optim.exp_avg.{name}"] = st["exp_avg"]
            arrays[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
            step = int(st["step"])
    if state.best_params is not None:
        for name, t in state.best_params.items():
            arrays[f"best.{name}"] = t
    header = {
        "model_config": state.model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "meta": {
            "epoch": state.epoch,
            "best_val_mae": None if math.isinf(state.best_val_mae) else state.best_val_mae,
            "best_epoch": state.best_epoch,
            "optim_step": step,
            "rng_state": state.rng.bit_generator.state,
            "log": state.log,
        },
    }
    return save_arrays(path, arrays, header)


def load_train_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    header, arrays = load_arrays(path)
    config = TrainConfig(**header["train_config"])
    model = PsoNet(ModelConfig.from_dict(header["model_config"]))
    load_state_into(model, arrays)
    state = init_state(model, config)
    meta = header["meta"]
    for name, p in model.named_parameters():
        key = f"optim.exp_avg.{name}"
        if key in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(meta["optim_step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim.exp_avg_sq.{name}"].copy()),
            }
    state.rng.bit_generator.state = meta["rng_state"]
    state.epoch = int(meta["epoch"])
    state.best_val_mae = math.inf if meta["best_val_mae"] is None else float(meta["best_val_mae"])
    state.best_epoch = int(meta["best_epoch"])
    best = {k[len("best.") :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("best.")}
    state.best_params = best or None
    state.log = list(meta["log"])
    return state, config


def write_log_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
    return path


def read_log_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)
        ]


@dataclass
class FitResult:
    model: PsoNet  # best-validation parameters
    log: list
    state: TrainState
    weights: SamplingWeights


def fit(
    train: VisitArrays,
    val: Optional[VisitArrays],
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
    stop_after: Optional[int] = None,
) -> FitResult:
    """Train for ``config.epochs`` epochs, keeping the best-validation weights.

    With ``out_dir`` set, writes ``best.npz``, ``last.npz`` (full resumable
    state) and ``metrics.csv`` after every epoch. ``stop_after`` ends the run
    early at that epoch count, which is how interrupted runs are simulated.
    """
    if train.labels is None:
        raise TrainingError("training visits carry no labels")
    weights = compute_sampling_weights(train.totals, config.sampling_threshold, keys=list(train.keys))
    if weights.warning:
        log.warning(weights.warning)
    if resume is not None:
        state, _ = load_train_state(resume)
    else:
        model = init_params(model_config or ModelConfig(), seed=config.seed)
        if config.init_head_bias:
            set_head_bias(model, train.labels, config.target)
        state = init_state(model, config)
    if state.best_params is None:
        state.best_params = copy.deepcopy(state.model.state_dict())

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    while state.epoch < last_epoch:
        t0 = time.perf_counter()
        state, train_mae = train_epoch(state, train, weights, config)
        val_mae = evaluate_mae(state.model, val) if val is not None and len(val) else float("nan")
        state.epoch += 1
        if val is None or not len(val):
            improved = True
        else:
            improved = val_mae < state.best_val_mae
        if improved:
            state.best_val_mae = val_mae if not math.isnan(val_mae) else state.best_val_mae
            state.best_epoch = state.epoch
            state.best_params = copy.deepcopy(state.model.state_dict())
        row = {
            "epoch": state.epoch,
            "train_mae": train_mae,
            "val_mae": val_mae,
            "lr": config.learning_rate,
            "wall_seconds": time.perf_counter() - t0,
        }
        state.log.append(row)
        log.info("epoch %d train_mae %.4f val_mae %.4f", state.epoch, train_mae, val_mae)
        if out is not None:
            save_train_state(out / "last.npz", state, config)
            write_log_csv(out / "metrics.csv", state.log)
            _save_best(out / "best.npz", state, config)

    best = PsoNet(state.model.config)
    best.load_state_dict(state.best_params)
    best.eval()
    if out is not None:
        _save_best(out / "best.npz", state, config)
        write_log_csv(out / "metrics.csv", state.log)
    return FitResult(model=best, log=state.log, state=state, weights=weights)


def _save_best(path: Path, state: TrainState, config: TrainConfig) -> None:
    header = {
        "model_config": state.model.config.to_dict(),
        "train_config": config.to_dict(),
        "meta": {
            "best_epoch": state.best_epoch,
            "best_val_mae": None if math.isinf(state.best_val_mae) else state.best_val_mae,
        },
    }
    save_arrays(path, state.best_params, header)
