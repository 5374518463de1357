from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from psonet.data import SyntheticSpec, generate_synthetic_dataset, load_visits, split_by_patient
from psonet.model import EncoderConfig, ModelConfig, init_params
from psonet.training import TrainConfig, fit, predict_arrays
from psonet.validation import check_visits

torch.set_num_threads(max(1, min(8, torch.get_num_threads())))

DESK_PATIENTS = 120


def tiny_model_config(width=4, size=(32, 32), **kw) -> ModelConfig:
    return ModelConfig(EncoderConfig(base_width=width, input_size=size), embed_dim=16, attention_dim=8, **kw)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Twelve synthetic patients at 32x32, written once per session."""
    out = tmp_path_factory.mktemp("tiny")
    spec = SyntheticSpec(patients=12, image_size=(32, 32), rng_seed=11)
    manifest = generate_synthetic_dataset(spec, out)
    return out, manifest


@pytest.fixture(scope="session")
def tiny_arrays(tiny_dataset):
    _, manifest = tiny_dataset
    tr, va, te = split_by_patient(manifest, seed=0)
    load = lambda m: check_visits(load_visits(m, "low_res", (32, 32)), require_labels=True)  # noqa: E731
    return load(tr), load(va), load(te)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk benchmark: 120 patients x 2 visits, 64x64, K=16, 30 epochs, seed 0.

    Shared by the training benchmark and the saliency checks, which both need
    a model trained on the synthetic lesions.
    """
    out = tmp_path_factory.mktemp("desk")
    manifest = generate_synthetic_dataset(SyntheticSpec(patients=DESK_PATIENTS, image_size=(64, 64), rng_seed=0), out)
    tr, va, te = split_by_patient(manifest, seed=0)
    load = lambda m: check_visits(load_visits(m, "low_res", (64, 64)), require_labels=True)  # noqa: E731
    train, val, test = load(tr), load(va), load(te)
    config = TrainConfig.desk(seed=0)
    model_config = ModelConfig(EncoderConfig(base_width=16, input_size=(64, 64)))
    t0 = time.perf_counter()
    result = fit(train, val, config, model_config, out_dir=out / "run")
    train_seconds = time.perf_counter() - t0
    _, test_total = predict_arrays(result.model, test)
    return {
        "result": result,
        "train": train,
        "val": val,
        "test": test,
        "test_total": test_total,
        "baseline_val_mae": float(np.mean(np.abs(val.totals - train.totals.mean()))),
        "out": out,
        "train_seconds": train_seconds,
    }


@pytest.fixture
def tiny_model():
    return init_params(tiny_model_config(), seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
