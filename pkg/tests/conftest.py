"""Shared fixtures: synthetic dataset files and a trained separable model."""

import json
import time
from dataclasses import dataclass

import numpy as np
import pytest

from maldet.network import ConvBlock, ModelBundle, ModelConfig, param_shapes, save_bundle
from maldet.reports import write_csv
from maldet.tensor import Tensor
from maldet.textprep import encode_dataset, fit_vocabulary, train_test_split
from maldet.training import TrainHistory, evaluate, train

from _datasets import separable_rows


@dataclass
class SeparableModel:
    bundle: ModelBundle
    history: TrainHistory
    train_rows: list
    test_rows: list
    train_seconds: float
    test_accuracy: float


@pytest.fixture(scope="session")
def separable_model() -> SeparableModel:
    """Default-architecture model trained on the 200-sample separable set."""
    rows = separable_rows(num=200, n=20, seed=0)
    train_rows, test_rows = train_test_split(rows, 0.7, seed=0)
    vocab = fit_vocabulary(train_rows)
    config = ModelConfig(n=20)
    train_data = encode_dataset(train_rows, vocab, 20)
    started = time.perf_counter()
    bundle, history = train(config, train_data, vocab, epochs=10, batch_size=32,
                            seed=0, lr=0.005)
    elapsed = time.perf_counter() - started
    metrics = evaluate(bundle, encode_dataset(test_rows, vocab, 20))
    return SeparableModel(bundle, history, train_rows, test_rows, elapsed,
                          metrics.accuracy)


@pytest.fixture
def separable_csv(tmp_path):
    path = tmp_path / "dataset.csv"
    write_csv(separable_rows(num=120, n=20, seed=3), path)
    return path


@pytest.fixture
def small_config_file(tmp_path):
    doc = {
        "model": {
            "n": 20,
            "embed_dim": 16,
            "conv_blocks": [
                {"filters": 8, "kernel": 3},
                {"filters": 8, "kernel": 3},
            ],
            "gru_hidden": 8,
            "dense_layers": [16],
        },
        "train": {"epochs": 2, "batch_size": 16, "lr": 0.005},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def zero_bundle_file(tmp_path):
    """Debug bundle with every parameter zeroed: output is exactly 0.5."""
    rows = separable_rows(num=10, n=20, seed=1)
    vocab = fit_vocabulary(rows)
    config = ModelConfig(n=20, embed_dim=8, conv_blocks=(ConvBlock(4, 3),),
                         gru_hidden=4, dense_layers=(8,), seed=0)
    params = {k: Tensor(np.zeros(s), requires_grad=True)
              for k, s in param_shapes(config, vocab.size).items()}
    path = tmp_path / "zero_model.json"
    save_bundle(ModelBundle(1, config, vocab, params), path)
    return path
