"""Shared fixtures: the synthetic desk corpus and session-scoped trained models.

The expensive fixtures are session-scoped and only built when a test asks for them,
so the fast suite stays fast; the acceptance tests pull in real training runs.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from choralegen import make_dataset

from counterpoint import model as M
from counterpoint import training as T
from counterpoint.pianoroll import load_dataset

# The desk protocol: quarter-note quantization, 32-step crops, and a corpus of four
# training chorales. The sampling-scheme sweep uses its own sixteenth-note corpus.
DESK_RESOLUTION = "quarter"
DESK_SEED = 11


@pytest.fixture(scope="session")
def desk_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "desk.json"
    path.write_text(json.dumps(make_dataset(seed=0, train=4, valid=3, test=3)))
    return path


@pytest.fixture(scope="session")
def desk_dataset(desk_corpus_path):
    return load_dataset(desk_corpus_path, resolution=DESK_RESOLUTION)


@pytest.fixture(scope="session")
def desk_run(desk_dataset, tmp_path_factory):
    """Desk-scale training run: pinned to the documented desk configuration."""
    outdir = tmp_path_factory.mktemp("desk_run")
    config = T.TrainConfig(
        crop_length=32, batch_size=8, learning_rate=1e-3, total_steps=5000,
        checkpoint_every=500, seed=DESK_SEED, dtype="float32",
        target_loss=0.90, loss_window=300,
    )
    started = time.perf_counter()
    result = T.train(desk_dataset, M.DESK_SCALE, config, outdir=str(outdir))
    elapsed = time.perf_counter() - started
    return {"result": result, "elapsed": elapsed, "outdir": outdir,
            "config": config}
