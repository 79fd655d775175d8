"""
Shared builders for the test suite.

Tests import the repository packages directly (engine, config, commands,
manager), so the repository root goes on sys.path here.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from engine.data import gen_blobs  # noqa: E402
from engine.network import TangentModel, build_mlp_spec, init_params  # noqa: E402
from engine.quadratic import assemble  # noqa: E402


def make_model(seed=0, hidden=(5,), input_dim=4, classes=3, **kwargs):
    """Seeded Dense/Leaky-ReLU tangent model."""
    spec = build_mlp_spec(input_dim, list(hidden), classes, **kwargs)
    return TangentModel(spec, init_params(spec, seed))


def make_data(seed=1, per_class=8, input_dim=4, classes=3):
    return gen_blobs(classes, per_class, input_dim, 2.0, seed)


def make_problem(seed=0, hidden=(5,), classes=3, per_class=8, lam=1e-2):
    """(model, dataset, problem) triple on a small blob task."""
    model = make_model(seed, hidden, classes=classes)
    data = make_data(seed + 1, per_class=per_class, classes=classes)
    return model, data, assemble(model, data, lam=lam)


def relative(a, b):
    scale = np.linalg.norm(b)
    gap = np.linalg.norm(np.asarray(a) - np.asarray(b))
    return gap / scale if scale > 0 else gap


@pytest.fixture
def small_problem():
    return make_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
