"""
Shared pytest fixtures: seeded generators, the toy split and small models.
"""

import logging

import numpy as np
import pytest

from dtgp.core import autodiff as ad
from dtgp.core.model import DTGPModel, ModelConfig
from dtgp.data.datasets import gen_toy_step, make_split, standardize

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run long acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="slow acceptance check, use --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def gradients_agree(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Relative error below rtol, or absolute error below atol where the gradient is small."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) <= np.maximum(rtol * np.abs(numeric), atol)


def check_param_gradients(params, loss_fn, rtol=1e-4, atol=1e-7, h=1e-5):
    """
    Compare backward() against central differences for every entry of every
    Param. ``loss_fn`` rebuilds the scalar loss from the current raw values.
    Returns {name: (analytic, numeric)} for entries that disagree.
    """
    ad.zero_grads(params)
    ad.backward(loss_fn())
    failures = {}
    for param in params:
        analytic = param.grad.copy()
        base = param.raw.value.copy()

        def evaluate(raw, param=param):
            param.raw.value = raw.copy()
            return loss_fn().item()

        numeric = ad.finite_diff_grad(evaluate, base, h=h)
        param.raw.value = base
        ok = gradients_agree(analytic, numeric, rtol, atol)
        if not np.all(ok):
            failures[param.name] = (analytic[~ok], numeric[~ok])
    return failures


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_split():
    dataset = gen_toy_step(100, 0.05, seed=1)
    return standardize(dataset, make_split(dataset.n, 0))


@pytest.fixture
def small_model(toy_split):
    config = ModelConfig(layers=2, flow="arcsinh", m_inducing=5)
    return DTGPModel.build(config, toy_split.x_train, seed=0)
