"""Test fixtures for esforge tests."""

import numpy as np
import pytest

from esforge.models import ExperimentConfig
from esforge.params import ParamGroup, ParamKind, ParamSet, ParamTensor
from esforge.policy import DEFAULT_VOCAB, PolicyArch, init_params, zero_params


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="Run end-to-end experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_arch():
    """Small policy architecture that keeps every test fast."""
    return PolicyArch(context_window=12, embed_dim=4, hidden_dim=8, layers=1)


@pytest.fixture
def tiny_params(tiny_arch):
    """Seeded initial parameters for the tiny architecture."""
    return init_params(tiny_arch, seed=7)


@pytest.fixture
def rough_params(tiny_arch):
    """float64 parameters with O(0.3) entries, for gradient checks."""
    template = zero_params(tiny_arch)
    rng = np.random.default_rng(11)
    flat = 0.3 * rng.standard_normal(template.size)
    return ParamSet.from_flat(template, flat, dtype=np.float64)


@pytest.fixture
def two_group_params():
    """Hand-made two-tensor ParamSet."""
    return ParamSet(
        [
            ParamTensor("a", ParamGroup(ParamKind.HIDDEN_WEIGHT, 0), (2, 2), np.zeros(4)),
            ParamTensor("b", ParamGroup(ParamKind.HIDDEN_BIAS, 0), (3,), np.arange(3.0)),
        ]
    )


def build_parity_oracle(arch: PolicyArch, margin: float = 10.0) -> ParamSet:
    """
    Hand-coded policy that answers parity8 perfectly.

    Embedding dimension 0 marks b1 tokens. Hidden unit k fires when at least
    k+1 of the eight bit positions hold b1, and the alternating readout turns
    the count into its parity.
    """
    vocab = arch.vocab
    params = zero_params(arch)
    b0, b1 = vocab.id("b0"), vocab.id("b1")
    w, d = arch.context_window, arch.embed_dim
    params.array("embed")[b1, 0] = 1.0
    weight = params.array("hidden0.weight")
    bias = params.array("hidden0.bias")
    for k in range(8):
        for position in range(w - 9, w - 1):
            weight[position * d, k] = 20.0
        bias[k] = -20.0 * k - 10.0
    params.array("hidden0.norm")[...] = 1.0
    out_w = params.array("output.weight")
    for k in range(8):
        sign = 1.0 if k % 2 == 0 else -1.0
        out_w[k, b1] = margin * sign / 2
        out_w[k, b0] = -margin * sign / 2
    out_b = params.array("output.bias")
    out_b[...] = -100.0
    out_b[b0] = margin
    out_b[b1] = 0.0
    return params


@pytest.fixture
def parity_oracle(tiny_arch):
    """Parameters of a perfect parity8 policy."""
    return build_parity_oracle(tiny_arch)


@pytest.fixture
def constant_b0_params(tiny_arch):
    """Policy that always emits b0."""
    params = zero_params(tiny_arch)
    params.array("output.bias")[DEFAULT_VOCAB.id("b0")] = 10.0
    return params


@pytest.fixture
def tiny_config_text(tmp_path):
    """Config text for a seconds-long experiment."""
    return (
        "# tiny experiment\n"
        "run.seed = 3\n"
        "policy.context_window = 12\n"
        "policy.embed_dim = 4\n"
        "policy.hidden_dim = 8\n"
        "pretrain.iterations = 4\n"
        "pretrain.batch_size = 8\n"
        "pretrain.eval_every = 2\n"
        "pretrain.eval_n = 16\n"
        "finetune.iterations = 4\n"
        "finetune.checkpoint_every = 2\n"
        "finetune.pool_size = 4\n"
        "budget.samples = 3\n"
        "es.workers = 1\n"
        "grpo.minibatch = 2\n"
        "eval.n = 16\n"
        "eval.kl_prompts = 4\n"
        f"output.dir = {tmp_path / 'run'}\n"
    )


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_text):
    """The tiny experiment config written to disk."""
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_config_text, encoding="utf-8")
    return path


@pytest.fixture
def tiny_config(tiny_config_file):
    """The tiny experiment config, parsed."""
    from esforge.config import ConfigManager

    return ConfigManager(tiny_config_file).config


@pytest.fixture
def default_config():
    return ExperimentConfig()
