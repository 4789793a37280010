import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from legofl.mathcore import Rng
from legofl.model import ModelConfig, init_adapter, new_model

settings.register_profile("legofl", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("legofl")

TINY = ModelConfig(vocab_size=64, d_model=8, n_heads=2, n_layers=2, max_seq_len=32, lora_rank=2, lora_alpha=2.0, d_ff=16)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    m = new_model(TINY, Rng(7, ("tiny",)))
    m.adapter = init_adapter(TINY, m.layer_ids, Rng(7, ("adapter",)))
    return m


@pytest.fixture
def tokens():
    return Rng(3, ("tokens",)).integers(3, 64, size=(2, 10))


def random_batch(rng: Rng, n=3, T=10, vocab=64):
    from legofl.model import Batch

    ids = rng.integers(3, vocab, size=(n, T + 1))
    w = np.ones((n, T), np.float32)
    return Batch(ids[:, :-1], ids[:, 1:], w)


def small_config_dict(**over):
    """A complete experiment that trains in about a second."""
    d = {
        "name": "small",
        "seed": 0,
        "model": {"d_model": 8, "n_heads": 2, "n_layers": 2, "max_seq_len": 32, "lora_rank": 2, "lora_alpha": 2.0, "d_ff": 16},
        "corpus": {"pretrain_per_domain": 12, "finetune_per_domain": 8, "heldout_per_domain": 3},
        "pretrain": {"steps": 10, "batch_size": 16},
        "clients": [
            {"strategy": "activation_norm", "sparsity_level": s, "calibration_batches": 1} for s in (0.0, 0.5, 0.75)
        ],
        "partition": {"mode": "iid"},
        "federation": {"rounds": 3, "participation_rate": 0.5, "batch_size": 8, "lr": 0.01},
    }
    for k, v in over.items():
        d[k] = {**d[k], **v} if isinstance(v, dict) and isinstance(d.get(k), dict) else v
    return d


@pytest.fixture
def small_config():
    from legofl.config import config_from_dict

    return config_from_dict(small_config_dict())


# acceptance verdicts, printed as one line per criterion at the end of the session
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
