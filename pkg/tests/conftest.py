"""
Shared fixtures: seeded generators, tiny model configs and a tiny corpus.
"""
import numpy as np
import pytest

from dextts.corpus import synth_corpus
from dextts.models import profile_config

TINY = {
    "n_mels": 8,
    "text": {"layers": 1, "hidden": 8, "heads": 2, "vocab": 6},
    "dp_hidden": 8,
    "hidden": 8,
    "patch_size": 2,
    "dit_blocks": 1,
    "dit_heads": 2,
    "style_layers": 2,
    "codebook_size": 8,
    "codebook_dim": 6,
    "batch_size": 2,
    "epochs": 2,
    "max_time_patches": 8,
    "nfe": 3,
    "diffusion_draws": 1,
}


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Keep run logs inside the test's temp dir and reset cached settings."""
    from dextts.settings import get_settings

    monkeypatch.setenv("DEX_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("ENABLE_DETAILED_LOGS", "true")
    monkeypatch.delenv("DEX_THREADS", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return profile_config("toy", **TINY)


@pytest.fixture
def tiny_gedex_config():
    return profile_config("toy-gedex", **TINY)


@pytest.fixture
def tiny_corpus():
    return synth_corpus(3, 4, vocab=6, n_mels=8, t_range=(10, 16))
