import numpy as np
import pytest

import models
from audio_io import AudioClip
from config import RunConfig


@pytest.fixture
def make_tone():
    """Fabrique de clips sinusoïdaux (amplitude 0.5 par défaut)."""

    def _make(freq: float = 1000.0, n: int = 8000, sr: int = 8000, amp: float = 0.5, label: int = 0) -> AudioClip:
        t = np.arange(n) / sr
        return AudioClip(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=sr, label=label,
                         source_id=f"tone{freq:g}")

    return _make


@pytest.fixture
def toy_data():
    """Deux classes séparables par le signe moyen, cartes 1x6x8."""
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 10).astype(np.int64)
    x = 0.1 * rng.standard_normal((20, 1, 6, 8))
    x[y == 0] += 1.0
    x[y == 1] -= 1.0
    return x.astype(np.float32), y


@pytest.fixture
def toy_arch():
    return models.arch_for(1, 4, 6, 8, 2)


@pytest.fixture
def tiny_config():
    """RunConfig minuscule : pipeline complet en quelques secondes."""
    return RunConfig(
        seed=3, dataset_tag="tiny", n_classes=2, train_per_class=6, test_per_class=4,
        target_len=1600, hop_ms=10.0, n_mels=16, n_coef=4,
        arch_depth=1, arch_width=4, eval_archs="1x4",
        n_teachers=2, teacher_epochs=4, teacher_lr=0.05, batch_size=4,
        methods="mtt,dcgm,random,herding", cpc=2, cpcs="1,2",
        outer_iters=3, inner_steps=2, target_steps=1, max_start_epoch=2, outer_lr=1.0, alpha_lr=1e-5,
        dcgm_iters=2, dcgm_loops=2, dcgm_real_batch=4,
        eval_epochs=3, eval_seeds=2, gla_iters=5, nnls_iters=20, sigmas="0,0.01",
    )
