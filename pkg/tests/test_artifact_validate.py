import numpy as np
import pytest

import artifact_validate
import models
from audio_io import AudioClip, Manifest, save_wav
from config import RunConfig
from distill import DistilledSet
from models import ParamVector, Trajectory
from tensor_autodiff import Tensor


def _trajectory(arch, n=4, seed=0, tags=None):
    rng = np.random.default_rng(seed)
    tags = tags if tags is not None else list(range(n))
    snaps = [ParamVector(flat=rng.standard_normal(arch.param_count), arch=arch, epoch_tag=t) for t in tags]
    return Trajectory(arch=arch, snapshots=snaps, seed=seed)


def _dset(labels, alpha=0.01, cpc=2, shape=(1, 12, 19), provenance=""):
    feats = np.zeros((len(labels),) + shape, dtype=np.float32)
    return DistilledSet(features=Tensor(feats), labels=labels, alpha=Tensor(alpha), cpc=cpc, provenance=provenance)


# ============================================================
# Buffer
# ============================================================

def test_valid_buffer(toy_arch):
    result = artifact_validate.validate_buffer([_trajectory(toy_arch, seed=s) for s in range(3)], 2, 1)
    assert result == {"valid": True, "errors": [], "n_trajectories": 3}


def test_empty_buffer_is_invalid():
    assert not artifact_validate.validate_buffer([])["valid"]


def test_buffer_checks_each_problem(toy_arch):
    other = models.arch_for(1, 2, 6, 8, 2)
    bad = _trajectory(toy_arch, seed=1)
    bad.snapshots[2].flat[0] = np.nan
    trajs = [
        _trajectory(toy_arch),
        _trajectory(other),
        _trajectory(toy_arch, tags=[0, 2, 2, 3]),
        bad,
        _trajectory(toy_arch, n=3),
    ]
    errors = artifact_validate.validate_buffer(trajs, max_start_epoch=2, target_steps=1)["errors"]
    text = "\n".join(errors)
    assert "architecture" in text
    assert "inégales" in text
    assert "au moins 4" in text
    assert "croissants" in text
    assert "non finis" in text


# ============================================================
# Distilled set
# ============================================================

def test_valid_distilled_set():
    assert artifact_validate.validate_distilled(_dset([0, 0, 1, 1]))["valid"]


def test_unbalanced_labels():
    result = artifact_validate.validate_distilled(_dset([0, 0, 0, 1]))
    assert not result["valid"]
    assert "déséquilibrés" in result["errors"][0]


def test_whole_set_labels_are_not_balanced_checked():
    assert artifact_validate.validate_distilled(_dset([0, 0, 0, 1], cpc=None))["valid"]


@pytest.mark.parametrize("alpha", [0.0, 1e-7, float("nan")])
def test_bad_alpha(alpha):
    assert not artifact_validate.validate_distilled(_dset([0, 1], alpha=alpha, cpc=1))["valid"]


def test_non_finite_features():
    dset = _dset([0, 1], cpc=1)
    dset.features.data[0, 0, 0, 0] = np.inf
    assert "non finies" in artifact_validate.validate_distilled(dset)["errors"][0]


def test_feature_dims_against_config():
    config = RunConfig(target_len=1600, hop_ms=10.0, n_coef=4)
    assert artifact_validate.validate_distilled(_dset([0, 1], cpc=1), config)["valid"]
    wrong = _dset([0, 1], cpc=1, shape=(1, 60, 99))
    assert not artifact_validate.validate_distilled(wrong, config)["valid"]
    # config embarquée utilisée à défaut
    wrong.provenance = config.canonical()
    assert not artifact_validate.validate_distilled(wrong)["valid"]


def test_unreadable_embedded_config():
    result = artifact_validate.validate_distilled(_dset([0, 1], cpc=1, provenance="{not json"))
    assert not result["valid"]


# ============================================================
# Manifeste
# ============================================================

def test_manifest_checks(tmp_path):
    save_wav(AudioClip(samples=np.zeros(10), sample_rate=8000), tmp_path / "a.wav")
    good = Manifest(entries=[("a.wav", 0)], class_names=["x"], sample_rate=8000, target_len=10, root=tmp_path)
    assert artifact_validate.validate_manifest(good)["valid"]

    bad = Manifest(entries=[("a.wav", 0), ("a.wav", 2), ("b.wav", 2)], class_names=["x", "y", "z"],
                   sample_rate=8000, target_len=10, root=tmp_path)
    text = "\n".join(artifact_validate.validate_manifest(bad)["errors"])
    assert "Labels" in text
    assert "dupliqué" in text
    assert "absent: b.wav" in text
