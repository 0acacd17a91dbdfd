import csv

import numpy as np
import pytest

import dsp_core
import features
import reconstruct
from dsp_core import Spectrogram, StftConfig
from errors import ParameterError, ShapeError
from features import FeatureMap, FeatureParams
from reconstruct import MagnitudeSpec, ReconstructParams

HANN = StftConfig(frame_len=160, hop_len=80, fft_len=256, window="hann")


def _tone(freq=440.0, n=4000, sr=8000):
    return 0.5 * np.sin(2 * np.pi * freq * np.arange(n) / sr)


# ============================================================
# FD-MFCC -> dB mel
# ============================================================

def test_untruncated_idct_reproduces_db_mel(make_tone):
    params = FeatureParams(n_mels=16, n_coef=16)
    clip = make_tone(600.0)
    fmap = features.extract_fd_mfcc(clip, params)
    db_mel = features.log_mel_spectrogram(clip, params)
    assert np.max(np.abs(reconstruct.fdmfcc_to_db_mel(fmap, 16) - db_mel)) < 1e-9


def test_dc_coefficient_inverts_to_constant_column():
    fmap = FeatureMap(values=np.array([[2.0], [0.0], [0.0], [0.0]]), label=0, n_coef=4)
    assert reconstruct.fdmfcc_to_db_mel(fmap, 4)[:, 0] == pytest.approx([1.0] * 4)


def test_truncation_error_equals_dropped_energy(make_tone):
    params = FeatureParams(n_mels=16, n_coef=4)
    clip = make_tone(900.0)
    db_mel = features.log_mel_spectrogram(clip, params)
    full = dsp_core.dct2_ortho(db_mel, axis=0)
    approx = reconstruct.fdmfcc_to_db_mel(features.extract_fd_mfcc(clip, params), 16)
    assert np.sum((approx - db_mel) ** 2) == pytest.approx(np.sum(full[4:] ** 2), rel=1e-9)


def test_only_the_mfcc_block_is_used():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((12, 5))
    altered = values.copy()
    altered[4:] = 99.0
    a = reconstruct.fdmfcc_to_db_mel(FeatureMap(values=values, label=0, n_coef=4), 8)
    b = reconstruct.fdmfcc_to_db_mel(FeatureMap(values=altered, label=0, n_coef=4), 8)
    assert np.array_equal(a, b)


# ============================================================
# NNLS mel -> STFT
# ============================================================

def test_nnls_recovers_constructed_power():
    fb = dsp_core.mel_filterbank(16, HANN, 8000)
    W = fb.weights
    c = np.random.default_rng(1).uniform(0.5, 1.5, size=(16, 6))
    power = W.T @ c
    spec = reconstruct.mel_to_stft_mag(dsp_core.power_to_db(W @ power), fb, HANN)
    recovered = spec.mags**2
    assert np.linalg.norm(recovered - power) / np.linalg.norm(power) < 1e-2


def test_nnls_objective_is_non_increasing():
    rng = np.random.default_rng(2)
    W = rng.uniform(0, 1, size=(8, 20))
    P = rng.uniform(-1, 2, size=(8, 5))
    S, history = reconstruct.nnls_projected_gradient(W, P, iters=100)
    assert len(history) == 101
    assert np.all(S >= 0)
    assert np.all(np.diff(history) <= 1e-12 * max(history[0], 1.0))


def test_floor_db_input_gives_near_zero_magnitudes():
    fb = dsp_core.mel_filterbank(16, HANN, 8000)
    spec = reconstruct.mel_to_stft_mag(np.full((16, 4), -100.0), fb, HANN)
    assert spec.mags.max() <= 1e-4


def test_filterbank_shape_mismatch():
    fb = dsp_core.mel_filterbank(16, HANN, 8000)
    with pytest.raises(ShapeError):
        reconstruct.mel_to_stft_mag(np.zeros((8, 4)), fb, HANN)


def test_magnitude_spec_validation():
    with pytest.raises(ParameterError):
        MagnitudeSpec(mags=-np.ones((129, 2)), config=HANN)
    with pytest.raises(ShapeError):
        MagnitudeSpec(mags=np.ones((100, 2)), config=HANN)


# ============================================================
# Projections
# ============================================================

def _random_spec(seed=3, frames=10):
    rng = np.random.default_rng(seed)
    bins = rng.standard_normal((129, frames)) + 1j * rng.standard_normal((129, frames))
    return Spectrogram(bins=bins, config=HANN)


def test_magnitude_projection_sets_magnitude():
    X = _random_spec()
    A = MagnitudeSpec(mags=np.random.default_rng(4).uniform(0, 2, (129, 10)), config=HANN)
    assert np.allclose(np.abs(reconstruct.project_magnitude(X, A).bins), A.mags, atol=1e-6)


def test_zero_bins_take_phase_zero():
    X = Spectrogram(bins=np.zeros((129, 2), dtype=complex), config=HANN)
    A = MagnitudeSpec(mags=np.full((129, 2), 3.0), config=HANN)
    assert np.allclose(reconstruct.project_magnitude(X, A).bins, 3.0)


def test_consistency_projection_is_idempotent():
    once = reconstruct.project_consistent(_random_spec())
    twice = reconstruct.project_consistent(once)
    assert np.max(np.abs(twice.bins - once.bins)) < 1e-5


def test_consistent_spectrogram_is_a_fixed_point():
    X = dsp_core.stft(np.random.default_rng(5).standard_normal(2000), HANN)
    A = MagnitudeSpec(mags=np.abs(X.bins), config=HANN)
    assert np.max(np.abs(reconstruct.gla_step(X, A).bins - X.bins)) < 1e-5


def test_zero_magnitude_step_gives_zero():
    A = MagnitudeSpec(mags=np.zeros((129, 10)), config=HANN)
    assert np.max(np.abs(reconstruct.gla_step(_random_spec(), A).bins)) < 1e-12


def test_gla_step_shape_mismatch():
    A = MagnitudeSpec(mags=np.ones((129, 3)), config=HANN)
    with pytest.raises(ShapeError):
        reconstruct.gla_step(_random_spec(), A)


# ============================================================
# Griffin-Lim
# ============================================================

def _tone_magnitude():
    return MagnitudeSpec(mags=np.abs(dsp_core.stft(_tone(), HANN).bins), config=HANN)


def test_griffin_lim_reconstructs_tone_magnitude():
    A = _tone_magnitude()
    y = reconstruct.griffin_lim(A, iters=60, seed=0)
    assert reconstruct.spectral_residual(np.abs(dsp_core.stft(y, HANN).bins), A.mags) < 0.05


def test_residual_history_is_monotone():
    state = reconstruct.run_griffin_lim(_tone_magnitude(), iters=30, seed=1)
    history = np.array(state.residual_history)
    assert len(history) == 30
    assert np.all(history >= 0)
    assert np.all(np.diff(history) <= 1e-6)


def test_more_iterations_do_not_hurt():
    A = _tone_magnitude()
    one = reconstruct.run_griffin_lim(A, iters=1, seed=7).residual_history[-1]
    many = reconstruct.run_griffin_lim(A, iters=60, seed=7).residual_history[-1]
    assert many <= one


def test_griffin_lim_is_deterministic():
    A = _tone_magnitude()
    assert np.array_equal(reconstruct.griffin_lim(A, 5, seed=11), reconstruct.griffin_lim(A, 5, seed=11))


def test_griffin_lim_needs_one_iteration():
    with pytest.raises(ParameterError):
        reconstruct.griffin_lim(_tone_magnitude(), iters=0, seed=0)


# ============================================================
# Bout en bout
# ============================================================

def test_reconstruct_clip_keeps_the_tone(make_tone):
    params = FeatureParams()
    source = make_tone(1000.0, label=5)
    fmap = features.extract_fd_mfcc(source, params)
    stats = features.fit_stats([fmap])
    rparams = ReconstructParams(features=params, gla_iters=30, seed=2)

    clip, state = reconstruct.reconstruct_clip(features.standardize(fmap, stats), stats, rparams, return_state=True)

    assert len(clip) == 98 * 80 + 160
    assert clip.label == 5
    assert len(state.residual_history) == 30
    band_in = np.argmax(features.log_mel_spectrogram(source, params).mean(axis=1))
    band_out = np.argmax(features.log_mel_spectrogram(clip, params).mean(axis=1))
    assert abs(int(band_out) - int(band_in)) <= 1

    again = reconstruct.reconstruct_clip(features.standardize(fmap, stats), stats, rparams)
    assert np.array_equal(again.samples, clip.samples)


def test_de_emphasis_can_be_disabled():
    assert ReconstructParams().de_emphasis_coeff == pytest.approx(0.97)
    assert ReconstructParams(de_emphasis=0.0).de_emphasis_coeff == 0.0


def test_save_residual_history(tmp_path):
    state = reconstruct.run_griffin_lim(_tone_magnitude(), iters=4, seed=0)
    path = reconstruct.save_residual_history(state, tmp_path / "res.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "residual"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    assert [float(r[1]) for r in rows[1:]] == state.residual_history
