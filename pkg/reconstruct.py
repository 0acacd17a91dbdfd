"""
reconstruct.py — Inversion FD-MFCC -> waveform.

  destandardisation -> bloc MFCC (les lignes Δ/Δ² sont ignorées) -> IDCT (zéros de C à n_mels)
  -> dB -> puissance mel -> NNLS par trame vers |STFT|² -> racine -> Griffin-Lim -> dé-emphase

Griffin-Lim : projections alternées
  P_A(X) = A · X/|X|          (phase gardée, module remplacé ; phase 0 là où |X| = 0)
  P_C(X) = STFT(iSTFT(X))     (projection sur les spectrogrammes consistants)

Le résidu ||  |X| - A  ||_F / ||A||_F est mesuré sur le spectre complet : les bins
0 et Nyquist comptent une fois, les autres deux fois (symétrie hermitienne).
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import dsp_core
from audio_io import AudioClip
from dsp_core import MelFilterbank, Spectrogram, StftConfig
from errors import ParameterError, ShapeError
from features import FeatureMap, FeatureParams, FeatureStats, destandardize

logger = logging.getLogger(__name__)


# ============================================================
# Types
# ============================================================

@dataclass
class MagnitudeSpec:
    mags: np.ndarray
    config: StftConfig
    nnls_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.mags = np.asarray(self.mags, dtype=np.float64)
        if self.mags.shape[0] != self.config.n_bins:
            raise ShapeError(f"MagnitudeSpec: {self.mags.shape[0]} bins, {self.config.n_bins} attendus")
        if not np.all(np.isfinite(self.mags)) or np.any(self.mags < 0):
            raise ParameterError("MagnitudeSpec: les magnitudes doivent être finies et >= 0")


@dataclass
class GlaState:
    current: Spectrogram
    residual_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class ReconstructParams:
    features: FeatureParams = field(default_factory=FeatureParams)
    gla_iters: int = 60
    nnls_iters: int = 200
    seed: int = 0
    window: str = "hann"
    de_emphasis: float | None = None  # None = coefficient de pré-emphase de l'extraction, 0 = aucune

    def stft_config(self) -> StftConfig:
        return self.features.stft_config().with_window(self.window)

    @property
    def de_emphasis_coeff(self) -> float:
        return self.features.preemph if self.de_emphasis is None else self.de_emphasis


def _bin_weights(n_bins: int) -> np.ndarray:
    w = np.full(n_bins, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w[:, None]


def spectral_residual(mags: np.ndarray, target: np.ndarray) -> float:
    """|| |X| - A ||_F / ||A||_F sur le spectre complet ; 0 si A est nul et |X| aussi."""
    w = _bin_weights(target.shape[0])
    num = np.sqrt(np.sum(w * (mags - target) ** 2))
    den = np.sqrt(np.sum(w * target**2))
    if den == 0:
        return float(num)
    return float(num / den)


# ============================================================
# FD-MFCC -> magnitudes
# ============================================================

def fdmfcc_to_db_mel(fmap: FeatureMap, n_mels: int) -> np.ndarray:
    """IDCT par trame du seul bloc MFCC, complété par des zéros jusqu'à n_mels."""
    block = fmap.mfcc_block()
    if block.shape[0] > n_mels:
        raise ParameterError(f"fdmfcc_to_db_mel: {block.shape[0]} coefficients pour n_mels={n_mels}")
    return dsp_core.idct(block, n=n_mels, axis=0)


def nnls_projected_gradient(W: np.ndarray, P: np.ndarray, iters: int = 200) -> tuple[np.ndarray, list[float]]:
    """
    min_{S >= 0} ½ ||W S - P||²_F, colonne par colonne.
    Départ : moindres carrés écrêtés à 0 ; puis gradient projeté de pas 1 / ||WᵀW||₂.
    Renvoie (S, historique de l'objectif, état initial compris).
    """
    W = np.asarray(W, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if W.shape[0] != P.shape[0]:
        raise ShapeError(f"nnls: W {W.shape} incompatible avec P {P.shape}")
    gram = W.T @ W
    lipschitz = float(np.linalg.norm(gram, 2))
    if lipschitz == 0:
        return np.zeros((W.shape[1], P.shape[1])), [0.5 * float(np.sum(P**2))]
    step = 1.0 / lipschitz
    WtP = W.T @ P

    S = np.maximum(np.linalg.lstsq(W, P, rcond=None)[0], 0.0)
    history = [0.5 * float(np.sum((W @ S - P) ** 2))]
    for _ in range(iters):
        S = np.maximum(S - step * (gram @ S - WtP), 0.0)
        history.append(0.5 * float(np.sum((W @ S - P) ** 2)))
    return S, history


def mel_to_stft_mag(db_mel: np.ndarray, fb: MelFilterbank, config: StftConfig, db_ref: float = 1.0,
                    iters: int = 200) -> MagnitudeSpec:
    if fb.weights.shape != (db_mel.shape[0], config.n_bins):
        raise ShapeError(
            f"mel_to_stft_mag: banc {fb.weights.shape} incompatible avec ({db_mel.shape[0]}, {config.n_bins})"
        )
    power_mel = dsp_core.db_to_power(db_mel, db_ref)
    power, history = nnls_projected_gradient(fb.weights, power_mel, iters)
    return MagnitudeSpec(mags=np.sqrt(power), config=config, nnls_history=history)


# ============================================================
# Griffin-Lim
# ============================================================

def project_magnitude(X: Spectrogram, A: MagnitudeSpec) -> Spectrogram:
    mag = np.abs(X.bins)
    phase = np.ones_like(X.bins)
    nonzero = mag > 0
    phase[nonzero] = X.bins[nonzero] / mag[nonzero]
    return Spectrogram(bins=A.mags * phase, config=X.config)


def project_consistent(X: Spectrogram) -> Spectrogram:
    return dsp_core.stft(dsp_core.istft(X), X.config)


def gla_step(X: Spectrogram, A: MagnitudeSpec) -> Spectrogram:
    if X.bins.shape != A.mags.shape:
        raise ShapeError(f"gla_step: spectrogramme {X.bins.shape}, magnitudes {A.mags.shape}")
    return project_consistent(project_magnitude(X, A))


def run_griffin_lim(A: MagnitudeSpec, iters: int, seed: int) -> GlaState:
    """X0 = A avec phases uniformes tirées de `seed`, puis `iters` pas ; un résidu par pas."""
    if iters < 1:
        raise ParameterError(f"griffin_lim: iters doit être >= 1 (reçu {iters})")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=A.mags.shape)
    state = GlaState(current=Spectrogram(bins=A.mags * np.exp(1j * phases), config=A.config))
    for _ in range(iters):
        state.current = gla_step(state.current, A)
        state.residual_history.append(spectral_residual(np.abs(state.current.bins), A.mags))
    logger.debug(f"Griffin-Lim: {iters} itérations, résidu final {state.residual_history[-1]:.4f}")
    return state


def griffin_lim(A: MagnitudeSpec, iters: int, seed: int) -> np.ndarray:
    return dsp_core.istft(run_griffin_lim(A, iters, seed).current)


# ============================================================
# Bout en bout
# ============================================================

def reconstruct_clip(fmap: FeatureMap, stats: FeatureStats, params: ReconstructParams,
                     return_state: bool = False):
    """
    Carte standardisée (sortie de distillation) -> AudioClip, label copié.
    Longueur : (T - 1) * hop + frame_len.
    """
    fp = params.features
    raw = destandardize(fmap, stats)
    db_mel = fdmfcc_to_db_mel(raw, fp.n_mels)
    cfg = params.stft_config()
    mags = mel_to_stft_mag(db_mel, fp.filterbank(), cfg, raw.db_ref, params.nnls_iters)
    state = run_griffin_lim(mags, params.gla_iters, params.seed)
    samples = dsp_core.istft(state.current)
    if params.de_emphasis_coeff > 0:
        samples = dsp_core.de_emphasis(samples, params.de_emphasis_coeff)
    clip = AudioClip(samples=samples, sample_rate=fp.sample_rate, label=fmap.label, source_id=fmap.source_id)
    return (clip, state) if return_state else clip


def save_residual_history(state: GlaState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "residual"])
        for i, r in enumerate(state.residual_history, start=1):
            writer.writerow([i, repr(float(r))])
    return path
