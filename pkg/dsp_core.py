"""
dsp_core.py — Noyaux de traitement du signal partagés par l'extraction et la reconstruction.

Fonctions pures (aucun état partagé) :
  pre_emphasis, frame_and_window, stft / istft, mel_filterbank,
  dct2_ortho / idct, power_to_db / db_to_power.

Conventions :
  - Spectrogram.bins : (fft_len/2 + 1) lignes x T trames
  - fenêtres symétriques (valeur 1.0 au centre pour une longueur impaire)
  - échelle mel HTK : m(f) = 2595 * log10(1 + f / 700)
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from errors import ParameterError, TooShortError

logger = logging.getLogger(__name__)

DB_FLOOR = 1e-10
WINDOWS = {"hann": np.hanning, "hamming": np.hamming}


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class StftConfig:
    frame_len: int
    hop_len: int
    fft_len: int
    window: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.frame_len <= self.fft_len:
            raise ParameterError(
                f"StftConfig: il faut 0 < hop ({self.hop_len}) <= frame ({self.frame_len}) <= fft ({self.fft_len})"
            )
        if self.fft_len & (self.fft_len - 1):
            raise ParameterError(f"StftConfig: fft_len doit être une puissance de deux (reçu {self.fft_len})")
        if self.window not in WINDOWS:
            raise ParameterError(f"StftConfig: fenêtre inconnue {self.window!r} (attendu {sorted(WINDOWS)})")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def window_array(self) -> np.ndarray:
        return WINDOWS[self.window](self.frame_len)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop_len + 1

    def signal_length(self, n_frames: int) -> int:
        """Longueur produite par l'iSTFT pour n_frames trames."""
        return (n_frames - 1) * self.hop_len + self.frame_len

    def with_window(self, window: str) -> "StftConfig":
        return StftConfig(self.frame_len, self.hop_len, self.fft_len, window)


@dataclass
class Spectrogram:
    bins: np.ndarray
    config: StftConfig

    def __post_init__(self):
        if self.bins.shape[0] != self.config.n_bins:
            raise ParameterError(f"Spectrogram: {self.bins.shape[0]} lignes, {self.config.n_bins} attendues")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


@dataclass
class MelFilterbank:
    weights: np.ndarray
    f_min: float
    f_max: float
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    def peak_frequencies(self) -> np.ndarray:
        mels = np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.f_max), self.n_mels + 2)
        return mel_to_hz(mels[1:-1])


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


# ============================================================
# Pré-emphase, trames, STFT
# ============================================================

def pre_emphasis(x: np.ndarray, coeff: float = 0.97) -> np.ndarray:
    """y[0] = x[0] ; y[t] = x[t] - coeff * x[t-1]."""
    if not 0.0 <= coeff < 1.0:
        raise ParameterError(f"pre_emphasis: coeff doit être dans [0, 1) (reçu {coeff})")
    return scipy.signal.lfilter([1.0, -coeff], [1.0], np.asarray(x, dtype=np.float64))


def de_emphasis(y: np.ndarray, coeff: float = 0.97) -> np.ndarray:
    """Inverse exact de pre_emphasis."""
    if not 0.0 <= coeff < 1.0:
        raise ParameterError(f"de_emphasis: coeff doit être dans [0, 1) (reçu {coeff})")
    return scipy.signal.lfilter([1.0], [1.0, -coeff], np.asarray(y, dtype=np.float64))


def frame_and_window(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Découpe en T = floor((len - frame)/hop) + 1 trames fenêtrées, shape (T, frame_len)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < cfg.frame_len:
        raise TooShortError(f"Signal de {x.shape[0]} échantillons, une trame en demande {cfg.frame_len}")
    frames = sliding_window_view(x, cfg.frame_len)[:: cfg.hop_len]
    return frames * cfg.window_array()


def stft(x: np.ndarray, cfg: StftConfig) -> Spectrogram:
    frames = frame_and_window(x, cfg)
    bins = np.fft.rfft(frames, n=cfg.fft_len, axis=1).T
    return Spectrogram(bins=bins, config=cfg)


def istft(S: Spectrogram) -> np.ndarray:
    """
    Overlap-add pondéré par la fenêtre, normalisé par la somme des fenêtres au carré.
    Les échantillons où cette somme est < 1e-8 (bords d'une fenêtre de Hann) valent 0.
    """
    cfg = S.config
    window = cfg.window_array()
    frames = np.fft.irfft(S.bins.T, n=cfg.fft_len, axis=1)[:, : cfg.frame_len]

    length = cfg.signal_length(S.n_frames)
    out = np.zeros(length)
    wsum = np.zeros(length)
    for t in range(S.n_frames):
        start = t * cfg.hop_len
        out[start : start + cfg.frame_len] += frames[t] * window
        wsum[start : start + cfg.frame_len] += window**2

    valid = wsum >= 1e-8
    out[valid] /= wsum[valid]
    out[~valid] = 0.0
    return out


# ============================================================
# Banc de filtres mel
# ============================================================

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, cfg: StftConfig, sample_rate: int,
                   f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    """
    Filtres triangulaires dont les pics sont équidistants sur l'échelle mel :
    le filtre i monte du point mel i-1, culmine au point i, redescend au point i+1.
    """
    f_max = sample_rate / 2.0 if f_max is None else f_max
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ParameterError(f"mel_filterbank: bande invalide [{f_min}, {f_max}] pour sr={sample_rate}")
    if n_mels < 2:
        raise ParameterError(f"mel_filterbank: n_mels doit être >= 2 (reçu {n_mels})")

    hz_points = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_freqs = np.arange(cfg.n_bins) * sample_rate / cfg.fft_len

    lower = hz_points[:-2, None]
    center = hz_points[1:-1, None]
    upper = hz_points[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ParameterError(
            f"mel_filterbank: {empty.size} filtre(s) vide(s) (ex: #{empty[0]}), "
            f"réduire n_mels={n_mels} ou augmenter fft_len={cfg.fft_len}"
        )
    return MelFilterbank(weights=weights, f_min=float(f_min), f_max=float(f_max), sample_rate=sample_rate)


# ============================================================
# DCT et échelle dB
# ============================================================

def dct2_ortho(v: np.ndarray, axis: int = 0) -> np.ndarray:
    """DCT-II orthonormale (isométrie)."""
    return scipy.fft.dct(np.asarray(v, dtype=np.float64), type=2, norm="ortho", axis=axis)


def idct(c: np.ndarray, n: int | None = None, axis: int = 0) -> np.ndarray:
    """Inverse de dct2_ortho (DCT-III orthonormale). Si n > len(c), les coefficients manquants valent 0."""
    return scipy.fft.idct(np.asarray(c, dtype=np.float64), type=2, n=n, norm="ortho", axis=axis)


def power_to_db(p, ref: float = 1.0):
    if ref <= 0:
        raise ParameterError(f"power_to_db: ref doit être > 0 (reçu {ref})")
    return 10.0 * np.log10(np.maximum(np.asarray(p, dtype=np.float64), DB_FLOOR) / ref)


def db_to_power(d, ref: float = 1.0):
    if ref <= 0:
        raise ParameterError(f"db_to_power: ref doit être > 0 (reçu {ref})")
    return ref * 10.0 ** (np.asarray(d, dtype=np.float64) / 10.0)
