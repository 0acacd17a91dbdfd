"""
features.py — Extraction FD-MFCC (MFCC fusionné avec ses différences d'ordre 1 et 2).

Pipeline par clip :
  pré-emphase -> trames + fenêtre -> |FFT|^2 -> banc mel -> dB -> DCT par trame
  -> C premiers coefficients (MFCC) -> Δ, Δ² -> concaténation [MFCC; Δ; Δ²]

Δ est la différence avant divisée par 2, telle quelle :
  Δ[:, t] = (m[:, t+1] - m[:, t]) / 2, et la dernière colonne vaut 0.

Fichiers :
  - carte de features : magic "FDMF", version u16, rows u32, cols u32, label u32,
    n_coef u32, db_ref f32, puis le payload float32 little-endian row-major
  - stats : JSON {mean: [...], std: [...]}
"""

import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

import dsp_core
from audio_io import AudioClip
from dsp_core import StftConfig
from errors import ArtifactFormatError, ParameterError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"FDMF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIf")
STD_FLOOR = 1e-6


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class FeatureParams:
    sample_rate: int = 8000
    frame_ms: float = 20.0
    hop_ms: float = 10.0
    fft_len: int = 0  # 0 = puissance de deux suivant frame_len
    window: str = "hamming"
    n_mels: int = 64
    n_coef: int = 20
    preemph: float = 0.97
    f_min: float = 0.0
    f_max: float = 0.0  # 0 = sample_rate / 2
    db_ref: float = 1.0
    mode: str = "fd_mfcc"

    def __post_init__(self):
        if self.n_coef > self.n_mels:
            raise ParameterError(f"n_coef ({self.n_coef}) doit être <= n_mels ({self.n_mels})")
        if self.mode not in ("fd_mfcc", "mfcc"):
            raise ParameterError(f"mode inconnu: {self.mode!r}")

    def stft_config(self) -> StftConfig:
        frame_len = int(round(self.frame_ms * self.sample_rate / 1000.0))
        hop_len = int(round(self.hop_ms * self.sample_rate / 1000.0))
        fft_len = self.fft_len or dsp_core.next_pow2(frame_len)
        return StftConfig(frame_len, hop_len, fft_len, self.window)

    @property
    def band(self) -> tuple[float, float]:
        return self.f_min, (self.f_max or self.sample_rate / 2.0)

    @property
    def n_rows(self) -> int:
        return 3 * self.n_coef if self.mode == "fd_mfcc" else self.n_coef

    def filterbank(self) -> dsp_core.MelFilterbank:
        f_min, f_max = self.band
        return dsp_core.mel_filterbank(self.n_mels, self.stft_config(), self.sample_rate, f_min, f_max)


@dataclass
class FeatureMap:
    values: np.ndarray
    label: int
    n_coef: int
    frame_config: StftConfig | None = None
    db_ref: float = 1.0
    source_id: str = ""

    @property
    def layout(self) -> str:
        return "fd_mfcc" if self.values.shape[0] == 3 * self.n_coef else "mfcc"

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def mfcc_block(self) -> np.ndarray:
        return self.values[: self.n_coef]


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


# ============================================================
# Extraction
# ============================================================

def log_mel_spectrogram(clip: AudioClip, params: FeatureParams) -> np.ndarray:
    """Énergies mel en dB, shape (n_mels, T). Étapes 1 à 6 du pipeline."""
    cfg = params.stft_config()
    emphasized = dsp_core.pre_emphasis(clip.samples, params.preemph)
    frames = dsp_core.frame_and_window(emphasized, cfg)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_len, axis=1)) ** 2
    mel_power = params.filterbank().weights @ power.T
    return dsp_core.power_to_db(mel_power, params.db_ref)


def mfcc(clip: AudioClip, params: FeatureParams) -> np.ndarray:
    """MFCC (C x T) : DCT orthonormale par trame des énergies mel en dB, tronquée à n_coef."""
    db_mel = log_mel_spectrogram(clip, params)
    return dsp_core.dct2_ortho(db_mel, axis=0)[: params.n_coef]


def delta(m: np.ndarray) -> np.ndarray:
    """Différence avant divisée par 2 ; la dernière trame est répliquée (colonne nulle)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] < 1:
        raise ParameterError("delta: au moins une trame est nécessaire")
    out = np.zeros_like(m)
    out[..., :-1] = (m[..., 1:] - m[..., :-1]) / 2.0
    return out


def extract_fd_mfcc(clip: AudioClip, params: FeatureParams) -> FeatureMap:
    """FeatureMap [MFCC; Δ; Δ²] (ou MFCC seul en mode 'mfcc'), label copié du clip."""
    coefs = mfcc(clip, params)
    if params.mode == "fd_mfcc":
        d1 = delta(coefs)
        values = np.concatenate([coefs, d1, delta(d1)], axis=0)
    else:
        values = coefs
    return FeatureMap(
        values=values,
        label=clip.label,
        n_coef=params.n_coef,
        frame_config=params.stft_config(),
        db_ref=params.db_ref,
        source_id=clip.source_id,
    )


def extract_all(clips: list[AudioClip], params: FeatureParams) -> list[FeatureMap]:
    maps = [extract_fd_mfcc(clip, params) for clip in clips]
    logger.info(f"FD-MFCC extraits: {len(maps)} cartes de forme {maps[0].shape if maps else None}")
    return maps


# ============================================================
# Standardisation
# ============================================================

def fit_stats(maps: list[FeatureMap]) -> FeatureStats:
    """Moyenne / écart-type par ligne sur toutes les trames de toutes les cartes."""
    if not maps:
        raise ParameterError("fit_stats: collection vide")
    stacked = np.concatenate([m.values for m in maps], axis=1)
    return FeatureStats(mean=stacked.mean(axis=1), std=stacked.std(axis=1))


def standardize(fmap: FeatureMap, stats: FeatureStats) -> FeatureMap:
    return replace(fmap, values=(fmap.values - stats.mean[:, None]) / stats.std[:, None])


def destandardize(fmap: FeatureMap, stats: FeatureStats) -> FeatureMap:
    return replace(fmap, values=fmap.values * stats.std[:, None] + stats.mean[:, None])


def stack_maps(maps: list[FeatureMap]) -> tuple[np.ndarray, np.ndarray]:
    """Empile en tenseur (N, 1, rows, T) float32 + labels int64, prêt pour les modèles."""
    x = np.stack([m.values for m in maps])[:, None].astype(np.float32)
    y = np.array([m.label for m in maps], dtype=np.int64)
    return x, y


# ============================================================
# Fichiers
# ============================================================

def save_feature_map(fmap: FeatureMap, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = fmap.values.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols, fmap.label, fmap.n_coef, fmap.db_ref)
    path.write_bytes(header + fmap.values.astype("<f4").tobytes(order="C"))
    return path


def load_feature_map(path: str | Path) -> FeatureMap:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ArtifactFormatError(f"{path.name}: fichier de features tronqué")
    magic, version, rows, cols, label, n_coef, db_ref = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise ArtifactFormatError(f"{path.name}: magic/version inattendus ({magic!r}, v{version})")
    payload = raw[_HEADER.size :]
    if len(payload) != rows * cols * 4:
        raise ArtifactFormatError(f"{path.name}: payload de {len(payload)} octets, {rows * cols * 4} attendus")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return FeatureMap(values=values, label=int(label), n_coef=int(n_coef), db_ref=float(db_ref), source_id=path.stem)


def save_stats(stats: FeatureStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"mean": stats.mean.tolist(), "std": stats.std.tolist()}), encoding="utf-8")
    return path


def load_stats(path: str | Path) -> FeatureStats:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return FeatureStats(mean=np.array(data["mean"]), std=np.array(data["std"]))
