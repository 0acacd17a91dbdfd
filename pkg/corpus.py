"""
corpus.py — Corpus synthétique seedé de tons et chirps, pour les runs "desk scale".

Classe k : bande propre à la classe (centres espacés en mel entre 300 Hz et 0.4·sr,
bandes qui se recouvrent). Classes paires : ton stable + harmonique ; impaires :
chirp linéaire traversant la bande. Chaque clip tire onset, durée, amplitude,
niveau de l'harmonique et bruit additif.

Sortie : WAV float32 + deux manifestes disjoints (train.jsonl, test.jsonl).
"""

import logging
from pathlib import Path

import numpy as np

import dsp_core
from audio_io import AudioClip, save_wav, write_manifest
from config import derive_seed
from errors import ParameterError

logger = logging.getLogger(__name__)

BAND_OVERLAP = 0.6
NOISE_LEVEL = 0.02


def class_bands(n_classes: int, sample_rate: int) -> list[tuple[float, float]]:
    """(f_bas, f_haut) par classe ; bandes voisines recouvrantes."""
    top = 0.4 * sample_rate
    if top <= 300.0:
        raise ParameterError(f"sample_rate={sample_rate} trop bas pour le corpus synthétique")
    centers = dsp_core.mel_to_hz(np.linspace(dsp_core.hz_to_mel(300.0), dsp_core.hz_to_mel(top), n_classes + 2)[1:-1])
    spacing = np.diff(np.concatenate([[300.0], centers, [top]]))
    half = BAND_OVERLAP * np.minimum(spacing[:-1], spacing[1:])
    return [(float(c - h), float(c + h)) for c, h in zip(centers, half)]


def _phase(freq: np.ndarray, sample_rate: int) -> np.ndarray:
    return 2.0 * np.pi * np.cumsum(freq) / sample_rate


def synth_clip(label: int, n_classes: int, sample_rate: int, target_len: int, rng: np.random.Generator) -> np.ndarray:
    low, high = class_bands(n_classes, sample_rate)[label]
    n_active = int(rng.integers(target_len // 2, target_len + 1))
    onset = int(rng.integers(0, target_len - n_active + 1))

    if label % 2 == 0:
        freq = np.full(n_active, rng.uniform(low, high))
    else:
        f0, f1 = rng.uniform(low, high, size=2)
        freq = np.linspace(f0, f1, n_active)
    phase = _phase(freq, sample_rate)
    harmonic = rng.uniform(0.0, 0.5)
    tone = np.sin(phase) + harmonic * np.sin(2.0 * phase) * (2.0 * freq < sample_rate / 2.0)
    tone *= np.hanning(n_active)

    out = np.zeros(target_len)
    out[onset : onset + n_active] = rng.uniform(0.3, 0.9) * tone / (1.0 + harmonic)
    out += NOISE_LEVEL * rng.standard_normal(target_len)
    return np.clip(out, -1.0, 1.0)


def synthesize_corpus(out_dir: str | Path, n_classes: int, train_per_class: int, test_per_class: int,
                      sample_rate: int, target_len: int, seed: int) -> tuple[Path, Path]:
    """Écrit les WAV et les manifestes ; renvoie (train.jsonl, test.jsonl)."""
    if n_classes < 2 or train_per_class < 1 or test_per_class < 1:
        raise ParameterError(
            f"Corpus invalide: n_classes={n_classes}, train={train_per_class}, test={test_per_class}"
        )
    out_dir = Path(out_dir)
    class_names = [f"class{k}" for k in range(n_classes)]
    manifests = []
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        rng = np.random.default_rng(derive_seed(seed, f"corpus/{split}"))
        entries = []
        for k in range(n_classes):
            for i in range(per_class):
                rel = f"{split}/{class_names[k]}_{i:04d}.wav"
                samples = synth_clip(k, n_classes, sample_rate, target_len, rng)
                save_wav(AudioClip(samples=samples, sample_rate=sample_rate, label=k, source_id=rel), out_dir / rel)
                entries.append((rel, k))
        manifests.append(write_manifest(out_dir / f"{split}.jsonl", entries, class_names, sample_rate, target_len))
    logger.info(f"Corpus synthétique: {n_classes} classes, {train_per_class}/{test_per_class} clips par classe dans {out_dir}")
    return manifests[0], manifests[1]
