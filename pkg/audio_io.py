"""
audio_io.py — Lecture/écriture WAV et manifestes de dataset.

- load_wav : RIFF/WAVE PCM 16 bits ou float 32, mono ou multi-canal (moyenné)
- save_wav : écrit toujours du float 32 mono
- normalize_length : troncature en fin / zero-padding en fin
- Manifest : JSON-lines, une ligne d'en-tête puis une ligne par clip

Pas de rééchantillonnage : le manifeste déclare UN sample rate pour tout le
dataset et un clip à une autre fréquence est une erreur.
"""

import io
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from errors import ManifestError, ParameterError, PreconditionError, UnsupportedCodecError, WavFormatError

logger = logging.getLogger(__name__)

PCM16_SCALE = 1.0 / 32768.0


# ============================================================
# Types
# ============================================================

@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: int = 0
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate doit être > 0 (reçu {self.sample_rate})")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.samples)))


@dataclass
class Manifest:
    entries: list[tuple[str, int]]
    class_names: list[str]
    sample_rate: int
    target_len: int
    root: Path = field(default_factory=Path)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p


# ============================================================
# WAV
# ============================================================

def load_wav(path: str | Path, label: int = 0, expected_rate: int | None = None) -> AudioClip:
    """
    Charge un WAV en AudioClip mono, amplitudes dans [-1, 1].
    Les entiers 16 bits sont mis à l'échelle par 1/32768 ; le multi-canal est moyenné.
    """
    path = Path(path)
    return decode_wav(path.read_bytes(), path.stem, label, expected_rate)


def decode_wav(raw: bytes, name: str = "upload", label: int = 0, expected_rate: int | None = None) -> AudioClip:
    """Comme load_wav, depuis des octets (upload HTTP)."""
    _check_riff_header(raw, name)

    try:
        with warnings.catch_warnings():
            # Les WavFileWarning de scipy (EOF prématuré, chunk bizarre) deviennent des erreurs
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(io.BytesIO(raw))
    except wavfile.WavFileWarning as e:
        raise WavFormatError(f"{name}: {e}")
    except ValueError as e:
        if "Unknown wave file format" in str(e) or "Unsupported" in str(e):
            raise UnsupportedCodecError(f"{name}: {e}")
        raise WavFormatError(f"{name}: {e}")

    if data.dtype == np.int16:
        samples = data.astype(np.float64) * PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{name}: codec {data.dtype} non supporté (PCM16 ou float32 uniquement)")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)

    if expected_rate is not None and rate != expected_rate:
        raise ParameterError(f"{name}: sample rate {rate} Hz, le dataset attend {expected_rate} Hz")

    clip = AudioClip(samples=samples, sample_rate=int(rate), label=label, source_id=name)
    if not clip.is_finite:
        raise WavFormatError(f"{name}: échantillons non finis")
    return clip


def _check_riff_header(raw: bytes, name: str) -> None:
    """Vérifie magic RIFF/WAVE et que la taille déclarée ne dépasse pas le fichier."""
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{name}: en-tête RIFF/WAVE absent")
    declared = int.from_bytes(raw[4:8], "little") + 8
    if declared > len(raw):
        raise WavFormatError(f"{name}: tronqué, l'en-tête déclare {declared} octets, le fichier en contient {len(raw)}")


def encode_wav(clip: AudioClip) -> bytes:
    """WAV float 32 mono en mémoire."""
    if not clip.is_finite:
        raise PreconditionError(f"save_wav: le clip {clip.source_id!r} contient des valeurs non finies")
    buf = io.BytesIO()
    wavfile.write(buf, clip.sample_rate, clip.samples.astype(np.float32))
    return buf.getvalue()


def save_wav(clip: AudioClip, path: str | Path) -> None:
    """Écrit un WAV float 32 mono. load_wav(save_wav(x)) restitue x à 1e-7 près."""
    data = encode_wav(clip)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def normalize_length(clip: AudioClip, target_len: int) -> AudioClip:
    """Tronque en fin ou complète par des zéros en fin ; le label est conservé."""
    if target_len <= 0:
        raise ParameterError(f"target_len doit être > 0 (reçu {target_len})")
    n = len(clip)
    if n >= target_len:
        samples = clip.samples[:target_len].copy()
    else:
        samples = np.concatenate([clip.samples, np.zeros(target_len - n)])
    return replace(clip, samples=samples)


# ============================================================
# Manifeste
# ============================================================

def load_manifest(path: str | Path) -> Manifest:
    """
    Lit un manifeste JSON-lines :
      {"classes": [...], "sample_rate": 8000, "target_len": 8000}
      {"path": "...", "label": 3}
      ...
    Les labels doivent couvrir exactement {0, ..., K-1}, les chemins être uniques.
    """
    path = Path(path)
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ManifestError(f"{path}: manifeste vide")

    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: JSON invalide ({e})")

    if "classes" not in header:
        raise ManifestError(f"{path}: la première ligne doit être l'en-tête {{classes, sample_rate, target_len}}")

    entries = []
    for rec in records:
        if "path" not in rec or "label" not in rec:
            raise ManifestError(f"{path}: entrée sans path/label: {rec}")
        entries.append((str(rec["path"]), int(rec["label"])))

    manifest = Manifest(
        entries=entries,
        class_names=[str(c) for c in header["classes"]],
        sample_rate=int(header.get("sample_rate", 8000)),
        target_len=int(header.get("target_len", 8000)),
        root=path.parent,
    )
    _check_manifest(manifest, path)
    return manifest


def _check_manifest(manifest: Manifest, path: Path) -> None:
    paths = [p for p, _ in manifest.entries]
    if len(set(paths)) != len(paths):
        raise ManifestError(f"{path}: chemins dupliqués")
    labels = {label for _, label in manifest.entries}
    expected = set(range(manifest.n_classes))
    if labels != expected:
        raise ManifestError(
            f"{path}: labels {sorted(labels)} différents de {{0..{manifest.n_classes - 1}}}"
        )


def write_manifest(path: str | Path, entries: list[tuple[str, int]], class_names: list[str],
                   sample_rate: int, target_len: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"classes": class_names, "sample_rate": sample_rate, "target_len": target_len}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"label": label, "path": p}, sort_keys=True) for p, label in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest: Manifest) -> list[AudioClip]:
    """Charge et normalise en longueur tous les clips du manifeste."""
    clips = []
    for rel_path, label in manifest.entries:
        clip = load_wav(manifest.resolve(rel_path), label=label, expected_rate=manifest.sample_rate)
        clips.append(normalize_length(clip, manifest.target_len))
    logger.info(f"Dataset chargé: {len(clips)} clips, {manifest.n_classes} classes")
    return clips
