"""
config.py — Configuration du toolkit.

Deux niveaux :
  1. Réglages "process" lus dans l'environnement au chargement du module
     (répertoire de travail, niveau de log, retries, workers).
  2. RunConfig : tous les paramètres d'une expérience. Sérialisée en JSON
     canonique (clés triées, séparateurs compacts) et embarquée dans chaque
     artefact produit (buffer, distilled set, rapport).

Priorité de fusion : défauts du dataclass < fichier JSON (--config) < flags CLI.
"""

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from errors import ParameterError

logger = logging.getLogger(__name__)

# ============================================================
# Réglages process (environnement)
# ============================================================

WORKDIR = os.environ.get("AUDIO_DISTILL_WORKDIR", "./work")
LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")

# Nombre de tirages de l'époque de départ avant d'abandonner (perte de matching dégénérée)
MAX_START_RETRIES = int(os.environ.get("MAX_START_RETRIES", "8"))

# Workers pour l'évaluation des seeds ; n'influence pas les résultats
EVAL_WORKERS = int(os.environ.get("EVAL_WORKERS", "1"))

# Fréquence des logs de progression de la distillation
LOG_EVERY = int(os.environ.get("LOG_EVERY", "50"))

FEATURE_MODES = ("fd_mfcc", "mfcc")
METHODS = ("mtt", "dcgm", "random", "herding", "whole")
INIT_MODES = ("real", "noise")


# ============================================================
# RunConfig
# ============================================================

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset_tag: str = "tones4"

    # Corpus synthétique
    n_classes: int = 4
    train_per_class: int = 40
    test_per_class: int = 20

    # Audio / DSP
    sample_rate: int = 8000
    target_len: int = 8000
    frame_ms: float = 20.0
    hop_ms: float = 15.0
    fft_len: int = 256
    n_mels: int = 40
    n_coef: int = 13
    preemph: float = 0.97
    f_min: float = 0.0
    f_max: float = 0.0  # 0 = sample_rate / 2
    db_ref: float = 1.0
    feature_mode: str = "fd_mfcc"

    # Architectures ("profondeur x largeur")
    arch_depth: int = 3
    arch_width: int = 16
    eval_archs: str = "3x16,2x16"

    # Teachers
    n_teachers: int = 3
    teacher_epochs: int = 20
    teacher_lr: float = 0.05
    batch_size: int = 32

    # Distillation
    method: str = "mtt"
    methods: str = "mtt,dcgm,random,herding"
    cpc: int = 10
    cpcs: str = "1,10"
    init: str = "real"
    outer_iters: int = 150
    inner_steps: int = 5
    target_steps: int = 2
    max_start_epoch: int = 10
    outer_lr: float = 100.0
    alpha_lr: float = 1e-5
    alpha_init: float = 0.01
    syn_batch_size: int = 10  # 0 = tout le distilled set à chaque pas
    dcgm_iters: int = 50
    dcgm_loops: int = 5
    dcgm_real_batch: int = 16
    dcgm_lr: float = 0.1
    dcgm_net_lr: float = 0.01

    # Évaluation
    eval_epochs: int = 50
    eval_seeds: int = 5
    eval_lr: float = 0.05

    # Reconstruction
    gla_iters: int = 60
    nnls_iters: int = 200
    sigmas: str = "0,0.005,0.01"

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ParameterError(f"feature_mode inconnu: {self.feature_mode!r} (attendu {FEATURE_MODES})")
        if self.method not in METHODS:
            raise ParameterError(f"method inconnue: {self.method!r} (attendu {METHODS})")
        if self.init not in INIT_MODES:
            raise ParameterError(f"init inconnu: {self.init!r} (attendu {INIT_MODES})")
        for name in ("n_classes", "sample_rate", "target_len", "n_teachers", "eval_seeds", "gla_iters"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} doit être > 0 (reçu {getattr(self, name)})")

    def canonical(self) -> str:
        """JSON canonique : deux configs égales donnent exactement les mêmes octets."""
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_canonical(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def replace(self, **changes) -> "RunConfig":
        data = asdict(self)
        data.update(changes)
        return RunConfig(**data)

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_ms * self.sample_rate / 1000.0))

    @property
    def hop_len(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    def arch_pairs(self) -> list[tuple[int, int]]:
        """Parse eval_archs ("3x32,2x16") en [(3, 32), (2, 16)]."""
        pairs = []
        for item in parse_list(self.eval_archs, str):
            try:
                depth, width = item.lower().split("x")
                pairs.append((int(depth), int(width)))
            except ValueError:
                raise ParameterError(f"Architecture invalide dans eval_archs: {item!r} (format 'DxW')")
        return pairs

    def sigma_list(self) -> list[float]:
        return parse_list(self.sigmas, float)

    def cpc_list(self) -> list[int]:
        return parse_list(self.cpcs, int)

    def method_list(self) -> list[str]:
        methods = parse_list(self.methods, str)
        for m in methods:
            if m not in METHODS:
                raise ParameterError(f"method inconnue dans methods: {m!r}")
        return methods


def parse_list(text: str, cast) -> list:
    """'0,0.005, 0.01' -> [0.0, 0.005, 0.01] ; chaîne vide -> []."""
    return [cast(part.strip()) for part in str(text).split(",") if part.strip()]


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """
    Construit une RunConfig : défauts < fichier JSON < overrides.
    Les overrides à None sont ignorés (flags CLI non fournis).
    """
    known = {f.name: f.type for f in fields(RunConfig)}
    data = asdict(RunConfig())

    if path:
        file_data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = sorted(set(file_data) - set(known))
        if unknown:
            raise ParameterError(f"Clés inconnues dans {path}: {', '.join(unknown)}")
        data.update(file_data)
        logger.info(f"Config chargée depuis {path}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ParameterError(f"Paramètre inconnu: {key}")
        data[key] = value

    # Coercition de type (JSON ne distingue pas 1 et 1.0)
    for f in fields(RunConfig):
        try:
            data[f.name] = f.type(data[f.name])
        except (TypeError, ValueError):
            raise ParameterError(f"Valeur invalide pour {f.name}: {data[f.name]!r}")

    return RunConfig(**data)


# ============================================================
# Seeds dérivées
# ============================================================

def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """
    Dérive une sous-seed stable à partir de la seed maître.
    Le tag est haché avec crc32 (stable entre processus, contrairement à hash()).
    """
    seq = np.random.SeedSequence([int(master), zlib.crc32(tag.encode("utf-8")), int(index)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])
