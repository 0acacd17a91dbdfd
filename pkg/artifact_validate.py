"""
artifact_validate.py — Contrôles d'intégrité des artefacts du pipeline.

Trois points d'entrée, chacun renvoie :
    {"valid": bool, "errors": [str, ...], ...}

- validate_buffer    : trajectoires teacher (même archi, longueurs, epoch_tags, valeurs finies)
- validate_distilled : distilled set (labels équilibrés, alpha, features finies, dims vs config)
- validate_manifest  : manifeste de dataset (labels denses, chemins uniques, fichiers présents)

Les erreurs sont collectées, pas levées : l'appelant décide (TrajectoryBuffer lève
BufferIntegrityError, la CLI affiche le rapport).

Usage :
    from artifact_validate import validate_buffer
    result = validate_buffer(trajectories, max_start_epoch=10, target_steps=2)
    # result = {"valid": True, "errors": [], "n_trajectories": 3}
"""

import logging

import numpy as np

from config import RunConfig

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-6


# ============================================================
# Points d'entrée
# ============================================================

def validate_buffer(trajectories: list, max_start_epoch: int = 0, target_steps: int = 0) -> dict:
    """
    Vérifie un buffer de trajectoires. Chaque trajectoire doit contenir au moins
    max_start_epoch + target_steps + 1 snapshots.
    """
    if not trajectories:
        return {"valid": False, "errors": ["Buffer vide: aucune trajectoire"], "n_trajectories": 0}

    errors = []
    errors += _check_single_arch(trajectories)
    errors += _check_lengths(trajectories, max_start_epoch + target_steps + 1)
    errors += _check_epoch_tags(trajectories)
    errors += _check_finite_params(trajectories)

    return {"valid": not errors, "errors": errors, "n_trajectories": len(trajectories)}


def validate_distilled(dset, config: RunConfig | None = None) -> dict:
    """
    Vérifie un DistilledSet. Si `config` est absent, la config embarquée
    (provenance) est utilisée quand elle existe.
    """
    if config is None and dset.provenance:
        try:
            config = RunConfig.from_canonical(dset.provenance)
        except (ValueError, TypeError) as e:
            return {"valid": False, "errors": [f"Config embarquée illisible: {e}"]}

    errors = []
    errors += _check_balanced_labels(dset)
    errors += _check_alpha(dset)
    errors += _check_finite_features(dset)
    if config is not None:
        errors += _check_feature_dims(dset, config)

    return {"valid": not errors, "errors": errors, "n_samples": int(dset.labels.shape[0])}


def validate_manifest(manifest) -> dict:
    errors = []
    errors += _check_dense_labels(manifest)
    errors += _check_unique_paths(manifest)
    errors += _check_files_exist(manifest)
    return {"valid": not errors, "errors": errors, "n_clips": len(manifest.entries)}


# ============================================================
# Checks buffer
# ============================================================

def _check_single_arch(trajectories: list) -> list[str]:
    reference = trajectories[0].arch.canonical()
    return [
        f"Trajectoire #{i}: architecture {t.arch.canonical()} différente de {reference}"
        for i, t in enumerate(trajectories)
        if t.arch.canonical() != reference
    ]


def _check_lengths(trajectories: list, minimum: int) -> list[str]:
    errors = []
    lengths = {len(t) for t in trajectories}
    if len(lengths) > 1:
        errors.append(f"Longueurs de trajectoires inégales: {sorted(lengths)}")
    for i, t in enumerate(trajectories):
        if len(t) < minimum:
            errors.append(f"Trajectoire #{i}: {len(t)} snapshots, au moins {minimum} requis")
    return errors


def _check_epoch_tags(trajectories: list) -> list[str]:
    errors = []
    for i, t in enumerate(trajectories):
        tags = [p.epoch_tag for p in t.snapshots]
        if any(b <= a for a, b in zip(tags, tags[1:])):
            errors.append(f"Trajectoire #{i}: epoch_tags non strictement croissants {tags}")
    return errors


def _check_finite_params(trajectories: list) -> list[str]:
    errors = []
    for i, t in enumerate(trajectories):
        bad = [p.epoch_tag for p in t.snapshots if not np.all(np.isfinite(p.flat))]
        if bad:
            errors.append(f"Trajectoire #{i}: paramètres non finis aux époques {bad}")
    return errors


# ============================================================
# Checks distilled set
# ============================================================

def _check_balanced_labels(dset) -> list[str]:
    """Seulement quand cpc est fixé : chaque classe exactement cpc fois, groupées par classe."""
    if dset.cpc is None:
        return []
    k = dset.n_classes
    expected = np.repeat(np.arange(k), dset.cpc)
    if dset.labels.shape != expected.shape or not np.array_equal(np.sort(dset.labels), expected):
        counts = np.bincount(dset.labels, minlength=k).tolist()
        return [f"Labels déséquilibrés: comptes par classe {counts}, cpc={dset.cpc}"]
    return []


def _check_alpha(dset) -> list[str]:
    alpha = dset.alpha_value
    if not np.isfinite(alpha) or alpha < ALPHA_FLOOR:
        return [f"alpha={alpha} invalide (doit être fini et >= {ALPHA_FLOOR})"]
    return []


def _check_finite_features(dset) -> list[str]:
    n_bad = int(np.sum(~np.isfinite(dset.features_array())))
    return [f"{n_bad} valeurs de features non finies"] if n_bad else []


def _check_feature_dims(dset, config: RunConfig) -> list[str]:
    rows = 3 * config.n_coef if config.feature_mode == "fd_mfcc" else config.n_coef
    cols = (config.target_len - config.frame_len) // config.hop_len + 1
    shape = tuple(dset.features.shape[1:])
    if shape != (1, rows, cols):
        return [f"Dimensions des features {shape}, (1, {rows}, {cols}) attendues d'après la config"]
    return []


# ============================================================
# Checks manifeste
# ============================================================

def _check_dense_labels(manifest) -> list[str]:
    labels = {label for _, label in manifest.entries}
    expected = set(range(manifest.n_classes))
    if labels != expected:
        return [f"Labels {sorted(labels)} différents de {{0..{manifest.n_classes - 1}}}"]
    return []


def _check_unique_paths(manifest) -> list[str]:
    seen, dups = set(), []
    for path, _ in manifest.entries:
        if path in seen:
            dups.append(path)
        seen.add(path)
    return [f"Chemin dupliqué: {p}" for p in dups]


def _check_files_exist(manifest) -> list[str]:
    return [f"Fichier absent: {p}" for p, _ in manifest.entries if not manifest.resolve(p).is_file()]
