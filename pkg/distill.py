"""
distill.py — Cœur de la distillation : matching de trajectoires (MTT) avec learning
rate entraînable α, alternative par gradient matching (DCGM), et coresets (random, herding).

MTT, une itération externe :
  1. tirer une trajectoire teacher et une époque de départ t < T'
  2. θ ← θ_teacher(t), puis N pas de SGD différentiables sur le distilled set (lr α)
  3. L = ||θ_N - θ_teacher(t+M)||² / ||θ_teacher(t) - θ_teacher(t+M)||²
  4. un pas de gradient sur les features (outer_lr) et sur α (alpha_lr), α >= 1e-6

Le dénominateur est calculé en float64 sur les snapshots (constantes) ; s'il est
< 1e-12 le teacher n'a pas bougé et l'époque de départ est re-tirée.

Fichier distilled set : une ligne d'en-tête JSON (K, cpc, dims, alpha, labels,
config canonique, référence des stats, historique de perte) puis les features
float32 little-endian.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

import artifact_validate
import models
import tensor_autodiff as ad
from config import LOG_EVERY, MAX_START_RETRIES
from errors import ArtifactFormatError, BufferIntegrityError, ParameterError, StagnantTeacherError
from models import ArchDescriptor, ParamVector, Trajectory
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-6
DENOM_FLOOR = 1e-12
NORM_FLOOR = 1e-12


# ============================================================
# Types
# ============================================================

@dataclass
class DistilledSet:
    features: Tensor
    labels: np.ndarray
    alpha: Tensor
    provenance: str = ""
    cpc: int | None = None
    method: str = "mtt"
    arch: str = ""
    stats_ref: str = ""
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ParameterError(
                f"DistilledSet: {self.features.shape[0]} features pour {self.labels.shape[0]} labels"
            )

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def alpha_value(self) -> float:
        return float(self.alpha.data.reshape(-1)[0])

    def features_array(self) -> np.ndarray:
        return np.asarray(self.features.data, dtype=np.float32)


@dataclass
class TrajectoryBuffer:
    trajectories: list[Trajectory]
    max_start_epoch: int
    target_steps: int = 1

    def __post_init__(self):
        report = artifact_validate.validate_buffer(self.trajectories, self.max_start_epoch, self.target_steps)
        if not report["valid"]:
            raise BufferIntegrityError("; ".join(report["errors"]))

    @property
    def arch(self) -> ArchDescriptor:
        return self.trajectories[0].arch


# ============================================================
# MTT
# ============================================================

def _flat(p) -> np.ndarray:
    return p.flat if isinstance(p, ParamVector) else np.asarray(p)


def matching_denominator(teacher_start, teacher_target) -> float:
    diff = _flat(teacher_start).astype(np.float64) - _flat(teacher_target).astype(np.float64)
    denom = float(np.dot(diff, diff))
    if not denom >= DENOM_FLOOR:
        raise StagnantTeacherError(f"Teacher immobile: ||θ(t) - θ(t+M)||² = {denom:.3e} < {DENOM_FLOOR}")
    return denom


def mtt_loss(student_end, teacher_start, teacher_target) -> Tensor:
    """||θ_D(t+N) - θ_S(t+M)||² / ||θ_S(t) - θ_S(t+M)||² sur les vecteurs plats."""
    denom = matching_denominator(teacher_start, teacher_target)
    student = student_end if isinstance(student_end, Tensor) else Tensor(_flat(student_end))
    target = Tensor(_flat(teacher_target))
    if student.shape != target.shape:
        raise ParameterError(f"mtt_loss: vecteurs de formes {student.shape} et {target.shape}")
    return ad.mul(ad.sq_norm(ad.sub(student, target)), 1.0 / denom)


def _syn_batch(n: int, syn_batch_size: int, rng: np.random.Generator) -> np.ndarray | None:
    """Indices du batch distillé d'un pas interne ; None = tout le set."""
    if syn_batch_size <= 0 or syn_batch_size >= n:
        return None
    return np.sort(rng.choice(n, size=syn_batch_size, replace=False))


def unrolled_matching_loss(features: Tensor, labels: np.ndarray, alpha: Tensor, arch: ArchDescriptor,
                           teacher_start, teacher_target, inner_steps: int,
                           syn_batch_size: int = 0, rng: np.random.Generator | None = None) -> Tensor:
    """N pas de SGD différentiables depuis teacher_start, puis la perte de matching (nœud du graphe)."""
    rng = rng or np.random.default_rng(0)
    theta = Tensor(_flat(teacher_start), requires_grad=True)
    for _ in range(inner_steps):
        idx = _syn_batch(features.shape[0], syn_batch_size, rng)
        batch, y = (features, labels) if idx is None else (ad.take_rows(features, idx), labels[idx])
        inner = models.loss_on(theta, arch, batch, y)
        (theta,) = ad.sgd_step_differentiable([theta], inner, alpha)
    return mtt_loss(theta, teacher_start, teacher_target)


def _sample_start(buffer: TrajectoryBuffer, target_steps: int, rng: np.random.Generator):
    """Tire (trajectoire, t) jusqu'à trouver un dénominateur non dégénéré."""
    for attempt in range(MAX_START_RETRIES):
        traj = buffer.trajectories[int(rng.integers(len(buffer.trajectories)))]
        t = int(rng.integers(buffer.max_start_epoch))
        try:
            matching_denominator(traj[t], traj[t + target_steps])
            return traj[t], traj[t + target_steps]
        except StagnantTeacherError as e:
            logger.warning(f"Époque de départ {t} ignorée (essai {attempt + 1}/{MAX_START_RETRIES}): {e}")
    raise StagnantTeacherError(f"Aucune époque de départ exploitable après {MAX_START_RETRIES} tirages")


def mtt_distill(buffer: TrajectoryBuffer, init: DistilledSet, iters: int, inner_steps: int, target_steps: int,
                max_start_epoch: int, outer_lr: float, seed: int, alpha_lr: float | None = None,
                syn_batch_size: int = 0, log_every: int = LOG_EVERY) -> DistilledSet:
    """Boucle externe MTT ; renvoie un NOUVEAU DistilledSet (labels inchangés)."""
    if inner_steps < 1 or target_steps < 1:
        raise ParameterError(f"mtt_distill: inner_steps ({inner_steps}) et target_steps ({target_steps}) doivent être >= 1")
    if max_start_epoch != buffer.max_start_epoch or target_steps > buffer.target_steps:
        buffer = TrajectoryBuffer(buffer.trajectories, max_start_epoch, target_steps)
    alpha_lr = outer_lr if alpha_lr is None else alpha_lr

    rng = np.random.default_rng(seed)
    arch = buffer.arch
    x = init.features_array().copy()
    alpha = init.alpha_value
    history = list(init.loss_history)

    for it in range(iters):
        start, target = _sample_start(buffer, target_steps, rng)
        features = Tensor(x, requires_grad=True)
        lr = Tensor(alpha, requires_grad=True)
        loss = unrolled_matching_loss(features, init.labels, lr, arch, start, target, inner_steps,
                                      syn_batch_size, rng)
        g_x, g_alpha = ad.grad(loss, [features, lr])

        value = loss.item()
        if not (np.isfinite(value) and np.all(np.isfinite(g_x.data)) and np.isfinite(g_alpha.item())):
            logger.warning(f"Itération {it} ignorée: perte ou gradient non fini (perte={value})")
            continue

        x = (x - outer_lr * g_x.data).astype(np.float32)
        alpha = max(alpha - alpha_lr * g_alpha.item(), ALPHA_FLOOR)
        history.append(value)
        if log_every and (it + 1) % log_every == 0:
            logger.info(f"MTT {it + 1}/{iters}: perte {value:.4f}, alpha {alpha:.5f}")

    return replace(init, features=Tensor(x, requires_grad=True), alpha=Tensor(alpha, requires_grad=True),
                   method="mtt", arch=arch.canonical(), loss_history=history)


def mean_mtt_loss(buffer: TrajectoryBuffer, dset: DistilledSet, inner_steps: int, target_steps: int) -> float:
    """
    Perte de matching en mode évaluation : moyenne sur toutes les trajectoires et toutes
    les époques de départ t < T', set distillé complet à chaque pas, pas de mise à jour.
    Les départs au dénominateur dégénéré sont ignorés.
    """
    arch = buffer.arch
    x = dset.features_array()
    alpha = dset.alpha_value
    values = []
    for traj in buffer.trajectories:
        for t in range(buffer.max_start_epoch):
            try:
                denom = matching_denominator(traj[t], traj[t + target_steps])
            except StagnantTeacherError:
                continue
            flat = traj[t].flat.copy()
            for _ in range(inner_steps):
                theta = Tensor(flat, requires_grad=True)
                (g,) = ad.grad(models.loss_on(theta, arch, x, dset.labels), [theta])
                flat = (flat - alpha * g.data).astype(np.float32)
            diff = flat.astype(np.float64) - traj[t + target_steps].flat.astype(np.float64)
            values.append(float(np.dot(diff, diff)) / denom)
    if not values:
        raise StagnantTeacherError("mean_mtt_loss: aucune époque de départ exploitable")
    return float(np.mean(values))


# ============================================================
# Initialisation / coresets
# ============================================================

def _class_indices(labels: np.ndarray, cpc: int) -> list[np.ndarray]:
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1
    groups = [np.flatnonzero(labels == c) for c in range(n_classes)]
    for c, idx in enumerate(groups):
        if idx.size < cpc:
            raise ParameterError(f"Classe {c}: {idx.size} échantillons, cpc={cpc} demandés")
    return groups


def coreset_random(labels: np.ndarray, cpc: int, seed: int) -> np.ndarray:
    """cpc indices par classe, uniformes sans remise, groupés par classe croissante."""
    if cpc < 1:
        raise ParameterError(f"coreset_random: cpc doit être >= 1 (reçu {cpc})")
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.choice(idx, size=cpc, replace=False) for idx in _class_indices(labels, cpc)])


def _herd(points: np.ndarray, cpc: int) -> list[int]:
    mu = points.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(points.shape[0], dtype=bool)
    for j in range(1, cpc + 1):
        dist = np.linalg.norm(mu[None, :] - (running[None, :] + points) / j, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))  # premier minimum = plus petit indice
        chosen.append(pick)
        available[pick] = False
        running += points[pick]
    return chosen


def coreset_herding(features: np.ndarray, labels: np.ndarray, cpc: int) -> np.ndarray:
    """Herding glouton par classe dans l'espace des features aplaties ; déterministe."""
    if cpc < 1:
        raise ParameterError(f"coreset_herding: cpc doit être >= 1 (reçu {cpc})")
    flat = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    selected = []
    for idx in _class_indices(labels, cpc):
        selected.extend(idx[_herd(flat[idx], cpc)])
    return np.asarray(selected, dtype=np.int64)


def subset_distilled_set(x: np.ndarray, y: np.ndarray, indices: np.ndarray | None, alpha: float,
                         method: str, cpc: int | None, provenance: str = "") -> DistilledSet:
    """Enveloppe un sous-ensemble réel (coreset, ou dataset entier si indices=None)."""
    if indices is not None:
        x, y = x[indices], y[indices]
    return DistilledSet(features=Tensor(np.asarray(x, dtype=np.float32)), labels=y,
                        alpha=Tensor(alpha), provenance=provenance, cpc=cpc, method=method)


def init_distilled_set(x: np.ndarray, y: np.ndarray, cpc: int, seed: int, init: str = "real",
                       alpha_init: float = 0.01, provenance: str = "") -> DistilledSet:
    """
    Set initial : `real` tire cpc vrais échantillons par classe, `noise` une gaussienne
    standard (domaine standardisé). Labels : classe c répétée cpc fois.
    """
    if alpha_init < ALPHA_FLOOR:
        raise ParameterError(f"alpha_init doit être >= {ALPHA_FLOOR} (reçu {alpha_init})")
    n_classes = int(np.max(y)) + 1
    labels = np.repeat(np.arange(n_classes), cpc)
    if init == "real":
        feats = np.asarray(x, dtype=np.float32)[coreset_random(y, cpc, seed)]
    elif init == "noise":
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((n_classes * cpc,) + tuple(x.shape[1:])).astype(np.float32)
    else:
        raise ParameterError(f"init inconnu: {init!r}")
    return DistilledSet(features=Tensor(feats, requires_grad=True), labels=labels,
                        alpha=Tensor(alpha_init, requires_grad=True), provenance=provenance, cpc=cpc)


# ============================================================
# DCGM
# ============================================================

def gradient_match_distance(real_layers: list, syn_layers: list) -> Tensor:
    """
    Σ_l ||g_real^l/||g_real^l|| - g_syn^l/||g_syn^l|| ||² sur les tenseurs de paramètres.
    Une couche dont l'un des gradients est nul est ignorée.
    """
    if len(real_layers) != len(syn_layers):
        raise ParameterError(f"gradient_match_distance: {len(real_layers)} couches réelles, {len(syn_layers)} synthétiques")
    total = Tensor(0.0)
    for real, syn in zip(real_layers, syn_layers):
        real = np.asarray(real.data if isinstance(real, Tensor) else real, dtype=np.float64)
        syn = ad.as_tensor(syn)
        real_norm = float(np.linalg.norm(real))
        syn_norm = float(np.sqrt(np.sum(syn.data.astype(np.float64) ** 2)))
        if real_norm < NORM_FLOOR or syn_norm < NORM_FLOOR:
            continue
        unit_syn = ad.div(syn, ad.sqrt(ad.sq_norm(syn)))
        total = ad.add(total, ad.sq_norm(ad.sub(Tensor(real / real_norm), unit_syn)))
    return total


def dcgm_distill(x_real: np.ndarray, y_real: np.ndarray, init: DistilledSet, arch: ArchDescriptor, iters: int,
                 loops: int, real_batch: int, lr: float, net_lr: float, seed: int,
                 log_every: int = LOG_EVERY) -> DistilledSet:
    """
    Gradient matching : pour chaque itération un réseau frais (seed dérivée), puis `loops` fois
    (a) par classe, distance entre gradients réels et synthétiques, pas sur les features ;
    (b) un pas de SGD du réseau sur le distilled set.
    """
    rng = np.random.default_rng(seed)
    x = init.features_array().copy()
    labels = init.labels
    y_real = np.asarray(y_real, dtype=np.int64)
    groups = _class_indices(y_real, 1)
    history = list(init.loss_history)

    for it in range(iters):
        flat = models.build(arch, int(rng.integers(2**31))).flat
        dists = []
        for _ in range(loops):
            features = Tensor(x, requires_grad=True)
            theta = Tensor(flat, requires_grad=True)
            distance = Tensor(0.0)
            for c, idx in enumerate(groups):
                pick = rng.choice(idx, size=min(real_batch, idx.size), replace=False)
                (g_real,) = ad.grad(models.loss_on(theta, arch, x_real[pick], y_real[pick]), [theta])
                syn_idx = np.flatnonzero(labels == c)
                if syn_idx.size == 0:
                    continue
                syn_loss = models.loss_on(theta, arch, ad.take_rows(features, syn_idx), labels[syn_idx])
                (g_syn,) = ad.grad(syn_loss, [theta], create_graph=True)
                distance = ad.add(distance, gradient_match_distance(
                    models.split_layers(g_real.data, arch), models.split_layers(g_syn, arch)))

            value = distance.item()
            if distance.requires_grad:
                (g_x,) = ad.grad(distance, [features])
                if np.all(np.isfinite(g_x.data)):
                    x = (x - lr * g_x.data).astype(np.float32)
                else:
                    logger.warning(f"DCGM itération {it}: gradient non fini, pas ignoré")
            dists.append(value)

            net_theta = Tensor(flat, requires_grad=True)
            (g_net,) = ad.grad(models.loss_on(net_theta, arch, x, labels), [net_theta])
            flat = (flat - net_lr * g_net.data).astype(np.float32)

        history.append(float(np.mean(dists)))
        if log_every and (it + 1) % log_every == 0:
            logger.info(f"DCGM {it + 1}/{iters}: distance {history[-1]:.4f}")

    return replace(init, features=Tensor(x, requires_grad=True), method="dcgm",
                   arch=arch.canonical(), loss_history=history)


# ============================================================
# Fichiers
# ============================================================

def save_distilled(dset: DistilledSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "alpha": dset.alpha_value,
        "arch": dset.arch,
        "config": dset.provenance,
        "cpc": dset.cpc,
        "k": dset.n_classes,
        "labels": dset.labels.tolist(),
        "loss_history": [float(v) for v in dset.loss_history],
        "method": dset.method,
        "shape": list(dset.features.shape),
        "stats_ref": dset.stats_ref,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    path.write_bytes(head + dset.features_array().astype("<f4").tobytes(order="C"))
    return path


def load_distilled(path: str | Path) -> DistilledSet:
    path = Path(path)
    return decode_distilled(path.read_bytes(), path.name)


def decode_distilled(raw: bytes, name: str = "upload") -> DistilledSet:
    newline = raw.find(b"\n")
    if newline < 0:
        raise ArtifactFormatError(f"{name}: en-tête JSON absent")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        shape = tuple(int(d) for d in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise ArtifactFormatError(f"{name}: en-tête invalide ({e})")
    payload = raw[newline + 1 :]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise ArtifactFormatError(f"{name}: payload de {len(payload)} octets, {expected} attendus")
    feats = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return DistilledSet(
        features=Tensor(feats, requires_grad=True),
        labels=np.asarray(header["labels"], dtype=np.int64),
        alpha=Tensor(float(header["alpha"]), requires_grad=True),
        provenance=header.get("config", ""),
        cpc=header.get("cpc"),
        method=header.get("method", "mtt"),
        arch=header.get("arch", ""),
        stats_ref=header.get("stats_ref", ""),
        loss_history=list(header.get("loss_history", [])),
    )
