"""
harness.py — Orchestration bout en bout et évaluation.

  corpus/manifestes -> FD-MFCC standardisés -> buffer de trajectoires teacher
  -> bras de distillation (mtt, dcgm, random, herding) + bras "whole"
  -> évaluation (modèles frais entraînés sur le set, lr = α du set)
  -> grille cross-architecture (un buffer et un set MTT par architecture d'évaluation)
  -> reconstruction audio -> ré-extraction -> closure features + bruit -> évaluation
  -> rapport CSV + markdown

Toutes les seeds dérivent de RunConfig.seed via config.derive_seed ; deux runs
de même config produisent des artefacts identiques octet pour octet.
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import distill
import features
import models
from audio_io import AudioClip, load_dataset, load_manifest, normalize_length, save_wav
from config import EVAL_WORKERS, RunConfig, derive_seed
from corpus import synthesize_corpus
from distill import DistilledSet, TrajectoryBuffer
from errors import ParameterError
from features import FeatureMap, FeatureParams, FeatureStats
from models import ArchDescriptor
from reconstruct import ReconstructParams, reconstruct_clip, save_residual_history
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["dataset", "method", "distill_arch", "eval_arch", "cpc", "seeds", "mean_acc", "std_acc"]
CLOSURE_COLUMNS = ["dataset", "method", "cpc", "items", "mean_rms", "max_rms", "mean_rel"]
MD_COLUMNS = ["dataset", "method", "distill_arch", "eval_arch", "cpc", "mean", "std"]


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class EvalRow:
    dataset_tag: str
    method: str
    distill_arch: str
    eval_arch: str
    cpc: int | None
    seeds: int
    mean_acc: float
    std_acc: float

    def __post_init__(self):
        if self.seeds < 1:
            raise ParameterError(f"EvalRow: seeds doit être >= 1 (reçu {self.seeds})")
        if not 0.0 <= self.mean_acc <= 1.0:
            raise ParameterError(f"EvalRow: mean_acc hors de [0, 1] ({self.mean_acc})")

    @property
    def cpc_label(self) -> str:
        return "all" if self.cpc is None else str(self.cpc)

    def csv_values(self) -> list[str]:
        return [self.dataset_tag, self.method, self.distill_arch, self.eval_arch, self.cpc_label,
                str(self.seeds), f"{self.mean_acc:.6f}", f"{self.std_acc:.6f}"]


@dataclass(frozen=True)
class FeatureClosure:
    """Écart entre le bloc MFCC d'un set et celui de sa ré-extraction après reconstruction (domaine standardisé)."""

    dataset_tag: str
    method: str
    cpc: int | None
    items: int
    mean_rms: float
    max_rms: float
    mean_rel: float

    def csv_values(self) -> list[str]:
        return [self.dataset_tag, self.method, "all" if self.cpc is None else str(self.cpc), str(self.items),
                f"{self.mean_rms:.6f}", f"{self.max_rms:.6f}", f"{self.mean_rel:.6f}"]


@dataclass
class ClosureResult:
    rows: list[EvalRow]
    feature: FeatureClosure


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config: str = ""
    grid: list[EvalRow] = field(default_factory=list)
    closures: list[FeatureClosure] = field(default_factory=list)

    def extend(self, rows: list[EvalRow]) -> None:
        self.rows.extend(rows)


class Workspace:
    """Arborescence fixe d'un répertoire de travail."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def train_manifest(self) -> Path:
        return self.corpus_dir / "train.jsonl"

    @property
    def test_manifest(self) -> Path:
        return self.corpus_dir / "test.jsonl"

    def features_dir(self, split: str) -> Path:
        return self.root / "features" / split

    @property
    def stats_path(self) -> Path:
        return self.root / "features" / "stats.json"

    @property
    def buffer_dir(self) -> Path:
        return self.root / "buffer"

    def trajectory_path(self, index: int, arch_tag: str | None = None) -> Path:
        """Buffer principal dans buffer/, buffers des autres architectures dans buffer/<arch_tag>/."""
        root = self.buffer_dir if arch_tag is None else self.buffer_dir / arch_tag
        return root / f"teacher_{index:02d}.traj"

    def distilled_path(self, method: str, cpc: int | None, arch_tag: str | None = None) -> Path:
        suffix = "" if arch_tag is None else f"_{arch_tag}"
        return self.root / "distilled" / f"{method}_cpc{'all' if cpc is None else cpc}{suffix}.dset"

    def recon_dir(self, name: str) -> Path:
        return self.root / "recon" / name

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def rows_dir(self) -> Path:
        return self.reports_dir / "rows"


# ============================================================
# Features
# ============================================================

def feature_params(config: RunConfig) -> FeatureParams:
    return FeatureParams(
        sample_rate=config.sample_rate, frame_ms=config.frame_ms, hop_ms=config.hop_ms, fft_len=config.fft_len,
        n_mels=config.n_mels, n_coef=config.n_coef, preemph=config.preemph, f_min=config.f_min,
        f_max=config.f_max, db_ref=config.db_ref, mode=config.feature_mode,
    )


def prepare_features(config: RunConfig, ws: Workspace, train_manifest: Path | None = None,
                     test_manifest: Path | None = None) -> tuple[list[FeatureMap], list[FeatureMap], FeatureStats]:
    """Extrait train/test, ajuste les stats sur train, standardise les deux, écrit les fichiers."""
    params = feature_params(config)
    train = features.extract_all(load_dataset(load_manifest(train_manifest or ws.train_manifest)), params)
    test = features.extract_all(load_dataset(load_manifest(test_manifest or ws.test_manifest)), params)
    stats = features.fit_stats(train)
    train = [features.standardize(m, stats) for m in train]
    test = [features.standardize(m, stats) for m in test]

    for split, maps in (("train", train), ("test", test)):
        for i, fmap in enumerate(maps):
            features.save_feature_map(fmap, ws.features_dir(split) / f"{i:05d}.fdmf")
    features.save_stats(stats, ws.stats_path)
    return train, test, stats


def load_split(ws: Workspace, split: str) -> tuple[np.ndarray, np.ndarray]:
    paths = sorted(ws.features_dir(split).glob("*.fdmf"))
    if not paths:
        raise ParameterError(f"Aucune carte de features dans {ws.features_dir(split)} (lancer 'extract')")
    return features.stack_maps([features.load_feature_map(p) for p in paths])


def distill_arch(config: RunConfig, x: np.ndarray, n_classes: int) -> ArchDescriptor:
    return models.arch_for(config.arch_depth, config.arch_width, x.shape[2], x.shape[3], n_classes)


def eval_arches(config: RunConfig, x: np.ndarray, n_classes: int) -> list[ArchDescriptor]:
    return [models.arch_for(d, w, x.shape[2], x.shape[3], n_classes) for d, w in config.arch_pairs()]


def arch_tag(arch: ArchDescriptor) -> str:
    """Étiquette courte "d<profondeur>w<largeur>" pour les chemins du workspace."""
    return f"d{arch.depth}w{arch.width}"


def _secondary_tag(arch: ArchDescriptor, config: RunConfig, x: np.ndarray, n_classes: int) -> str | None:
    """None pour l'architecture de distillation principale, son étiquette sinon."""
    if arch.canonical() == distill_arch(config, x, n_classes).canonical():
        return None
    return arch_tag(arch)


# ============================================================
# Buffer teacher
# ============================================================

def build_buffer(x: np.ndarray, y: np.ndarray, config: RunConfig, ws: Workspace | None = None,
                 arch: ArchDescriptor | None = None) -> TrajectoryBuffer:
    """
    Entraîne n_teachers teachers (seeds distinctes) ; persiste les trajectoires si ws est fourni.
    `arch` choisit une autre architecture que celle de distillation (grille cross-architecture).
    """
    n_classes = int(y.max()) + 1
    arch = arch or distill_arch(config, x, n_classes)
    tag = _secondary_tag(arch, config, x, n_classes)
    trajectories = []
    for i in range(config.n_teachers):
        seed = derive_seed(config.seed, "teacher" if tag is None else f"teacher/{tag}", i)
        traj = models.train_epochs(models.build(arch, seed), x, y, config.teacher_epochs, config.teacher_lr,
                                   config.batch_size, seed)
        acc = models.evaluate_accuracy(traj[-1], arch, x, y)
        logger.info(f"Teacher {i + 1}/{config.n_teachers} ({arch_tag(arch)}) entraîné "
                    f"({config.teacher_epochs} époques), précision train {acc:.3f}")
        trajectories.append(traj)
        if ws is not None:
            models.save_trajectory(traj, ws.trajectory_path(i, tag), config.canonical())
    return TrajectoryBuffer(trajectories, config.max_start_epoch, config.target_steps)


def load_buffer(ws: Workspace, config: RunConfig) -> TrajectoryBuffer:
    paths = sorted(ws.buffer_dir.glob("*.traj"))
    if not paths:
        raise ParameterError(f"Aucune trajectoire dans {ws.buffer_dir} (lancer 'teachers')")
    return TrajectoryBuffer([models.load_trajectory(p) for p in paths], config.max_start_epoch, config.target_steps)


# ============================================================
# Bras de distillation
# ============================================================

def distill_arm(method: str, cpc: int | None, x: np.ndarray, y: np.ndarray, config: RunConfig,
                buffer: TrajectoryBuffer | None = None, arch: ArchDescriptor | None = None) -> DistilledSet:
    """Produit le DistilledSet d'un bras ; cpc=None uniquement pour 'whole'. MTT suit l'architecture du buffer."""
    provenance = config.replace(method=method, cpc=cpc or config.cpc).canonical()
    n_classes = int(y.max()) + 1
    arch = arch or distill_arch(config, x, n_classes)

    if method == "whole":
        dset = distill.subset_distilled_set(x, y, None, config.eval_lr, "whole", None, provenance)
    elif method == "random":
        idx = distill.coreset_random(y, cpc, derive_seed(config.seed, "random", cpc))
        dset = distill.subset_distilled_set(x, y, idx, config.eval_lr, "random", cpc, provenance)
    elif method == "herding":
        idx = distill.coreset_herding(x, y, cpc)
        dset = distill.subset_distilled_set(x, y, idx, config.eval_lr, "herding", cpc, provenance)
    elif method == "mtt":
        if buffer is None:
            raise ParameterError("mtt: un buffer de trajectoires est requis")
        init = distill.init_distilled_set(x, y, cpc, derive_seed(config.seed, "init", cpc), config.init,
                                          config.alpha_init, provenance)
        dset = distill.mtt_distill(buffer, init, config.outer_iters, config.inner_steps, config.target_steps,
                                   config.max_start_epoch, config.outer_lr, derive_seed(config.seed, "mtt", cpc),
                                   alpha_lr=config.alpha_lr, syn_batch_size=config.syn_batch_size)
    elif method == "dcgm":
        init = distill.init_distilled_set(x, y, cpc, derive_seed(config.seed, "init", cpc), config.init,
                                          config.eval_lr, provenance)
        dset = distill.dcgm_distill(x, y, init, arch, config.dcgm_iters,
                                    config.dcgm_loops, config.dcgm_real_batch, config.dcgm_lr,
                                    config.dcgm_net_lr, derive_seed(config.seed, "dcgm", cpc))
    else:
        raise ParameterError(f"Méthode inconnue: {method!r}")

    dset.arch = dset.arch or arch.canonical()
    dset.stats_ref = "features/stats.json"
    logger.info(f"Bras {method} (cpc={cpc}, {dset.arch}): {len(dset.labels)} échantillons, alpha={dset.alpha_value:.5f}")
    return dset


# ============================================================
# Évaluation
# ============================================================

def eval_batch_size(dset: DistilledSet, config: RunConfig) -> int:
    """
    Taille de batch de l'entraînement d'évaluation, alignée sur les pas internes de la distillation :
    MTT reprend syn_batch_size, le batch sous lequel α a été appris ; DCGM le set complet ;
    les sous-ensembles réels batch_size. 0 = set complet.
    """
    if dset.method == "mtt":
        return config.syn_batch_size
    if dset.method == "dcgm":
        return 0
    return config.batch_size


def _train_and_score(dset: DistilledSet, arch: ArchDescriptor, x_test: np.ndarray, y_test: np.ndarray,
                     epochs: int, batch_size: int, seed: int) -> float:
    flat = models.build(arch, seed).flat
    flat = models.train_flat(flat, arch, dset.features_array(), dset.labels, epochs, dset.alpha_value,
                             batch_size, seed)
    return models.evaluate_accuracy(flat, arch, x_test, y_test)


def evaluate_distilled(dset: DistilledSet, eval_arch: ArchDescriptor, x_test: np.ndarray, y_test: np.ndarray,
                       n_seeds: int, epochs: int, config: RunConfig, dataset_tag: str | None = None,
                       workers: int = EVAL_WORKERS) -> list[EvalRow]:
    """Un modèle frais par seed, entraîné `epochs` époques sur le set avec lr = α ; moyenne / écart-type."""
    if n_seeds < 1:
        raise ParameterError(f"evaluate_distilled: n_seeds doit être >= 1 (reçu {n_seeds})")
    seeds = [derive_seed(config.seed, f"eval/{eval_arch.canonical()}", s) for s in range(n_seeds)]
    batch_size = eval_batch_size(dset, config)

    def run(seed: int) -> float:
        return _train_and_score(dset, eval_arch, x_test, y_test, epochs, batch_size, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run, seeds))
    else:
        accs = [run(s) for s in seeds]

    row = EvalRow(
        dataset_tag=dataset_tag or config.dataset_tag,
        method=dset.method,
        distill_arch=dset.arch,
        eval_arch=eval_arch.canonical(),
        cpc=dset.cpc,
        seeds=n_seeds,
        mean_acc=float(np.mean(accs)),
        std_acc=float(np.std(accs)),
    )
    logger.info(f"Évaluation {row.method} cpc={row.cpc_label} sur {row.eval_arch}: "
                f"{row.mean_acc:.3f} ± {row.std_acc:.3f}")
    return [row]


def cross_arch_matrix(dsets: dict[str, DistilledSet], eval_archs: list[ArchDescriptor], x_test: np.ndarray,
                      y_test: np.ndarray, config: RunConfig) -> list[EvalRow]:
    """Grille complète distill_arch x eval_arch."""
    shapes = {tuple(d.features.shape[1:]) for d in dsets.values()}
    if len(shapes) > 1:
        raise ParameterError(f"cross_arch_matrix: dimensions de features différentes {sorted(shapes)}")
    rows = []
    for name in sorted(dsets):
        for arch in eval_archs:
            rows += evaluate_distilled(dsets[name], arch, x_test, y_test, config.eval_seeds, config.eval_epochs, config)
    return rows


def cross_arch_grid(cpc: int, x: np.ndarray, y: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
                    config: RunConfig, ws: Workspace | None = None,
                    primary: DistilledSet | None = None) -> list[EvalRow]:
    """
    MTT distillé sur chaque architecture de eval_archs (un buffer teacher par architecture),
    puis cross_arch_matrix sur toutes. `primary` réutilise un set déjà distillé sur
    l'architecture principale.
    """
    n_classes = int(y.max()) + 1
    archs = eval_arches(config, x, n_classes)
    dsets = {}
    for arch in archs:
        tag = _secondary_tag(arch, config, x, n_classes)
        if tag is None and primary is not None:
            dsets[arch.canonical()] = primary
            continue
        buffer = build_buffer(x, y, config, ws, arch)
        dset = distill_arm("mtt", cpc, x, y, config, buffer, arch)
        if ws is not None:
            distill.save_distilled(dset, ws.distilled_path("mtt", cpc, tag))
        dsets[arch.canonical()] = dset
    return cross_arch_matrix(dsets, archs, x_test, y_test, config)


# ============================================================
# Reconstruction et bruit
# ============================================================

def reconstruct_params(config: RunConfig, seed: int = 0) -> ReconstructParams:
    return ReconstructParams(features=feature_params(config), gla_iters=config.gla_iters,
                             nnls_iters=config.nnls_iters, seed=seed)


def reconstruct_set(dset: DistilledSet, stats: FeatureStats, config: RunConfig, out_dir: Path | None = None) -> list:
    """Waveforms de chaque échantillon du set (seeds GLA dérivées par index)."""
    clips = []
    for i, (values, label) in enumerate(zip(dset.features_array()[:, 0], dset.labels)):
        fmap = FeatureMap(values=values.astype(np.float64), label=int(label), n_coef=config.n_coef,
                          db_ref=config.db_ref, source_id=f"{dset.method}_{i:04d}")
        clip, state = reconstruct_clip(fmap, stats, reconstruct_params(config, derive_seed(config.seed, "gla", i)),
                                       return_state=True)
        clip = normalize_length(clip, config.target_len)
        if out_dir is not None:
            save_wav(clip, out_dir / f"{fmap.source_id}_c{label}.wav")
            save_residual_history(state, out_dir / f"{fmap.source_id}_residual.csv")
        clips.append(clip)
    return clips


def noisy_set(dset: DistilledSet, clips: list, stats: FeatureStats, config: RunConfig, sigma: float,
              sigma_index: int) -> DistilledSet:
    """
    Bruit gaussien centré de variance σ (écart-type √σ) sur les waveforms reconstruites,
    puis ré-extraction standardisée.
    """
    if sigma < 0:
        raise ParameterError(f"noisy_set: variance σ négative ({sigma})")
    params = feature_params(config)
    rng = np.random.default_rng(derive_seed(config.seed, "noise", sigma_index))
    maps = []
    for clip in clips:
        noisy = clip.samples + np.sqrt(sigma) * rng.standard_normal(len(clip))
        fmap = features.extract_fd_mfcc(AudioClip(samples=noisy, sample_rate=clip.sample_rate, label=clip.label), params)
        maps.append(features.standardize(fmap, stats))
    x, y = features.stack_maps(maps)
    return DistilledSet(features=Tensor(x), labels=y, alpha=Tensor(dset.alpha_value), provenance=dset.provenance,
                        cpc=dset.cpc, method=dset.method, arch=dset.arch, stats_ref=dset.stats_ref)


def _sigma_tag(config: RunConfig, sigma: float | None) -> str:
    if sigma is None:
        return f"{config.dataset_tag}+recon"
    return f"{config.dataset_tag}+recon+noise{sigma:g}"


def noise_robustness(dset: DistilledSet, sigmas: list[float], stats: FeatureStats, eval_arch: ArchDescriptor,
                     x_test: np.ndarray, y_test: np.ndarray, config: RunConfig, clips: list | None = None) -> list[EvalRow]:
    """Une ligne par σ : reconstruction -> bruit -> ré-extraction -> évaluation."""
    if not sigmas:
        return []
    clips = clips if clips is not None else reconstruct_set(dset, stats, config)
    rows = []
    for i, sigma in enumerate(sigmas):
        rows += evaluate_distilled(noisy_set(dset, clips, stats, config, sigma, i), eval_arch, x_test, y_test,
                                   config.eval_seeds, config.eval_epochs, config, _sigma_tag(config, sigma))
    return rows


def feature_closure(dset: DistilledSet, reextracted: DistilledSet, n_coef: int,
                    dataset_tag: str = "") -> FeatureClosure:
    """
    Distance entre le bloc MFCC (n_coef premières lignes) de chaque carte du set et celui de
    sa ré-extraction : RMS par carte (moyenne, max) et norme relative ||Δ|| / ||original||.
    Les blocs delta ne sont pas comparés.
    """
    original = dset.features_array()[:, 0, :n_coef].astype(np.float64)
    again = reextracted.features_array()[:, 0, :n_coef].astype(np.float64)
    if original.shape != again.shape or len(original) == 0:
        raise ParameterError(f"feature_closure: blocs MFCC {original.shape} et {again.shape}")
    diff = (again - original).reshape(len(original), -1)
    rms = np.sqrt(np.mean(diff**2, axis=1))
    norms = np.linalg.norm(original.reshape(len(original), -1), axis=1)
    rel = np.linalg.norm(diff, axis=1) / np.maximum(norms, 1e-12)
    return FeatureClosure(dataset_tag=dataset_tag, method=dset.method, cpc=dset.cpc, items=len(original),
                          mean_rms=float(rms.mean()), max_rms=float(rms.max()), mean_rel=float(rel.mean()))


def reconstruction_closure(dset: DistilledSet, clips: list, stats: FeatureStats, eval_arch: ArchDescriptor,
                           x_test: np.ndarray, y_test: np.ndarray, config: RunConfig) -> ClosureResult:
    """
    Boucle "features -> audio -> features" sans bruit (mêmes seeds que σ = 0) : ligne
    d'évaluation du set ré-extrait et distance de son bloc MFCC au set d'origine.
    """
    tag = _sigma_tag(config, None)
    reextracted = noisy_set(dset, clips, stats, config, 0.0, 0)
    closure = feature_closure(dset, reextracted, config.n_coef, tag)
    logger.info(f"Closure features {dset.method} cpc={dset.cpc}: RMS moyen {closure.mean_rms:.4f}, "
                f"max {closure.max_rms:.4f}, relatif {closure.mean_rel:.4f}")
    rows = evaluate_distilled(reextracted, eval_arch, x_test, y_test, config.eval_seeds, config.eval_epochs,
                              config, tag)
    return ClosureResult(rows=rows, feature=closure)


# ============================================================
# Rapports
# ============================================================

def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report.rows:
        writer.writerow(row.csv_values())
    return buf.getvalue()


def closure_csv(closures: list[FeatureClosure]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CLOSURE_COLUMNS)
    for closure in closures:
        writer.writerow(closure.csv_values())
    return buf.getvalue()


def grid_markdown(rows: list[EvalRow]) -> list[str]:
    """Tableau croisé distill_arch (lignes) x eval_arch (colonnes), précision moyenne ± écart-type en %."""
    distill_archs = sorted({r.distill_arch for r in rows})
    eval_archs = sorted({r.eval_arch for r in rows})
    cells = {(r.distill_arch, r.eval_arch): r for r in rows}
    lines = ["| distill \\ eval | " + " | ".join(eval_archs) + " |", "|" + "---|" * (len(eval_archs) + 1)]
    for d in distill_archs:
        values = [f"{100 * cells[d, e].mean_acc:.2f} ± {100 * cells[d, e].std_acc:.2f}" if (d, e) in cells else "-"
                  for e in eval_archs]
        lines.append(f"| {d} | " + " | ".join(values) + " |")
    return lines


def report_markdown(report: EvalReport) -> str:
    lines = ["| " + " | ".join(MD_COLUMNS) + " |", "|" + "---|" * len(MD_COLUMNS)]
    for r in report.rows:
        cells = [r.dataset_tag, r.method, r.distill_arch, r.eval_arch, r.cpc_label,
                 f"{100 * r.mean_acc:.2f}", f"{100 * r.std_acc:.2f}"]
        lines.append("| " + " | ".join(cells) + " |")
    if report.grid:
        lines += ["", "## Cross-architecture", ""] + grid_markdown(report.grid)
    if report.closures:
        lines += ["", "## Closure features", "", "| " + " | ".join(CLOSURE_COLUMNS) + " |",
                  "|" + "---|" * len(CLOSURE_COLUMNS)]
        lines += ["| " + " | ".join(c.csv_values()) + " |" for c in report.closures]
    if report.config:
        lines.append("")
        lines.append(f"<!-- config: {report.config} -->")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, stem: str | Path, formats: tuple[str, ...] = ("csv", "md")) -> list[Path]:
    """Écrit stem.csv / stem.md, stem.closure.csv si des closures existent, et la config en stem.config.json."""
    if not report.rows:
        raise ParameterError("emit_report: rapport vide")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(stem.with_suffix(".csv"))
        written[-1].write_text(report_csv(report), encoding="utf-8")
    if "md" in formats:
        written.append(stem.with_suffix(".md"))
        written[-1].write_text(report_markdown(report), encoding="utf-8")
    if "csv" in formats and report.closures:
        written.append(stem.with_name(stem.name + ".closure.csv"))
        written[-1].write_text(closure_csv(report.closures), encoding="utf-8")
    if report.config:
        sidecar = stem.with_name(stem.name + ".config.json")
        sidecar.write_text(report.config + "\n", encoding="utf-8")
        written.append(sidecar)
    return written


def read_rows_csv(path: str | Path) -> list[EvalRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            EvalRow(dataset_tag=r["dataset"], method=r["method"], distill_arch=r["distill_arch"],
                    eval_arch=r["eval_arch"], cpc=None if r["cpc"] == "all" else int(r["cpc"]),
                    seeds=int(r["seeds"]), mean_acc=float(r["mean_acc"]), std_acc=float(r["std_acc"]))
            for r in reader
        ]


def write_rows_csv(rows: list[EvalRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(EvalReport(rows=rows)), encoding="utf-8")
    return path


def emit_sweep_csv(sigmas: list[float], rows: list[EvalRow], path: str | Path) -> Path:
    """σ vs précision, pour tracer la courbe de robustesse au bruit."""
    if len(sigmas) != len(rows):
        raise ParameterError(f"emit_sweep_csv: {len(sigmas)} σ pour {len(rows)} lignes")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sigma", "mean_acc", "std_acc"])
        for sigma, row in zip(sigmas, rows):
            writer.writerow([f"{sigma:g}", f"{row.mean_acc:.6f}", f"{row.std_acc:.6f}"])
    return path


# ============================================================
# Pipeline complet
# ============================================================

def run_pipeline(config: RunConfig, workdir: str | Path) -> EvalReport:
    """synth/extract -> buffer -> bras -> whole -> grille cross-architecture -> reconstruction -> bruit -> rapport."""
    ws = Workspace(workdir)
    if not ws.train_manifest.is_file():
        synthesize_corpus(ws.corpus_dir, config.n_classes, config.train_per_class, config.test_per_class,
                          config.sample_rate, config.target_len, derive_seed(config.seed, "corpus"))
    train, test, stats = prepare_features(config, ws)
    x, y = features.stack_maps(train)
    x_test, y_test = features.stack_maps(test)
    n_classes = int(y.max()) + 1
    archs = eval_arches(config, x, n_classes)

    methods = config.method_list()
    buffer = build_buffer(x, y, config, ws) if {"mtt"} & set(methods) else None

    report = EvalReport(config=config.canonical())
    arms: dict[tuple[str, int], DistilledSet] = {}
    for cpc in config.cpc_list():
        for method in methods:
            if method == "whole":
                continue
            dset = distill_arm(method, cpc, x, y, config, buffer)
            distill.save_distilled(dset, ws.distilled_path(method, cpc))
            arms[(method, cpc)] = dset
            for arch in archs:
                report.extend(evaluate_distilled(dset, arch, x_test, y_test, config.eval_seeds,
                                                 config.eval_epochs, config))

    whole = distill_arm("whole", None, x, y, config)
    for arch in archs:
        report.extend(evaluate_distilled(whole, arch, x_test, y_test, config.eval_seeds, config.eval_epochs, config))

    mtt_cpcs = sorted(cpc for m, cpc in arms if m == "mtt")
    if mtt_cpcs:
        cpc = mtt_cpcs[-1]
        dset = arms[("mtt", cpc)]
        if len(archs) > 1:
            report.grid = cross_arch_grid(cpc, x, y, x_test, y_test, config, ws, primary=dset)
            report.extend([r for r in report.grid if r.distill_arch != dset.arch])

        clips = reconstruct_set(dset, stats, config, ws.recon_dir(f"mtt_cpc{cpc}"))
        closure = reconstruction_closure(dset, clips, stats, archs[0], x_test, y_test, config)
        report.extend(closure.rows)
        report.closures.append(closure.feature)
        sigmas = config.sigma_list()
        sweep = noise_robustness(dset, sigmas, stats, archs[0], x_test, y_test, config, clips)
        report.extend(sweep)
        if sweep:
            emit_sweep_csv(sigmas, sweep, ws.reports_dir / "noise_sweep.csv")

    emit_report(report, ws.reports_dir / "report")
    return report

