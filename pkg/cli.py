"""
cli.py — Interface ligne de commande du toolkit.

Sous-commandes (toutes partagent les flags RunConfig, --config et --workdir) :
  synth        corpus synthétique -> corpus/{train,test}.jsonl
  extract      manifestes -> features/{train,test}/*.fdmf + stats.json
  teachers     features -> buffer/*.traj
  distill      --method mtt|dcgm|random|herding|whole --cpc N -> distilled/*.dset
  reconstruct  --input X.dset -> recon/<nom>/*.wav + résidus GLA
  eval         --input X.dset [...] --eval-archs 3x32,2x16 -> reports/rows/*.csv
  crossarch    MTT distillé sur chaque --eval-archs, grille complète -> reports/rows/crossarch_*.csv
  noise        --input X.dset --sigmas 0,0.005,0.01 -> reports/rows/*.csv + sweep
  report       reports/rows/*.csv -> reports/report.{csv,md}
  validate     contrôle des manifestes, du buffer et des distilled sets
  pipeline     tout enchaîner

Exemple :
    python cli.py pipeline --workdir ./work --seed 1 --outer-iters 200
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import artifact_validate
import distill
import features
import harness
import models
from audio_io import load_manifest
from config import LOG_LEVEL, WORKDIR, RunConfig, derive_seed, load_run_config
from corpus import synthesize_corpus
from errors import AudioDistillError

logger = logging.getLogger(__name__)


# ============================================================
# Parser
# ============================================================

def _config_parent() -> argparse.ArgumentParser:
    """Un flag --nom-du-champ par champ de RunConfig ; None = non fourni."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", default=None, help="Fichier JSON de config (écrase les défauts)")
    parent.add_argument("--workdir", default=WORKDIR, help=f"Répertoire de travail (défaut: {WORKDIR})")
    group = parent.add_argument_group("RunConfig")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=f.type, default=None)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(description="Distillation de datasets audio (FD-MFCC)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("synth", "extract", "teachers", "distill", "crossarch", "report", "validate", "pipeline"):
        sub.add_parser(name, parents=[parent])

    for name in ("reconstruct", "eval", "noise"):
        p = sub.add_parser(name, parents=[parent])
        p.add_argument("--input", nargs="+", required=True, help="Fichier(s) distilled set (.dset)")

    sub.choices["extract"].add_argument("--train-manifest", default=None)
    sub.choices["extract"].add_argument("--test-manifest", default=None)
    return parser


def run_config_from(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_run_config(args.config, overrides)


# ============================================================
# Sous-commandes
# ============================================================

def cmd_synth(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    return list(synthesize_corpus(ws.corpus_dir, config.n_classes, config.train_per_class, config.test_per_class,
                                  config.sample_rate, config.target_len, derive_seed(config.seed, "corpus")))


def cmd_extract(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    harness.prepare_features(config, ws,
                             Path(args.train_manifest) if args.train_manifest else None,
                             Path(args.test_manifest) if args.test_manifest else None)
    return [ws.features_dir("train"), ws.features_dir("test"), ws.stats_path]


def cmd_teachers(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    x, y = harness.load_split(ws, "train")
    buffer = harness.build_buffer(x, y, config, ws)
    return [ws.trajectory_path(i) for i in range(len(buffer.trajectories))]


def cmd_distill(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    x, y = harness.load_split(ws, "train")
    buffer = harness.load_buffer(ws, config) if config.method == "mtt" else None
    cpc = None if config.method == "whole" else config.cpc
    dset = harness.distill_arm(config.method, cpc, x, y, config, buffer)
    return [distill.save_distilled(dset, ws.distilled_path(config.method, cpc))]


def cmd_reconstruct(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    stats = features.load_stats(ws.stats_path)
    out = []
    for path in args.input:
        dset = distill.load_distilled(path)
        target = ws.recon_dir(Path(path).stem)
        harness.reconstruct_set(dset, stats, config, target)
        out.append(target)
    return out


def cmd_eval(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    x_test, y_test = harness.load_split(ws, "test")
    out = []
    for path in args.input:
        dset = distill.load_distilled(path)
        rows = []
        for arch in harness.eval_arches(config, x_test, dset.n_classes):
            rows += harness.evaluate_distilled(dset, arch, x_test, y_test, config.eval_seeds, config.eval_epochs, config)
        out.append(harness.write_rows_csv(rows, ws.rows_dir / f"eval_{Path(path).stem}.csv"))
    return out


def cmd_noise(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    x_test, y_test = harness.load_split(ws, "test")
    stats = features.load_stats(ws.stats_path)
    sigmas = config.sigma_list()
    out = []
    for path in args.input:
        dset = distill.load_distilled(path)
        arch = harness.eval_arches(config, x_test, dset.n_classes)[0]
        rows = harness.noise_robustness(dset, sigmas, stats, arch, x_test, y_test, config)
        if not rows:
            logger.warning(f"Liste de σ vide: aucune ligne pour {path}")
            continue
        stem = Path(path).stem
        out.append(harness.write_rows_csv(rows, ws.rows_dir / f"noise_{stem}.csv"))
        out.append(harness.emit_sweep_csv(sigmas, rows, ws.reports_dir / f"noise_sweep_{stem}.csv"))
    return out


def cmd_crossarch(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    x, y = harness.load_split(ws, "train")
    x_test, y_test = harness.load_split(ws, "test")
    rows = harness.cross_arch_grid(config.cpc, x, y, x_test, y_test, config, ws)
    return [harness.write_rows_csv(rows, ws.rows_dir / f"crossarch_cpc{config.cpc}.csv")]


def cmd_report(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    report = harness.EvalReport(config=config.canonical())
    for path in sorted(ws.rows_dir.glob("*.csv")):
        rows = harness.read_rows_csv(path)
        report.extend([r for r in rows if r not in report.rows])
        if path.name.startswith("crossarch_"):
            report.grid += rows
    return harness.emit_report(report, ws.reports_dir / "report")


def cmd_validate(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    results = {}
    for manifest in (ws.train_manifest, ws.test_manifest):
        if manifest.is_file():
            results[str(manifest)] = artifact_validate.validate_manifest(load_manifest(manifest))
    trajectories = [models.load_trajectory(p) for p in sorted(ws.buffer_dir.glob("*.traj"))]
    if trajectories:
        results[str(ws.buffer_dir)] = artifact_validate.validate_buffer(
            trajectories, config.max_start_epoch, config.target_steps)
    for path in sorted((ws.root / "distilled").glob("*.dset")):
        results[str(path)] = artifact_validate.validate_distilled(distill.load_distilled(path))

    print(json.dumps(results, indent=2, ensure_ascii=False))
    if not all(r["valid"] for r in results.values()):
        raise SystemExit(1)
    return []


def cmd_pipeline(config: RunConfig, ws: harness.Workspace, args) -> list[Path]:
    harness.run_pipeline(config, ws.root)
    return [ws.reports_dir / "report.csv", ws.reports_dir / "report.md"]


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "teachers": cmd_teachers,
    "distill": cmd_distill,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "noise": cmd_noise,
    "crossarch": cmd_crossarch,
    "report": cmd_report,
    "validate": cmd_validate,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = run_config_from(args)
        for path in COMMANDS[args.command](config, harness.Workspace(args.workdir), args):
            print(path)
    except AudioDistillError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
