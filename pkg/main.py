"""
Audio Distill Service — Micro-service d'accès aux artefacts de distillation audio

Endpoints :
  GET  /health           statut + paramètres de features actifs
  POST /api/features     WAV -> FD-MFCC (JSON : rows, cols, n_coef, values)
  POST /api/reconstruct  distilled set + stats + index -> WAV float32 reconstruit
  GET  /api/report       rapport markdown du répertoire de travail

Les paramètres viennent de la RunConfig par défaut, éventuellement surchargée
par le fichier JSON désigné par AUDIO_DISTILL_CONFIG.
"""

import asyncio
import io
import json
import logging
import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import PlainTextResponse, StreamingResponse

import distill
import harness
from audio_io import decode_wav, encode_wav, normalize_length
from config import LOG_LEVEL, WORKDIR, derive_seed, load_run_config
from errors import AudioDistillError
from features import FeatureMap, FeatureStats, extract_fd_mfcc
from reconstruct import reconstruct_clip

logger = logging.getLogger("audio-distill-service")
logging.basicConfig(level=LOG_LEVEL)

# ============================================================
# Configuration
# ============================================================

app = FastAPI(title="Audio Distill Service", version="1.0.0")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)

SERVICE_CONFIG_PATH = os.environ.get("AUDIO_DISTILL_CONFIG", "")
RUN_CONFIG = load_run_config(SERVICE_CONFIG_PATH or None)

# Taille max d'un upload (octets)
MAX_UPLOAD_BYTES = int(os.environ.get("MAX_UPLOAD_BYTES", str(20 * 1024 * 1024)))


# ============================================================
# Utilitaires
# ============================================================

async def _read_upload(file: UploadFile) -> bytes:
    data = await file.read()
    if len(data) > MAX_UPLOAD_BYTES:
        raise HTTPException(status_code=413, detail=f"Fichier {file.filename} trop gros ({len(data)} octets)")
    if not data:
        raise HTTPException(status_code=400, detail=f"Fichier {file.filename} vide")
    return data


def _parse_stats(raw: bytes) -> FeatureStats:
    try:
        data = json.loads(raw.decode("utf-8"))
        return FeatureStats(mean=np.array(data["mean"]), std=np.array(data["std"]))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise AudioDistillError(f"Stats JSON invalides: {e}")


def _features_of(raw: bytes, name: str) -> dict:
    clip = normalize_length(decode_wav(raw, name, expected_rate=RUN_CONFIG.sample_rate), RUN_CONFIG.target_len)
    fmap = extract_fd_mfcc(clip, harness.feature_params(RUN_CONFIG))
    rows, cols = fmap.shape
    return {
        "rows": rows,
        "cols": cols,
        "n_coef": fmap.n_coef,
        "layout": fmap.layout,
        "values": fmap.values.tolist(),
    }


def _reconstruct_of(dset_raw: bytes, stats_raw: bytes, index: int, name: str) -> bytes:
    dset = distill.decode_distilled(dset_raw, name)
    if not 0 <= index < len(dset.labels):
        raise AudioDistillError(f"index {index} hors de [0, {len(dset.labels)})")
    stats = _parse_stats(stats_raw)
    values = dset.features_array()[index, 0].astype(np.float64)
    if stats.mean.shape[0] != values.shape[0]:
        raise AudioDistillError(f"Stats de {stats.mean.shape[0]} lignes pour des cartes de {values.shape[0]} lignes")
    fmap = FeatureMap(values=values, label=int(dset.labels[index]), n_coef=RUN_CONFIG.n_coef,
                      db_ref=RUN_CONFIG.db_ref, source_id=f"{name}#{index}")
    params = harness.reconstruct_params(RUN_CONFIG, derive_seed(RUN_CONFIG.seed, "gla", index))
    return encode_wav(normalize_length(reconstruct_clip(fmap, stats, params), RUN_CONFIG.target_len))


# ============================================================
# Endpoints
# ============================================================

@app.post("/api/features")
async def features_endpoint(file: UploadFile = File(...)):
    """Extrait la carte FD-MFCC (non standardisée) d'un WAV."""
    raw = await _read_upload(file)
    try:
        return await asyncio.to_thread(_features_of, raw, file.filename or "upload")
    except AudioDistillError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception(f"Extraction échouée pour {file.filename}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/api/reconstruct")
async def reconstruct_endpoint(
    dset: UploadFile = File(...),
    stats: UploadFile = File(...),
    index: int = Form(0),
):
    """Reconstruit l'échantillon `index` d'un distilled set en WAV float32."""
    dset_raw = await _read_upload(dset)
    stats_raw = await _read_upload(stats)
    try:
        wav = await asyncio.to_thread(_reconstruct_of, dset_raw, stats_raw, index, dset.filename or "upload")
    except AudioDistillError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception(f"Reconstruction échouée (index {index})")
        raise HTTPException(status_code=500, detail=str(e))
    return StreamingResponse(
        io.BytesIO(wav),
        media_type="audio/wav",
        headers={"Content-Disposition": f'attachment; filename="recon_{index:04d}.wav"'},
    )


@app.get("/api/report")
async def report_endpoint():
    """Rapport markdown produit par la CLI (report / pipeline)."""
    path = harness.Workspace(WORKDIR).reports_dir / "report.md"
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"Aucun rapport dans {Path(WORKDIR).resolve()}")
    return PlainTextResponse(path.read_text(encoding="utf-8"), media_type="text/markdown")


# ============================================================
# Health check
# ============================================================

@app.get("/health")
async def health():
    """Health check : statut et paramètres de features actifs."""
    return {
        "status": "ok",
        "workdir": WORKDIR,
        "sample_rate": RUN_CONFIG.sample_rate,
        "target_len": RUN_CONFIG.target_len,
        "feature_mode": RUN_CONFIG.feature_mode,
        "n_coef": RUN_CONFIG.n_coef,
        "n_mels": RUN_CONFIG.n_mels,
    }
