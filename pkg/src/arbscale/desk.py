"""The desk-scale experiment: fixed toy split, one config file, cached result.

A run writes ``model.aidn`` and ``run.txt`` (key=value) into its output
directory. ``ensure`` reuses a cached run when the config file is unchanged
and retrains otherwise, so the recorded wall time always belongs to the
checkpoint next to it.
"""
from __future__ import annotations

import hashlib
import logging
import platform
import time
from pathlib import Path

from .evaluation import model_hash
from .model import ModelState
from .toydata import desk_split
from .training import load_checkpoint, load_config, save_checkpoint, train

log = logging.getLogger(__name__)

N_IMAGES, IMAGE_SIZE, N_HELDOUT, DATA_SEED = 240, 128, 20, 0


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_record(path) -> dict[str, str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return dict(line.split("=", 1) for line in lines if "=" in line)


def run(config_path, out_dir, callback=None) -> tuple[ModelState, dict[str, str]]:
    cfg = load_config(config_path)
    train_imgs, held = desk_split(N_IMAGES, IMAGE_SIZE, N_HELDOUT, DATA_SEED)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state, opt, history = train(train_imgs, cfg, callback=callback)
    wall = time.perf_counter() - t0
    save_checkpoint(state, out_dir / "model.aidn", opt)
    record = {
        "steps": str(opt.step),
        "wall_time_s": f"{wall:.1f}",
        "n_train": str(len(train_imgs)),
        "n_heldout": str(len(held)),
        "image_size": str(IMAGE_SIZE),
        "data_seed": str(DATA_SEED),
        "config_sha256": _sha(config_path),
        "model_hash": model_hash(state),
        "final_invertibility": f"{sum(r.invertibility for r in history[-200:]) / min(200, len(history)):.6f}",
        "machine": platform.machine(),
        "python": platform.python_version(),
    }
    (out_dir / "run.txt").write_text("".join(f"{k}={v}\n" for k, v in record.items()), encoding="utf-8")
    return state, record


def load(config_path, out_dir) -> tuple[ModelState, dict[str, str]] | None:
    """Cached run for this exact config, or None."""
    out_dir = Path(out_dir)
    if not (out_dir / "run.txt").exists() or not (out_dir / "model.aidn").exists():
        return None
    record = read_record(out_dir / "run.txt")
    if record.get("config_sha256") != _sha(config_path):
        log.info("cached desk run was made with a different config")
        return None
    state, _ = load_checkpoint(out_dir / "model.aidn")
    if model_hash(state) != record.get("model_hash"):
        log.info("cached desk checkpoint does not match its record")
        return None
    return state, record


def ensure(config_path, out_dir, retrain: bool = False, callback=None) -> tuple[ModelState, dict[str, str]]:
    cached = None if retrain else load(config_path, out_dir)
    if cached is not None:
        return cached
    log.info("training the desk-scale model; this takes most of an hour on one CPU core")
    return run(config_path, out_dir, callback)


def heldout_images():
    return desk_split(N_IMAGES, IMAGE_SIZE, N_HELDOUT, DATA_SEED)[1]
