"""Quality metrics, dataset evaluation and diagnostic renderings."""
from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.signal import convolve2d

from . import numerics as nx
from .crm import ResampleRate, output_grid
from .imaging import ImageFormatError, ImageU8, from_float, list_pngs, load_image, to_float
from .model import ModelState, decode, encode, extract_features, lr_dims, quantize
from .params import named_leaves


IDENTICAL = "identical"
Psnr = Union[float, str]


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise nx.ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def psnr(a, b, luma: bool = False) -> Psnr:
    """PSNR in dB for images in [0, 1]; returns ``IDENTICAL`` when MSE is zero."""
    a = np.asarray(nx.data_of(a), dtype=np.float64)
    b = np.asarray(nx.data_of(b), dtype=np.float64)
    _same_shape(a, b, "psnr")
    if luma:
        a, b = rgb_to_luma(a), rgb_to_luma(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * np.log10(1.0 / mse)


def rgb_to_luma(x: np.ndarray) -> np.ndarray:
    """BT.601 luma on [0, 1] data."""
    return (16.0 + 65.481 * x[..., 0] + 128.553 * x[..., 1] + 24.966 * x[..., 2]) / 255.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a = np.asarray(nx.data_of(a), dtype=np.float64)
    b = np.asarray(nx.data_of(b), dtype=np.float64)
    _same_shape(a, b, "ssim")
    if min(a.shape[0], a.shape[1]) < window:
        raise nx.ShapeError(f"ssim: image {a.shape[1]}x{a.shape[0]} smaller than the {window}x{window} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w = gaussian_window(window, sigma)
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def filt(z):
            return convolve2d(z, w, mode="valid")

        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Reports


@dataclass
class EvalRow:
    s: float
    psnr_hr: Psnr
    ssim_hr: float
    ssim_lr_vs_bicubic: float
    psnr_baseline: Psnr
    n_images: int


@dataclass
class EvalReport:
    rows: list[EvalRow]
    dataset: str
    model_hash: str
    wall_time: float
    skipped: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        blocks = [
            "\n".join([
                f"dataset={self.dataset}",
                f"model_hash={self.model_hash}",
                f"wall_time={self.wall_time:.3f}",
                f"scales={len(self.rows)}",
                f"skipped={len(self.skipped)}",
            ])
        ]
        for r in self.rows:
            blocks.append("\n".join([
                f"s={r.s:g}",
                f"psnr_hr={_fmt(r.psnr_hr)}",
                f"ssim_hr={r.ssim_hr:.6f}",
                f"ssim_lr_vs_bicubic={r.ssim_lr_vs_bicubic:.6f}",
                f"psnr_bicubic_baseline={_fmt(r.psnr_baseline)}",
                f"images={r.n_images}",
            ]))
        return "\n\n".join(blocks) + "\n"

    def curve_text(self) -> str:
        return "".join(f"{r.s:g} {_fmt(r.psnr_hr)}\n" for r in self.rows)


def _fmt(v: Psnr) -> str:
    return v if isinstance(v, str) else f"{v:.4f}"


def _mean_psnr(values: list[Psnr]) -> Psnr:
    finite = [v for v in values if not isinstance(v, str)]
    if not finite:
        return IDENTICAL
    if len(finite) < len(values):
        warnings.warn("identical image pairs excluded from the PSNR mean", stacklevel=3)
    return float(np.mean(finite))


def model_hash(state: ModelState) -> str:
    h = hashlib.sha256()
    for name, a in named_leaves(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(nx.data_of(a), dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def bicubic_roundtrip(hr: np.ndarray, s: float) -> np.ndarray:
    """The classical baseline: bicubic down, 8-bit quantize, bicubic up."""
    h, w = hr.shape[:2]
    out_h, out_w, _, _ = lr_dims(h, w, s)
    lr = nx.bicubic_resize(hr, out_h, out_w).data
    lr = np.clip(np.floor(np.clip(lr, 0, 1) * 255.0 + 0.5), 0, 255) / 255.0
    return np.clip(nx.bicubic_resize(lr.astype(hr.dtype), h, w).data, 0, 1)


def roundtrip(hr: np.ndarray, s: float, state: ModelState) -> dict:
    """Encode + decode one float image; metrics against original and bicubic LR."""
    lr, spec = encode(hr, s, state)
    hr_hat = decode(lr, spec, state, clamp=True).data
    ref_lr = np.clip(nx.bicubic_resize(hr, lr.shape[0], lr.shape[1]).data, 0, 1)
    return {
        "lr": lr.data,
        "spec": spec,
        "hr_hat": hr_hat,
        "psnr_hr": psnr(hr_hat, hr),
        "ssim_hr": ssim(hr_hat, hr),
        "ssim_lr": ssim(lr.data, ref_lr) if min(lr.shape[:2]) >= 11 else float("nan"),
        "psnr_baseline": psnr(bicubic_roundtrip(hr, s), hr),
    }


def eval_images(state: ModelState, images: Sequence[np.ndarray], scales: Sequence[float],
                dataset: str = "<memory>") -> EvalReport:
    """Evaluate float images (processed in the given order) at each scale."""
    if not images:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    rows = []
    for s in scales:
        if not 1.0 < s <= 4.0:
            raise ValueError(f"scale {s} outside (1, 4]")
        res = [roundtrip(img, s, state) for img in images]
        rows.append(EvalRow(
            s=float(s),
            psnr_hr=_mean_psnr([r["psnr_hr"] for r in res]),
            ssim_hr=float(np.mean([r["ssim_hr"] for r in res])),
            ssim_lr_vs_bicubic=float(np.nanmean([r["ssim_lr"] for r in res])),
            psnr_baseline=_mean_psnr([r["psnr_baseline"] for r in res]),
            n_images=len(res),
        ))
    return EvalReport(rows, dataset, model_hash(state), time.perf_counter() - t0)


def eval_model(state: ModelState, dataset_dir, scales: Sequence[float], report_path=None,
               curve_path=None) -> EvalReport:
    """Evaluate every PNG in ``dataset_dir`` (sorted by name) at each scale."""
    images, skipped = [], []
    for path in list_pngs(dataset_dir):
        try:
            img, _ = load_image(path)
        except (OSError, ImageFormatError) as exc:
            warnings.warn(f"skipping {path.name}: {exc}", stacklevel=2)
            skipped.append(path.name)
            continue
        images.append(to_float(img))
    if not images:
        raise ValueError(f"no readable PNG images in {dataset_dir}")
    report = eval_images(state, images, scales, dataset=str(dataset_dir))
    report.skipped = skipped
    if report_path:
        Path(report_path).write_text(report.to_text(), encoding="utf-8")
    if curve_path:
        Path(curve_path).write_text(report.curve_text(), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# Diagnostics


def routing_map(state: ModelState, hr: np.ndarray, s: float, locations: Sequence[tuple[int, int]]):
    """Decoder routing weights at HR output locations ``(row, col)``.

    The image is encoded at ``s`` first, so the weights are those the decoder
    would use when restoring it. Returns ``(weights, strip)`` where ``weights``
    is ``(len(locations), n_experts)`` and ``strip`` is an :class:`ImageU8`
    heat map (one row per expert, one column per location).
    """
    lr, spec = encode(hr, s, state)
    crm = state.decoder.crm
    feat = extract_features(lr, s, state.decoder.extractor).data
    rate = ResampleRate.between(s, lr.shape[:2], (spec.orig_h, spec.orig_w))
    ix, iy, rx, ry = output_grid(spec.orig_h, spec.orig_w, rate)
    rows = np.array([r for r, _ in locations])
    cols = np.array([c for _, c in locations])
    center = nx.bilinear_sample(feat, ix[rows, cols], iy[rows, cols])
    from .crm import crm_condition
    _, weights = crm_condition(s, rx[rows, cols], ry[rows, cols], center, crm)
    w = np.asarray(weights.data, dtype=np.float64)
    return w, render_heatmap(w.T)


def render_heatmap(values: np.ndarray, cell: int = 8) -> ImageU8:
    """Blue-to-red rendering of a 2-D array scaled to its own [min, max]."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    t = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    rgb = np.stack([t, 0.2 + 0.6 * t * (1 - t), 1 - t], axis=-1)
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    return from_float(rgb)


def difference_map(lr_hat, lr_bicubic, gain: float = 10.0) -> tuple[ImageU8, float]:
    """Amplified absolute difference image and the mean absolute difference."""
    a = np.asarray(nx.data_of(lr_hat), dtype=np.float64)
    b = np.asarray(nx.data_of(lr_bicubic), dtype=np.float64)
    _same_shape(a, b, "difference_map")
    diff = np.abs(a - b)
    mad = float(diff.mean())
    per_px = diff.mean(axis=-1) if diff.ndim == 3 else diff
    gray = np.clip(per_px * gain, 0.0, 1.0)
    return from_float(np.repeat(gray[..., None], 3, axis=-1)), mad


def lr_difference(state: ModelState, hr: np.ndarray, s: float, gain: float = 10.0):
    """Difference between the encoder output and the 8-bit bicubic LR at scale ``s``."""
    lr, _ = encode(hr, s, state)
    ref = quantize(nx.bicubic_resize(hr, lr.shape[0], lr.shape[1]).data).data
    return difference_map(lr.data, ref, gain)


def zero_model_matches_bicubic(state: ModelState, hr: np.ndarray, s: float) -> bool:
    out = roundtrip(hr, s, state)["hr_hat"]
    return np.allclose(out, bicubic_roundtrip(hr, s), atol=1e-6)
