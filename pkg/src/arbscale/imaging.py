"""PNG I/O with embedded scale metadata, float conversion, patch extraction."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .model import ScaleSpec, round_half_away

log = logging.getLogger(__name__)

KEY_SCALE = "AIDN-Scale"
KEY_W = "AIDN-OrigW"
KEY_H = "AIDN-OrigH"
KEY_VERSION = "AIDN-Version"
SIDECAR_SUFFIX = ".aidn.txt"


class ImageFormatError(ValueError):
    """Unsupported PNG layout or inconsistent metadata."""


@dataclass
class ImageU8:
    """8-bit RGB raster; ``pixels`` is ``(height, width, 3)`` uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ImageFormatError(f"expected HxWx3 uint8 pixels, got {px.shape} {px.dtype}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageU8) and np.array_equal(self.pixels, other.pixels)


def to_float(img: ImageU8) -> np.ndarray:
    return img.pixels.astype(np.float32) / np.float32(255.0)


def from_float(t, report: bool = False):
    """Quantize a ``(H, W, 3)`` array in [0, 1] to :class:`ImageU8`.

    Values outside [0, 1] are clamped; with ``report`` the number of clamped
    values is returned as well.
    """
    arr = np.asarray(t, dtype=np.float64)
    clamped = int(np.count_nonzero((arr < 0) | (arr > 1)))
    if clamped:
        log.debug("from_float: clamped %d values", clamped)
    q = round_half_away(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = ImageU8(q)
    return (img, clamped) if report else img


def format_scale(s: float) -> str:
    return f"{s:.6g}"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def _spec_lines(spec: ScaleSpec) -> dict[str, str]:
    return {
        KEY_SCALE: format_scale(spec.nominal_s),
        KEY_W: str(spec.orig_w),
        KEY_H: str(spec.orig_h),
        KEY_VERSION: str(spec.format_version),
    }


def _spec_from_map(m: dict[str, str], where: str) -> ScaleSpec | None:
    keys = (KEY_SCALE, KEY_W, KEY_H, KEY_VERSION)
    present = [k for k in keys if k in m]
    if not present:
        return None
    if len(present) != len(keys):
        missing = sorted(set(keys) - set(present))
        raise ImageFormatError(f"{where}: incomplete scale metadata, missing {missing}")
    try:
        spec = ScaleSpec(float(m[KEY_SCALE]), int(m[KEY_W]), int(m[KEY_H]), int(m[KEY_VERSION]))
    except ValueError as exc:
        raise ImageFormatError(f"{where}: malformed scale metadata") from exc
    if not (1.0 < spec.nominal_s <= 4.0) or spec.orig_w < 1 or spec.orig_h < 1:
        raise ImageFormatError(f"{where}: scale metadata out of range: {spec}")
    return spec


def parse_sidecar(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def save_image(img: ImageU8, path, spec: ScaleSpec | None = None) -> None:
    """Write a PNG; a spec goes into tEXt chunks and a ``.aidn.txt`` sidecar."""
    path = Path(path)
    pil = Image.fromarray(img.pixels, mode="RGB")
    info = None
    if spec is not None:
        info = PngImagePlugin.PngInfo()
        for k, v in _spec_lines(spec).items():
            info.add_text(k, v)
    pil.save(path, format="PNG", pnginfo=info)
    if spec is not None:
        body = "".join(f"{k}={v}\n" for k, v in _spec_lines(spec).items())
        sidecar_path(path).write_text(body, encoding="utf-8")


def load_image(path) -> tuple[ImageU8, ScaleSpec | None]:
    """Read an 8-bit RGB(A) PNG and any attached scale metadata.

    Chunk metadata wins when present; the sidecar is consulted otherwise.
    Disagreement between the two is an error.
    """
    path = Path(path)
    with Image.open(path) as pil:
        if pil.format != "PNG":
            raise ImageFormatError(f"{path}: not a PNG ({pil.format})")
        mode = pil.mode
        if mode == "RGBA":
            warnings.warn(f"{path}: dropping alpha channel", stacklevel=2)
            pil = pil.convert("RGB")
        elif mode != "RGB":
            raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r}; need 8-bit RGB or RGBA")
        pixels = np.asarray(pil, dtype=np.uint8).copy()
        text = dict(getattr(pil, "text", {}) or {})
    chunk_spec = _spec_from_map(text, f"{path} chunks")
    side = sidecar_path(path)
    side_spec = None
    if side.exists():
        side_spec = _spec_from_map(parse_sidecar(side.read_text(encoding="utf-8")), str(side))
    if chunk_spec and side_spec and chunk_spec != side_spec:
        raise ImageFormatError(f"{path}: chunk metadata {chunk_spec} conflicts with sidecar {side_spec}")
    return ImageU8(pixels), chunk_spec or side_spec


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def extract_patches(img: ImageU8, side: int, n: int, rng: np.random.Generator,
                    augment: bool = False) -> list[np.ndarray]:
    """``n`` random ``side x side`` crops as float arrays."""
    h, w = img.height, img.width
    if side > h or side > w:
        raise ValueError(f"image {w}x{h} smaller than patch side {side}")
    data = to_float(img)
    out = []
    for _ in range(n):
        y = int(rng.integers(h - side + 1))
        x = int(rng.integers(w - side + 1))
        crop = data[y:y + side, x:x + side]
        if augment:
            if rng.random() < 0.5:
                crop = crop[:, ::-1]
            if rng.random() < 0.5:
                crop = crop[::-1]
            if rng.random() < 0.5:
                crop = crop.transpose(1, 0, 2)
        out.append(np.ascontiguousarray(crop))
    return out


def compute_scale_for_cap(w: int, h: int, cap: int) -> float | None:
    """Scale that brings the longer side to ``cap``; None when already small enough."""
    if cap < 1:
        raise ValueError("cap must be positive")
    longest = max(w, h)
    if longest <= cap:
        return None
    s = longest / cap
    if s > 4.0:
        raise ValueError(f"fitting {w}x{h} under {cap} px needs scale {s:.3g} > 4; "
                         "downscale manually in several passes")
    # truncate to the 6 significant digits stored in metadata; rounding up
    # could push floor(longest / s) one pixel under the cap
    digits = 5 - int(math.floor(math.log10(s)))
    trunc = math.floor(s * 10**digits + 1e-7) / 10**digits
    return max(float(format_scale(trunc)), 1.0 + 10.0**-digits)
