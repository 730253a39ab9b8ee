"""Encoder/decoder assembly: feature extractor, resampling, 8-bit quantizer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .crm import CrmParams, ResampleRate, crm_resample, init_crm
from .params import Conv, Dense, map_leaves


@dataclass(frozen=True)
class Hyper:
    channels: int = 16
    n_blocks: int = 4
    n_experts: int = 8
    kernel: int = 3
    hidden: int = 64
    content: bool = True


@dataclass
class ResBlock:
    conv1: Conv
    conv2: Conv
    scale_mod: Dense  # 1 -> 2C: per-channel gain then bias


@dataclass
class ExtractorParams:
    head: Conv
    blocks: list[ResBlock]


@dataclass
class Branch:
    extractor: ExtractorParams
    crm: CrmParams
    tail: Conv


@dataclass
class ModelState:
    encoder: Branch
    decoder: Branch
    hyper: Hyper = field(default_factory=Hyper, metadata={"static": True})


class ScaleError(ValueError):
    """Scale factor or resulting dimensions outside the supported range."""


@dataclass(frozen=True)
class ScaleSpec:
    """What the decoder needs to know about a downscaled image."""

    nominal_s: float
    orig_w: int
    orig_h: int
    format_version: int = 1

    def __post_init__(self):
        if not 1.0 < self.nominal_s <= 4.0:
            raise ScaleError(f"scale factor {self.nominal_s} outside (1, 4]")
        if self.orig_w < 1 or self.orig_h < 1:
            raise ScaleError(f"original size {self.orig_w}x{self.orig_h} must be positive")


# --------------------------------------------------------------------------
# Quantizer


def soft_round(x, alpha: float = 0.5):
    """Differentiable stand-in for rounding: ``x - alpha*sin(2*pi*x)/(2*pi)``."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    return x - alpha * np.sin(2 * np.pi * x) / (2 * np.pi)


def soft_round_grad(x, alpha: float = 0.5):
    return 1.0 - alpha * np.cos(2 * np.pi * np.asarray(x))


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, alpha: float = 0.5, surrogate_forward: bool = False) -> nx.Tensor:
    """Clamp to [0, 1] and snap to the 8-bit lattice ``{0, 1/255, ..., 1}``.

    Backward uses the soft-round slope in the 255-scaled domain, and zero
    outside [0, 1]. With ``surrogate_forward`` the forward pass is the soft
    round itself, which makes the op smooth for finite-difference checks.
    """
    x = nx.as_tensor(x)
    xc = np.clip(x.data, 0.0, 1.0)
    if surrogate_forward:
        out = soft_round(255.0 * xc, alpha) / 255.0
    else:
        out = round_half_away(255.0 * xc) / 255.0
    out = out.astype(x.dtype)
    inside = (x.data >= 0.0) & (x.data <= 1.0)

    def backward(g):
        return (g * soft_round_grad(255.0 * x.data, alpha).astype(x.dtype) * inside,)

    return nx.record_op("quantize", out, (x,), backward)


# --------------------------------------------------------------------------
# Geometry


def lr_dims(h: int, w: int, s: float) -> tuple[int, int, float, float]:
    """LR size by flooring ``H/s`` and ``W/s``, plus the exact per-axis rates.

    Returns ``(out_h, out_w, rate_x, rate_y)`` with rates ``out/in``.
    """
    if not 1.0 < s <= 4.0:
        raise ScaleError(f"scale factor {s} outside (1, 4]")
    if h < 8 or w < 8:
        raise ScaleError(f"image {w}x{h} too small, need at least 8x8")
    # 1e-9 guards against H/s landing a hair under an integer in binary
    out_h = int(math.floor(h / s + 1e-9))
    out_w = int(math.floor(w / s + 1e-9))
    if out_h < 4 or out_w < 4:
        raise ScaleError(f"downscaled size {out_w}x{out_h} is degenerate (< 4 px)")
    return out_h, out_w, out_w / w, out_h / h


# --------------------------------------------------------------------------
# Parameters


def _conv(k, cin, cout, rng, dtype, gain=1.0):
    if rng is None:
        return Conv(np.zeros((k, k, cin, cout), dtype), np.zeros(cout, dtype))
    w = rng.standard_normal((k, k, cin, cout)) * gain * np.sqrt(2.0 / (k * k * cin))
    return Conv(w.astype(dtype), np.zeros(cout, dtype))


def init_extractor(hyper: Hyper, rng=None, dtype=np.float32, res_gain: float = 0.1) -> ExtractorParams:
    c, k = hyper.channels, hyper.kernel
    blocks = []
    for _ in range(hyper.n_blocks):
        if rng is None:
            mod = Dense(np.zeros((2 * c, 1), dtype), np.zeros(2 * c, dtype))
        else:
            w = 0.01 * rng.standard_normal((2 * c, 1))
            b = np.concatenate([np.full(c, res_gain), np.zeros(c)])
            mod = Dense(w.astype(dtype), b.astype(dtype))
        blocks.append(ResBlock(_conv(k, c, c, rng, dtype), _conv(k, c, c, rng, dtype), mod))
    return ExtractorParams(_conv(k, 3, c, rng, dtype), blocks)


def init_branch(hyper: Hyper, rng=None, dtype=np.float32, tail_gain: float = 0.1) -> Branch:
    return Branch(
        extractor=init_extractor(hyper, rng, dtype),
        crm=init_crm(hyper.channels, hyper.hidden, hyper.n_experts, hyper.kernel, rng,
                     content=hyper.content, dtype=dtype),
        tail=_conv(3, hyper.channels, 3, rng, dtype, gain=tail_gain),
    )


def init_model(hyper: Hyper | None = None, seed: int | None = None, dtype=np.float32) -> ModelState:
    """Randomly initialised model, or the all-zero model when ``seed`` is None."""
    hyper = hyper or Hyper()
    rng = None if seed is None else np.random.default_rng(seed)
    return ModelState(init_branch(hyper, rng, dtype), init_branch(hyper, rng, dtype), hyper)


def as_trainable(state: ModelState) -> ModelState:
    return map_leaves(lambda a: nx.Tensor(a, requires_grad=True), state)


def as_arrays(state: ModelState) -> ModelState:
    return map_leaves(lambda a: np.array(nx.data_of(a)), state)


# --------------------------------------------------------------------------
# Forward passes


def _scale_modulation(s: float, dense: Dense, dtype):
    out = nx.fully_connected(np.array([s], dtype=dtype), dense.w, dense.b)
    c = out.shape[0] // 2
    return out[:c], out[c:]


def extract_features(img, s: float, p: ExtractorParams):
    """Head convolution followed by scale-modulated residual blocks.

    Each block computes ``x + gain(s) * conv2(relu(conv1(x))) + bias(s)``.
    """
    img = nx.as_tensor(img)
    x = nx.conv2d(img, p.head.w, p.head.b)
    for blk in p.blocks:
        r = nx.conv2d(nx.relu(nx.conv2d(x, blk.conv1.w, blk.conv1.b)), blk.conv2.w, blk.conv2.b)
        gain, bias = _scale_modulation(s, blk.scale_mod, img.dtype)
        x = nx.add(x, nx.add(nx.mul(r, gain), bias))
    return x


def _halo(hyper: Hyper) -> int:
    """Input pixels a tile needs beyond its footprint for exact results.

    Each extractor conv spreads edge-padding artefacts by ``k // 2`` pixels;
    the CRM reads up to ``k // 2`` taps plus a sub-unit offset plus one
    bilinear neighbour further out.
    """
    r = hyper.kernel // 2
    return r * (1 + 2 * hyper.n_blocks) + r + 3


def _branch_residual(img, s: float, branch: Branch, hyper: Hyper, out_h: int, out_w: int,
                     tile: int | None):
    """``tail(crm(features(img)))`` at ``out_h x out_w``, optionally tile by tile."""
    h, w = img.shape[-3:-1]
    rate = ResampleRate.between(s, (h, w), (out_h, out_w))
    if tile is None or nx.active_tape() is not None or img.ndim != 3 or max(out_h, out_w) <= tile:
        feat = extract_features(img, s, branch.extractor)
        return nx.conv2d(crm_resample(feat, rate, out_h, out_w, branch.crm), branch.tail.w, branch.tail.b)
    data = nx.data_of(img)
    out = np.empty((out_h, out_w, 3), dtype=data.dtype)
    m = _halo(hyper)
    for oy0 in range(0, out_h, tile):
        for ox0 in range(0, out_w, tile):
            oy1, ox1 = min(oy0 + tile, out_h), min(ox0 + tile, out_w)
            # one extra output pixel each side feeds the tail conv
            ey0, ey1 = max(oy0 - 1, 0), min(oy1 + 1, out_h)
            ex0, ex1 = max(ox0 - 1, 0), min(ox1 + 1, out_w)
            iy0 = max(int(np.floor((ey0 + 0.5) / rate.rate_y - 0.5)) - m, 0)
            iy1 = min(int(np.ceil((ey1 - 0.5) / rate.rate_y - 0.5)) + m + 1, h)
            ix0 = max(int(np.floor((ex0 + 0.5) / rate.rate_x - 0.5)) - m, 0)
            ix1 = min(int(np.ceil((ex1 - 0.5) / rate.rate_x - 0.5)) + m + 1, w)
            feat = extract_features(data[iy0:iy1, ix0:ix1], s, branch.extractor)
            up = crm_resample(feat, rate, ey1 - ey0, ex1 - ex0, branch.crm, origin=(iy0, ix0, ey0, ex0))
            res = nx.conv2d(up, branch.tail.w, branch.tail.b).data
            out[oy0:oy1, ox0:ox1] = res[oy0 - ey0:oy1 - ey0, ox0 - ex0:ox1 - ex0]
    return nx.Tensor(out)


def _check_scale(s: float) -> None:
    if not 1.0 < s <= 4.0:
        raise ScaleError(f"scale factor {s} outside (1, 4]")


DEFAULT_TILE = 192


def encode(img, s: float, state: ModelState, alpha: float = 0.5, surrogate: bool = False,
           return_pre: bool = False, tile: int | None = DEFAULT_TILE):
    """Downscale ``(H, W, 3)`` / ``(N, H, W, 3)`` images in [0, 1] by ``s``.

    Returns the 8-bit-lattice LR image and its :class:`ScaleSpec`; with
    ``return_pre`` the pre-quantization LR output is appended. Outside a
    gradient tape, single images larger than ``tile`` are processed in
    overlapping tiles to bound memory; results agree with the whole-image
    pass up to floating-point summation order.
    """
    _check_scale(s)
    img = nx.as_tensor(img)
    h, w = img.shape[-3:-1]
    out_h, out_w, _, _ = lr_dims(h, w, s)
    residual = _branch_residual(img, s, state.encoder, state.hyper, out_h, out_w, tile)
    pre = nx.add(residual, nx.bicubic_resize(img, out_h, out_w).data)
    lr = quantize(pre, alpha, surrogate_forward=surrogate)
    spec = ScaleSpec(float(s), int(w), int(h))
    if return_pre:
        return lr, spec, pre
    return lr, spec


def decode(lr, spec: ScaleSpec, state: ModelState, clamp: bool = False, tile: int | None = DEFAULT_TILE):
    """Restore the ``orig_h x orig_w`` image from an LR image and its spec.

    The output is unclamped (what the losses see) unless ``clamp`` is set.
    """
    if spec is None:
        raise ScaleError("decoding needs a ScaleSpec (scale factor and original size)")
    _check_scale(spec.nominal_s)
    lr = nx.as_tensor(lr)
    h, w = lr.shape[-3:-1]
    big_h, big_w = spec.orig_h, spec.orig_w
    if big_h < h or big_w < w:
        raise ScaleError(f"original size {big_w}x{big_h} smaller than LR input {w}x{h}")
    residual = _branch_residual(lr, spec.nominal_s, state.decoder, state.hyper, big_h, big_w, tile)
    out = nx.add(residual, nx.bicubic_resize(lr, big_h, big_w))
    if clamp:
        return nx.Tensor(np.clip(out.data, 0.0, 1.0))
    return out
