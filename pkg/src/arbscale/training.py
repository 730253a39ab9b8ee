"""Joint encoder/decoder training: losses, scale sampling, Adam, checkpoints."""
from __future__ import annotations

import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .model import Hyper, ModelState, as_trainable, decode, encode, init_model, lr_dims
from .params import leaves, map_leaves, named_leaves, zeros_like

log = logging.getLogger(__name__)

DEFAULT_SCALES = tuple(round(1.0 + 0.1 * i, 1) for i in range(1, 31))


@dataclass
class TrainConfig:
    lam: float = 1.0
    scale_grid: tuple[float, ...] = DEFAULT_SCALES
    patch: int = 64
    batch: int = 8
    steps: int = 5000
    lr: float = 1e-4
    lr_halving_every: int = 2000
    seed: int = 0
    alpha: float = 0.5
    augment: bool = True
    channels: int = 16
    n_blocks: int = 4
    n_experts: int = 8
    kernel: int = 3
    hidden: int = 64
    content: bool = True
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        self.scale_grid = tuple(float(s) for s in self.scale_grid)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.scale_grid or any(not 1.0 < s <= 4.0 for s in self.scale_grid):
            raise ValueError("every scale in scale_grid must lie in (1, 4]")
        if self.patch / max(self.scale_grid) < 8:
            raise ValueError(f"patch {self.patch} too small for scale {max(self.scale_grid)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def hyper(self) -> Hyper:
        return Hyper(self.channels, self.n_blocks, self.n_experts, self.kernel, self.hidden, self.content)


_CONFIG_KEYS = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> TrainConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment, unknown keys are errors."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        name = _CONFIG_KEYS.get(key, key)
        if name not in kinds or name == "lam" and key == "lam":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = kinds[name]
        try:
            if name == "scale_grid":
                values[name] = tuple(float(v) for v in val.replace(",", " ").split())
            elif kind == "bool":
                if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(val)
                values[name] = val.lower() in ("true", "1", "yes")
            elif kind == "int":
                values[name] = int(val)
            else:
                values[name] = float(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Losses


def _check_same(a, b, what: str):
    if nx.data_of(a).shape != nx.data_of(b).shape:
        raise nx.ShapeError(f"{what}: shapes {nx.data_of(a).shape} and {nx.data_of(b).shape} differ")


def guidance_loss(lr_pre, hr, out_h: int, out_w: int) -> nx.Tensor:
    """Mean squared error between the encoder output and the bicubic LR reference."""
    ref = nx.bicubic_resize(nx.data_of(hr), out_h, out_w).data
    _check_same(lr_pre, ref, "guidance_loss")
    return nx.mean(nx.square(nx.sub(lr_pre, ref)))


def invertibility_loss(hr_hat, hr) -> nx.Tensor:
    """Mean absolute error between reconstruction and original."""
    _check_same(hr_hat, hr, "invertibility_loss")
    return nx.mean(nx.absolute(nx.sub(hr_hat, hr)))


def total_loss(lg, li, lam: float):
    return nx.add(nx.mul(lg, lam), li)


# --------------------------------------------------------------------------
# Scale sampling


def scale_probabilities(grid: Sequence[float]) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.size == 0 or (g <= 0).any():
        raise ValueError("scale grid must be non-empty and positive")
    return g * g / np.sum(g * g)


def sample_scale(rng: np.random.Generator, grid: Sequence[float] = DEFAULT_SCALES) -> float:
    """Draw ``s`` from ``grid`` with probability proportional to ``s**2``."""
    p = scale_probabilities(grid)
    return float(grid[int(rng.choice(len(grid), p=p))])


# --------------------------------------------------------------------------
# Optimiser


@dataclass
class OptimState:
    m: ModelState
    v: ModelState
    step: int = 0


def init_optim(state: ModelState) -> OptimState:
    return OptimState(zeros_like(state), zeros_like(state), 0)


def adam_update(state: ModelState, grads: list[np.ndarray], opt: OptimState, lr: float,
                b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> tuple[ModelState, OptimState]:
    step = opt.step + 1
    params, ms, vs = leaves(state), leaves(opt.m), leaves(opt.v)
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for p, g, m, v in zip(params, grads, ms, vs):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - upd).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    it_p, it_m, it_v = iter(new_p), iter(new_m), iter(new_v)
    return (map_leaves(lambda _: next(it_p), state),
            OptimState(map_leaves(lambda _: next(it_m), opt.m), map_leaves(lambda _: next(it_v), opt.v), step))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_halving_every <= 0:
        return cfg.lr
    return cfg.lr * 0.5 ** (step // cfg.lr_halving_every)


# --------------------------------------------------------------------------
# Steps


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StepResult:
    total: float
    guidance: float
    invertibility: float
    s: float


def loss_terms(batch: np.ndarray, s: float, state: ModelState, lam: float, alpha: float,
               surrogate: bool = False):
    """Forward both halves and return ``(total, guidance, invertibility)`` tensors."""
    h, w = batch.shape[-3:-1]
    out_h, out_w, _, _ = lr_dims(h, w, s)
    lr, spec, pre = encode(batch, s, state, alpha=alpha, surrogate=surrogate, return_pre=True)
    hr_hat = decode(lr, spec, state)
    # with lambda = 0 the guidance term is still reported, but computed off
    # the tape so it cannot contribute gradient
    lg = guidance_loss(pre if lam else nx.data_of(pre), batch, out_h, out_w)
    li = invertibility_loss(hr_hat, batch)
    return total_loss(lg, li, lam), lg, li


def train_step(batch: np.ndarray, s: float, state: ModelState, opt: OptimState, cfg: TrainConfig,
               lr: float | None = None) -> tuple[StepResult, ModelState, OptimState]:
    """One Adam step on a ``(N, P, P, 3)`` batch at scale ``s``."""
    lr_dims(batch.shape[1], batch.shape[2], s)
    tracked = as_trainable(state)
    params = leaves(tracked)
    with nx.GradTape() as tape:
        total, lg, li = loss_terms(batch, s, tracked, cfg.lam, cfg.alpha)
    res = StepResult(float(total.data), float(lg.data), float(li.data), s)
    if not all(math.isfinite(v) for v in (res.total, res.guidance, res.invertibility)):
        raise TrainingDiverged(f"non-finite loss at step {opt.step}: s={s} total={res.total} "
                               f"guidance={res.guidance} invertibility={res.invertibility}")
    grads = tape.gradient(total, params)
    state, opt = adam_update(state, grads, opt, cfg.lr if lr is None else lr)
    return res, state, opt


def augment_patch(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flips and 90-degree rotation."""
    if rng.random() < 0.5:
        patch = patch[:, ::-1]
    if rng.random() < 0.5:
        patch = patch[::-1]
    if rng.random() < 0.5:
        patch = patch.transpose(1, 0, 2)
    return np.ascontiguousarray(patch)


def sample_batch(images: Sequence[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crops (one per drawn image) from float ``(H, W, 3)`` images."""
    out = np.empty((cfg.batch, cfg.patch, cfg.patch, 3), dtype=np.float32)
    for i in range(cfg.batch):
        img = images[int(rng.integers(len(images)))]
        h, w = img.shape[:2]
        y = int(rng.integers(h - cfg.patch + 1))
        x = int(rng.integers(w - cfg.patch + 1))
        crop = img[y:y + cfg.patch, x:x + cfg.patch]
        out[i] = augment_patch(crop, rng) if cfg.augment else crop
    return out


def train(images: Sequence[np.ndarray], cfg: TrainConfig, state: ModelState | None = None,
          opt: OptimState | None = None, checkpoint: str | Path | None = None,
          callback: Callable[[int, StepResult], None] | None = None) -> tuple[ModelState, OptimState, list[StepResult]]:
    """Run ``cfg.steps`` optimisation steps; the batch sequence depends only on ``cfg.seed``."""
    if not images:
        raise ValueError("no training images")
    small = [im.shape for im in images if min(im.shape[:2]) < cfg.patch]
    if small:
        raise ValueError(f"{len(small)} images smaller than patch {cfg.patch}")
    state = state or init_model(cfg.hyper, seed=cfg.seed)
    opt = opt or init_optim(state)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    t0 = time.perf_counter()
    for i in range(cfg.steps):
        s = sample_scale(rng, cfg.scale_grid)
        batch = sample_batch(images, cfg, rng)
        res, state, opt = train_step(batch, s, state, opt, cfg, lr=learning_rate(cfg, opt.step))
        history.append(res)
        if callback:
            callback(opt.step, res)
        if cfg.log_every and opt.step % cfg.log_every == 0:
            recent = history[-cfg.log_every:]
            log.info("step %d  s=%.1f  loss=%.5f  (guidance %.6f, invert %.5f)  %.1fs",
                     opt.step, s, np.mean([r.total for r in recent]), np.mean([r.guidance for r in recent]),
                     np.mean([r.invertibility for r in recent]), time.perf_counter() - t0)
        if checkpoint and cfg.checkpoint_every and opt.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint, opt)
    if checkpoint:
        save_checkpoint(state, checkpoint, opt)
    return state, opt, history


# --------------------------------------------------------------------------
# Checkpoints
#
# Little-endian: b"AIDN", u32 version, u32 tensor count, then per tensor
# u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload;
# finally u32 CRC-32 of every preceding byte.

MAGIC = b"AIDN"
VERSION = 1
_HYPER_FIELDS = ("channels", "n_blocks", "n_experts", "kernel", "hidden", "content")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _pack_tensors(tensors: Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unpack_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4:
        raise TruncatedError("file shorter than the magic number")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise TruncatedError("file ends inside the header")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(blob) - 4:
            raise TruncatedError(f"file ends inside tensor record {len(out)}")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    for _ in range(n):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChecksumError("corrupt tensor name") from exc
        (rank,) = struct.unpack("<B", take(1))
        if rank > 4:
            raise ChecksumError(f"implausible rank {rank} in tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if len(blob) - pos < 4:
        raise TruncatedError("missing checksum")
    (crc,) = struct.unpack_from("<I", blob, pos)
    if pos + 4 != len(blob) or crc != zlib.crc32(blob[:pos]) & 0xFFFFFFFF:
        raise ChecksumError("checksum mismatch")
    return out


def save_checkpoint(state: ModelState, path, opt: OptimState | None = None) -> None:
    hyper = state.hyper
    tensors = [(f"hyper.{k}", np.float32(getattr(hyper, k))) for k in _HYPER_FIELDS]
    tensors += [(f"model.{name}", nx.data_of(a)) for name, a in named_leaves(state)]
    if opt is not None:
        tensors.append(("optim.step", np.float32(opt.step)))
        tensors += [(f"optim.m.{name}", a) for name, a in named_leaves(opt.m)]
        tensors += [(f"optim.v.{name}", a) for name, a in named_leaves(opt.v)]
    Path(path).write_bytes(_pack_tensors(tensors))


def load_checkpoint(path) -> tuple[ModelState, OptimState | None]:
    """Read a checkpoint; raises a :class:`CheckpointError` subclass on any defect."""
    tensors = _unpack_tensors(Path(path).read_bytes())
    try:
        vals = {k: tensors[f"hyper.{k}"].item() for k in _HYPER_FIELDS}
    except KeyError as exc:
        raise CheckpointError(f"missing hyperparameter {exc}") from exc
    hyper = Hyper(**{k: (bool(v) if k == "content" else int(v)) for k, v in vals.items()})
    template = init_model(hyper)

    def fill(prefix: str, tmpl):
        names = [n for n, _ in named_leaves(tmpl)]
        it = iter(names)

        def pick(a):
            key = prefix + next(it)
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            if tensors[key].shape != np.shape(a):
                raise CheckpointError(f"tensor {key} has shape {tensors[key].shape}, expected {np.shape(a)}")
            return tensors[key].copy()

        return map_leaves(pick, tmpl)

    state = fill("model.", template)
    opt = None
    if "optim.step" in tensors:
        opt = OptimState(fill("optim.m.", template), fill("optim.v.", template), int(tensors["optim.step"].item()))
    return state, opt
