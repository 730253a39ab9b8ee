"""Conditional resampling: scale- and content-conditioned feature resampling.

Every output pixel is projected into the input grid, a small MLP reads the
scale factor, the sub-pixel phase and the local feature vector, and predicts a
sampling offset plus a mixture over a bank of depthwise kernels. The mixed
kernel is applied to a bilinearly gathered neighbourhood around the shifted
location, with the centre sample added back as a residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .params import Dense


@dataclass
class CrmParams:
    fc1: Dense
    fc2: Dense
    offset_head: Dense
    routing_head: Dense
    experts: object  # (n_experts, k, k, C)
    content: bool = field(default=True, metadata={"static": True})

    @property
    def n_experts(self) -> int:
        return nx.data_of(self.experts).shape[0]

    @property
    def kernel_size(self) -> int:
        return nx.data_of(self.experts).shape[1]

    @property
    def channels(self) -> int:
        return nx.data_of(self.experts).shape[3]


@dataclass(frozen=True)
class ResampleRate:
    """Nominal scale factor plus the exact per-axis output/input ratios."""

    nominal_s: float
    rate_x: float
    rate_y: float

    def __post_init__(self):
        if self.rate_x <= 0 or self.rate_y <= 0:
            raise ValueError(f"rates must be positive, got {self.rate_x}, {self.rate_y}")
        if (self.rate_x - 1.0) * (self.rate_y - 1.0) < 0:
            raise ValueError(f"one axis shrinks and the other grows: {self.rate_x}, {self.rate_y}")

    @property
    def direction(self) -> str:
        return "upscale" if self.rate_x > 1 or self.rate_y > 1 else "downscale"

    @classmethod
    def between(cls, nominal_s: float, in_hw: tuple[int, int], out_hw: tuple[int, int]) -> "ResampleRate":
        return cls(nominal_s, out_hw[1] / in_hw[1], out_hw[0] / in_hw[0])


def init_crm(channels: int, hidden: int = 64, n_experts: int = 8, k: int = 3,
             rng: np.random.Generator | None = None, content: bool = True,
             dtype=np.float32) -> CrmParams:
    """Random CRM weights, or all zeros when ``rng`` is None."""
    def dense(n_out, n_in, gain=1.0):
        if rng is None:
            return Dense(np.zeros((n_out, n_in), dtype), np.zeros(n_out, dtype))
        w = rng.standard_normal((n_out, n_in)) * gain * np.sqrt(2.0 / n_in)
        return Dense(w.astype(dtype), np.zeros(n_out, dtype))

    n_in = channels + 3
    experts = np.zeros((n_experts, k, k, channels), dtype)
    if rng is not None:
        experts = (0.05 * rng.standard_normal(experts.shape)).astype(dtype)
    return CrmParams(
        fc1=dense(hidden, n_in),
        fc2=dense(hidden, hidden),
        offset_head=dense(2, hidden, gain=0.1),
        routing_head=dense(n_experts, hidden, gain=0.5),
        experts=experts,
        content=content,
    )


def project_coordinate(sigma, rate):
    """Map output index ``sigma`` to the (half-pixel aligned) input coordinate."""
    return (np.asarray(sigma, dtype=np.float64) + 0.5) / rate - 0.5


def relative_offset(sigma, rate):
    """Projected coordinate minus ``floor((sigma + 0.5) / rate)``, in [-0.5, 0.5)."""
    q = (np.asarray(sigma, dtype=np.float64) + 0.5) / rate
    # (q - floor(q)) - 0.5 is the same quantity, evaluated without cancellation
    return (q - np.floor(q)) - 0.5


def crm_condition(s, rx, ry, center_feat, params: CrmParams):
    """Offsets and routing weights for one or many locations.

    ``rx``/``ry``/``center_feat`` may carry arbitrary leading axes. Returns
    ``(delta, weights)`` with ``delta[..., 0]`` the x offset in input pixels,
    bounded to (-1, 1), and ``weights`` a probability vector over experts.
    """
    center = nx.as_tensor(center_feat)
    lead = center.shape[:-1]
    dt = center.dtype
    geom = np.stack(np.broadcast_arrays(np.full(lead, s, dtype=np.float64),
                                        np.broadcast_to(rx, lead), np.broadcast_to(ry, lead)), axis=-1)
    if not params.content:
        center = nx.mul(center, 0.0)
    v = nx.concat([geom.astype(dt), center], axis=-1)
    hdn = nx.relu(nx.fully_connected(v, params.fc1.w, params.fc1.b))
    hdn = nx.relu(nx.fully_connected(hdn, params.fc2.w, params.fc2.b))
    delta = nx.tanh(nx.fully_connected(hdn, params.offset_head.w, params.offset_head.b))
    weights = nx.softmax(nx.fully_connected(hdn, params.routing_head.w, params.routing_head.b))
    return delta, weights


def mix_experts(weights, experts):
    """Kernel ``sum_i weights[i] * experts[i]``; ``weights`` may carry leading axes."""
    weights, experts = nx.as_tensor(weights), nx.as_tensor(experts)
    n = experts.shape[0]
    if weights.shape[-1] != n:
        raise nx.ShapeError(f"mix_experts: weights axis -1 has {weights.shape[-1]}, expert axis 0 has {n}")
    mixed = nx.fully_connected(weights, nx.transpose(nx.reshape(experts, (n, -1))))
    return nx.reshape(mixed, weights.shape[:-1] + experts.shape[1:])


def output_grid(out_h: int, out_w: int, rate: ResampleRate, origin=(0, 0, 0, 0)):
    """Projected input coordinates and relative offsets for every output pixel.

    ``origin = (in_y0, in_x0, out_y0, out_x0)`` places an output window and
    an input crop inside larger images; coordinates are then crop-relative.
    """
    in_y0, in_x0, out_y0, out_x0 = origin
    cols = np.arange(out_w) + out_x0
    rows = np.arange(out_h) + out_y0
    ix = project_coordinate(cols, rate.rate_x) - in_x0
    iy = project_coordinate(rows, rate.rate_y) - in_y0
    rx = relative_offset(cols, rate.rate_x)
    ry = relative_offset(rows, rate.rate_y)
    ix, iy = np.meshgrid(ix, iy)
    rx, ry = np.meshgrid(rx, ry)
    return ix, iy, rx, ry


def crm_resample(feat, rate: ResampleRate, out_h: int, out_w: int, params: CrmParams,
                 return_weights: bool = False, origin=(0, 0, 0, 0)):
    """Resample ``(H, W, C)`` or ``(N, H, W, C)`` features to ``out_h x out_w``.

    ``origin`` (see :func:`output_grid`) computes one window of a larger
    output from a crop of a larger input, for tiled inference.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    feat = nx.as_tensor(feat)
    batched = feat.ndim == 4
    if not batched:
        feat = nx.reshape(feat, (1,) + feat.shape)
    n, _, _, c = feat.shape
    if c != params.channels:
        raise nx.ShapeError(f"crm_resample: feature axis -1 has {c}, expert bank expects {params.channels}")
    k = params.kernel_size
    ix, iy, rx, ry = output_grid(out_h, out_w, rate, origin)
    p = out_h * out_w
    ixb = np.broadcast_to(ix.reshape(1, p), (n, p))
    iyb = np.broadcast_to(iy.reshape(1, p), (n, p))

    center = nx.bilinear_sample(feat, ixb, iyb)                      # (n, p, c)
    delta, weights = crm_condition(rate.nominal_s, rx.reshape(p), ry.reshape(p), center, params)
    kernel = mix_experts(weights, params.experts)                  # (n, p, k, k, c)
    kernel = nx.reshape(kernel, (n, p, k * k, c))

    taps = np.arange(k) - k // 2
    ty, tx = np.meshgrid(taps, taps, indexing="ij")
    dt = feat.dtype
    px = nx.add(nx.reshape(delta[..., 0], (n, p, 1)), (ixb[..., None] + tx.reshape(1, 1, -1)).astype(dt))
    py = nx.add(nx.reshape(delta[..., 1], (n, p, 1)), (iyb[..., None] + ty.reshape(1, 1, -1)).astype(dt))
    patch = nx.bilinear_sample(feat, px, py)                          # (n, p, k*k, c)

    out = nx.add(nx.sum_(nx.mul(kernel, patch), axis=2), patch[:, :, (k * k) // 2, :])
    out = nx.reshape(out, (n, out_h, out_w, c))
    if not batched:
        out = nx.reshape(out, out.shape[1:])
    if return_weights:
        return out, weights
    return out


def bilinear_resize(feat, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resize on the same half-pixel grid the CRM uses."""
    fd = nx.data_of(feat)
    h, w = fd.shape[-3:-1]
    rate = ResampleRate(1.0, out_w / w, out_h / h)
    ix, iy, _, _ = output_grid(out_h, out_w, rate)
    if fd.ndim == 4:
        n = fd.shape[0]
        ix = np.broadcast_to(ix[None], (n,) + ix.shape)
        iy = np.broadcast_to(iy[None], (n,) + iy.shape)
    return nx.bilinear_sample(fd, ix, iy).data
