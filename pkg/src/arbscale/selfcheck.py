"""Gradient oracle suite: every differentiable op, the CRM and the full loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .crm import ResampleRate, crm_condition, crm_resample, init_crm, output_grid
from .model import Hyper, init_model
from .params import leaves, map_leaves


@dataclass
class CheckCase:
    name: str
    report: nx.GradCheckReport
    tol: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _run(name, fn, inputs, tol, dtype, **kw) -> CheckCase:
    return CheckCase(name, nx.grad_check(fn, inputs, tol=tol, dtype=dtype, **kw), tol)


def primitive_cases(seed: int = 0) -> list[CheckCase]:
    """Double-precision checks of the building-block ops (tol 1e-5)."""
    rng = np.random.default_rng(seed)
    f64, tol = np.float64, 1e-5
    cases = [
        _run("conv2d 3x3", nx.conv2d,
             [rng.standard_normal((2, 6, 7, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)],
             tol, f64),
        _run("conv2d 5x5", nx.conv2d,
             [rng.standard_normal((5, 6, 2)), rng.standard_normal((5, 5, 2, 3)), rng.standard_normal(3)],
             tol, f64),
        _run("fully_connected", nx.fully_connected,
             [rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)], tol, f64),
        _run("softmax", lambda v: nx.softmax(v, axis=-1), [rng.standard_normal((4, 8))], tol, f64),
    ]
    # keep sample points away from integer coordinates and the clamp boundary,
    # where bilinear interpolation has kinks
    feat = rng.standard_normal((5, 6, 2))
    xs = rng.integers(0, 5, 7) + rng.uniform(0.1, 0.9, 7)
    ys = rng.integers(0, 4, 7) + rng.uniform(0.1, 0.9, 7)
    cases.append(_run("bilinear_sample", nx.bilinear_sample, [feat, xs, ys], tol, f64))
    cases.append(_run("bicubic_resize down", lambda f: nx.bicubic_resize(f, 5, 4),
                      [rng.standard_normal((9, 7, 2))], tol, f64))
    cases.append(_run("bicubic_resize up", lambda f: nx.bicubic_resize(f, 11, 13),
                      [rng.standard_normal((2, 5, 6, 2))], tol, f64))
    return cases


def _crm_inputs(rng, channels=3):
    params = init_crm(channels, hidden=8, n_experts=4, k=3, rng=rng, dtype=np.float64)
    return params, leaves(params)


def _with_leaves(template, arrays):
    it = iter(arrays)
    return map_leaves(lambda _: next(it), template)


def crm_kink_margin(feat, rate: ResampleRate, out_h: int, out_w: int, params) -> float:
    """Smallest distance of any CRM kink input from its kink.

    Covers the bilinear sample positions (kinks at integers and the clamp
    bounds) and the relu pre-activations of the conditioning MLP (kink at 0).
    A margin well above the finite-difference step means central differences
    see a smooth function.
    """
    feat = np.asarray(feat, dtype=np.float64)
    h, w = feat.shape[-3:-1]
    ix, iy, rx, ry = output_grid(out_h, out_w, rate)
    center = nx.bilinear_sample(feat, ix, iy).data
    delta, _ = crm_condition(rate.nominal_s, rx, ry, center, params)
    k = params.kernel_size
    taps = np.arange(k) - k // 2
    margins = []
    for coord, off, hi in ((ix, delta.data[..., 0], w - 1), (iy, delta.data[..., 1], h - 1)):
        for pos in (coord, coord[..., None] + off[..., None] + taps):
            frac = pos - np.floor(pos)
            margins.append(np.minimum(frac, 1 - frac).min())
            margins.append(np.abs(pos - 0).min())
            margins.append(np.abs(pos - hi).min())
    geom = np.stack([np.full(ix.shape, rate.nominal_s), rx, ry], axis=-1)
    v = np.concatenate([geom, center], axis=-1)
    a1 = v @ params.fc1.w.T + params.fc1.b
    a2 = np.maximum(a1, 0) @ params.fc2.w.T + params.fc2.b
    margins += [np.abs(a1).min(), np.abs(a2).min()]
    return float(min(margins))


def crm_case(seed: int = 1, tol: float = 1e-2, dtype=np.float32, h: float = 1e-6) -> CheckCase:
    """Gradient of the CRM w.r.t. its input features and every parameter.

    The sizes are chosen so that no bilinear tap or relu sits within finite
    difference reach of a kink; see :func:`crm_kink_margin`.
    """
    rng = np.random.default_rng(seed)
    feat = rng.standard_normal((7, 6, 3))
    params, arrays = _crm_inputs(rng)
    rate = ResampleRate.between(1.6, (7, 6), (4, 3))
    margin = crm_kink_margin(feat, rate, 4, 3, params)

    def fn(f, *ps):
        return crm_resample(f, rate, 4, 3, _with_leaves(params, ps))

    case = _run("crm_resample", fn, [feat, *arrays], tol, dtype, h=h)
    case.report.message += f" kink margin {margin:.3g}"
    return case


def end_to_end_case(seed: int = 3, tol: float = 1e-2, dtype=np.float32, s: float = 2.0,
                    alpha: float = 0.5) -> CheckCase:
    """Total training loss w.r.t. every model parameter, smooth quantizer surrogate."""
    from .training import loss_terms

    state = init_model(Hyper(channels=4, n_blocks=1, n_experts=4, hidden=8), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    img = 0.2 + 0.6 * rng.random((1, 16, 16, 3))

    def fn(*ps):
        return loss_terms(img, s, _with_leaves(state, ps), 1.0, alpha, surrogate=True)[0]

    return _run("end-to-end loss", fn, leaves(state), tol, dtype, max_elements=6)


def full_suite(seed: int = 0) -> list[CheckCase]:
    return [*primitive_cases(seed), crm_case(), end_to_end_case()]


def format_case(case: CheckCase) -> str:
    status = "PASS" if case.passed else "FAIL"
    return f"{status} {case.name}: max_rel_err={case.report.max_rel_err:.3g} (tol {case.tol:g})"


def run_suite(emit: Callable[[str], None] = print, seed: int = 0) -> bool:
    ok = True
    for case in full_suite(seed):
        emit(format_case(case))
        ok &= case.passed
    return ok
