"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 I/O or model error, 4 check or
validation failure. Summaries go to stdout, diagnostics to stderr, and all
artefacts (images, reports, checkpoints) only to the paths named in flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .imaging import (ImageFormatError, compute_scale_for_cap, format_scale, from_float, list_pngs,
                      load_image, save_image, to_float)
from .model import ScaleError, ScaleSpec, decode, encode

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("arbscale")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _scale(text: str) -> float:
    """Parse a scale flag, rounded to the 6 significant digits kept in metadata."""
    try:
        s = float(text)
    except ValueError:
        raise UsageError(f"not a number: {text!r}") from None
    s = float(format_scale(s))
    if not 1.0 < s <= 4.0:
        raise UsageError(f"scale {text} outside the supported range (1, 4]")
    return s


def _scale_list(text: str) -> list[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise UsageError("empty scale list")
    return [_scale(p) for p in parts]


def _load_model(path):
    from .training import load_checkpoint

    state, _ = load_checkpoint(path)
    return state


def _read_rgb(path) -> tuple[np.ndarray, ScaleSpec | None]:
    img, spec = load_image(path)
    return to_float(img), spec


# --------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    from .training import load_checkpoint, load_config, train

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    paths = list_pngs(args.data)
    if not paths:
        raise FileNotFoundError(f"no PNG images in {args.data}")
    images = [_read_rgb(p)[0] for p in paths]
    state = opt = None
    if args.resume:
        state, opt = load_checkpoint(args.out)
        log.info("resuming from %s at step %d", args.out, opt.step if opt else 0)
    log.info("training on %d images for %d steps", len(images), cfg.steps)

    def report(step, res):
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"step={step} s={res.s:g} loss={res.total:.6f} guidance={res.guidance:.6f} "
                  f"invertibility={res.invertibility:.6f}", flush=True)

    _, opt, _ = train(images, cfg, state, opt, checkpoint=args.out, callback=report)
    log.info("wrote %s after %d steps", args.out, opt.step)
    return EXIT_OK


def cmd_downscale(args) -> int:
    state = _load_model(args.model)
    hr, _ = _read_rgb(args.inp)
    h, w = hr.shape[:2]
    if args.max_dim is not None:
        try:
            s = compute_scale_for_cap(w, h, args.max_dim)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if s is None:
            log.warning("%dx%d already fits within %d px; writing it unchanged", w, h, args.max_dim)
            save_image(from_float(hr), args.out)
            return EXIT_OK
    else:
        s = args.scale
    lr, spec = encode(hr, s, state)
    save_image(from_float(lr.data), args.out, spec)
    print(f"{w}x{h} -> {lr.shape[1]}x{lr.shape[0]} scale={format_scale(s)}")
    return EXIT_OK


def resolve_spec(meta: ScaleSpec | None, scale=None, width=None, height=None) -> ScaleSpec:
    """Explicit flags override metadata field by field; anything missing is an error."""
    s = scale if scale is not None else (meta.nominal_s if meta else None)
    w = width if width is not None else (meta.orig_w if meta else None)
    h = height if height is not None else (meta.orig_h if meta else None)
    missing = [name for name, v in (("--scale", s), ("--width", w), ("--height", h)) if v is None]
    if missing:
        raise UsageError("no scale metadata in the input; pass " + ", ".join(missing))
    return ScaleSpec(float(s), int(w), int(h), meta.format_version if meta else 1)


def cmd_upscale(args) -> int:
    state = _load_model(args.model)
    lr, meta = _read_rgb(args.inp)
    spec = resolve_spec(meta, args.scale, args.width, args.height)
    out = decode(lr, spec, state, clamp=True)
    save_image(from_float(out.data), args.out)
    print(f"{lr.shape[1]}x{lr.shape[0]} -> {spec.orig_w}x{spec.orig_h} scale={format_scale(spec.nominal_s)}")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    from .evaluation import roundtrip

    state = _load_model(args.model)
    hr, _ = _read_rgb(args.inp)
    res = roundtrip(hr, args.scale, state)

    def fmt(v):
        return v if isinstance(v, str) else f"{v:.4f}"

    lines = [
        f"s={format_scale(args.scale)}",
        f"psnr_hr={fmt(res['psnr_hr'])}",
        f"ssim_hr={res['ssim_hr']:.6f}",
        f"ssim_lr_vs_bicubic={res['ssim_lr']:.6f}",
        f"psnr_bicubic_baseline={fmt(res['psnr_baseline'])}",
    ]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import eval_model

    state = _load_model(args.model)
    report = eval_model(state, args.data, args.scales, report_path=args.report, curve_path=args.curve)
    if not args.report:
        sys.stdout.write(report.to_text())
    for name in report.skipped:
        log.warning("skipped unreadable image %s", name)
    return EXIT_OK


def _parse_locations(text: str) -> list[tuple[int, int]]:
    try:
        locs = [tuple(int(v) for v in part.split(",")) for part in text.split(";") if part.strip()]
    except ValueError:
        raise UsageError(f"bad location list {text!r}; expected 'row,col;row,col'") from None
    if not locs or any(len(p) != 2 for p in locs):
        raise UsageError(f"bad location list {text!r}; expected 'row,col;row,col'")
    return locs


def cmd_viz_routing(args) -> int:
    from .evaluation import render_heatmap, routing_map

    state = _load_model(args.model)
    hr, _ = _read_rgb(args.inp)
    h, w = hr.shape[:2]
    if args.locations:
        locs = _parse_locations(args.locations)
    else:
        locs = [(h // 2, c) for c in np.linspace(0, w - 1, 8).astype(int)]
    if any(not (0 <= r < h and 0 <= c < w) for r, c in locs):
        raise UsageError(f"locations must lie inside the {w}x{h} image")
    rows = []
    for s in args.scales:
        weights, _ = routing_map(state, hr, s, locs)
        rows.append(weights)
        print(f"s={format_scale(s)} " + " ".join(
            "[" + ",".join(f"{v:.4f}" for v in wv) + "]" for wv in weights))
    # one column per (scale, location), one row per expert
    save_image(render_heatmap(np.concatenate(rows, axis=0).T), args.out)
    return EXIT_OK


def cmd_diff_map(args) -> int:
    from .evaluation import lr_difference

    state = _load_model(args.model)
    hr, _ = _read_rgb(args.inp)
    img, mad = lr_difference(state, hr, args.scale, args.gain)
    save_image(img, args.out)
    print(f"s={format_scale(args.scale)} mean_abs_diff={mad:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .selfcheck import run_suite

    if not run_suite(emit=print, seed=args.seed):
        raise CheckFailed("gradient check failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _scale_arg(text):
    try:
        return _scale(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _scales_arg(text):
    try:
        return _scale_list(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arbscale", description="Scale-arbitrary invertible image downscaling.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train encoder and decoder")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=_positive_int, help="override the configured step count")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("downscale", help="encode an image to a smaller 8-bit PNG")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    g = d.add_mutually_exclusive_group(required=True)
    g.add_argument("--scale", type=_scale_arg)
    g.add_argument("--max-dim", type=_positive_int)
    d.set_defaults(func=cmd_downscale)

    u = sub.add_parser("upscale", help="restore the original resolution from a downscaled PNG")
    u.add_argument("--model", required=True)
    u.add_argument("--in", dest="inp", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--scale", type=_scale_arg)
    u.add_argument("--width", type=_positive_int)
    u.add_argument("--height", type=_positive_int)
    u.set_defaults(func=cmd_upscale)

    r = sub.add_parser("roundtrip", help="encode and decode in memory, print quality metrics")
    r.add_argument("--model", required=True)
    r.add_argument("--scale", type=_scale_arg, required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--report")
    r.set_defaults(func=cmd_roundtrip)

    e = sub.add_parser("eval", help="evaluate a model on a directory of PNGs")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scales", type=_scales_arg, required=True)
    e.add_argument("--report")
    e.add_argument("--curve")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-routing", help="heat map of decoder routing weights")
    v.add_argument("--model", required=True)
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--scales", type=_scales_arg, required=True)
    v.add_argument("--locations", help="'row,col;row,col' in original-image pixels")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_routing)

    m = sub.add_parser("diff-map", help="amplified |encoder LR - bicubic LR| image")
    m.add_argument("--model", required=True)
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--scale", type=_scale_arg, required=True)
    m.add_argument("--gain", type=float, default=10.0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_diff_map)

    c = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    from .training import CheckpointError, ConfigError, TrainingDiverged

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckFailed, ScaleError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
