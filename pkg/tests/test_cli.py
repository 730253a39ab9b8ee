import numpy as np
import pytest
from PIL import Image

from arbscale.cli import EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USAGE, resolve_spec, run
from arbscale.evaluation import psnr
from arbscale.imaging import from_float, load_image, save_image, to_float
from arbscale.model import Hyper, ScaleError, ScaleSpec, init_model
from arbscale.toydata import make_texture
from arbscale.training import load_checkpoint, save_checkpoint

from oracles import bicubic_loop


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_checkpoint(init_model(seed=None), root / "zero.aidn")
    save_checkpoint(init_model(Hyper(channels=4, n_blocks=1, hidden=8), seed=2), root / "small.aidn")
    save_image(from_float(make_texture(11, 80)[:, :72]), root / "hr.png")
    data = root / "data"
    data.mkdir()
    for i in range(3):
        save_image(from_float(make_texture(20 + i, 48)), data / f"{i}.png")
    return root


def test_downscale_then_upscale_uses_metadata(files, tmp_path, capsys):
    assert run(["downscale", "--model", str(files / "zero.aidn"), "--in", str(files / "hr.png"),
                "--out", str(tmp_path / "lr.png"), "--scale", "2.5"]) == EXIT_OK
    img, spec = load_image(tmp_path / "lr.png")
    assert (img.width, img.height) == (28, 32) and spec == ScaleSpec(2.5, 72, 80)
    assert run(["upscale", "--model", str(files / "zero.aidn"), "--in", str(tmp_path / "lr.png"),
                "--out", str(tmp_path / "hr.png")]) == EXIT_OK
    out, _ = load_image(tmp_path / "hr.png")
    assert (out.width, out.height) == (72, 80)
    assert "72x80 -> 28x32 scale=2.5" in capsys.readouterr().out


def test_max_dim_hits_platform_cap(files, tmp_path):
    save_image(from_float(np.full((1080, 1920, 3), 0.5, np.float32)), tmp_path / "big.png")
    assert run(["downscale", "--model", str(files / "small.aidn"), "--in", str(tmp_path / "big.png"),
                "--out", str(tmp_path / "lr.png"), "--max-dim", "1600"]) == EXIT_OK
    img, spec = load_image(tmp_path / "lr.png")
    assert (img.width, img.height) == (1600, 900)
    assert Image.open(tmp_path / "lr.png").text["AIDN-Scale"] == "1.2"
    assert spec.orig_w == 1920 and spec.orig_h == 1080


def test_max_dim_already_small_is_passthrough(files, tmp_path, caplog):
    assert run(["downscale", "--model", str(files / "zero.aidn"), "--in", str(files / "hr.png"),
                "--out", str(tmp_path / "same.png"), "--max-dim", "500"]) == EXIT_OK
    assert load_image(tmp_path / "same.png")[0] == load_image(files / "hr.png")[0]
    assert "already fits" in caplog.text


def test_upscale_without_metadata_needs_flags(files, tmp_path):
    Image.fromarray(np.zeros((10, 12, 3), np.uint8)).save(tmp_path / "bare.png")
    args = ["upscale", "--model", str(files / "zero.aidn"), "--in", str(tmp_path / "bare.png"),
            "--out", str(tmp_path / "o.png")]
    assert run(args) == EXIT_USAGE
    assert run(args + ["--scale", "2", "--width", "24", "--height", "20"]) == EXIT_OK
    assert load_image(tmp_path / "o.png")[0].pixels.shape == (20, 24, 3)


def test_resolve_spec_flags_override_metadata():
    meta = ScaleSpec(2.0, 40, 30)
    assert resolve_spec(meta) == meta
    assert resolve_spec(meta, width=41) == ScaleSpec(2.0, 41, 30)
    assert resolve_spec(None, 3.0, 30, 30) == ScaleSpec(3.0, 30, 30)


def test_upscale_to_smaller_size_is_check_failure(files, tmp_path):
    Image.fromarray(np.zeros((10, 12, 3), np.uint8)).save(tmp_path / "bare.png")
    assert run(["upscale", "--model", str(files / "zero.aidn"), "--in", str(tmp_path / "bare.png"),
                "--out", str(tmp_path / "o.png"), "--scale", "2", "--width", "6", "--height", "5"]) == EXIT_CHECK


def test_zero_model_roundtrip_matches_external_bicubic(files, tmp_path, capsys):
    report = tmp_path / "rt.txt"
    assert run(["roundtrip", "--model", str(files / "zero.aidn"), "--scale", "2.0",
                "--in", str(files / "hr.png"), "--report", str(report)]) == EXIT_OK
    fields = dict(line.split("=") for line in report.read_text().splitlines())
    assert report.read_text() == capsys.readouterr().out
    hr = to_float(load_image(files / "hr.png")[0]).astype(np.float64)
    lr = np.floor(np.clip(bicubic_loop(hr, 40, 36), 0, 1) * 255 + 0.5) / 255
    ref = psnr(np.clip(bicubic_loop(lr, 80, 72), 0, 1), hr)
    assert abs(float(fields["psnr_bicubic_baseline"]) - ref) <= 0.01
    assert abs(float(fields["psnr_hr"]) - ref) <= 0.01
    assert float(fields["ssim_lr_vs_bicubic"]) > 0.999


def test_eval_writes_report_and_curve(files, tmp_path):
    assert run(["eval", "--model", str(files / "small.aidn"), "--data", str(files / "data"),
                "--scales", "1.5,3", "--report", str(tmp_path / "r.txt"), "--curve", str(tmp_path / "c.txt")]) == EXIT_OK
    assert "s=1.5" in (tmp_path / "r.txt").read_text()
    assert len((tmp_path / "c.txt").read_text().splitlines()) == 2


def test_viz_routing_and_diff_map(files, tmp_path, capsys):
    assert run(["viz-routing", "--model", str(files / "small.aidn"), "--in", str(files / "hr.png"),
                "--scales", "1.5,2.5,4", "--locations", "10,10;40,30", "--out", str(tmp_path / "h.png")]) == EXIT_OK
    heat, _ = load_image(tmp_path / "h.png")
    assert heat.height == 8 * 8 and heat.width == 6 * 8
    assert len([l for l in capsys.readouterr().out.splitlines() if l.startswith("s=")]) == 3
    assert run(["diff-map", "--model", str(files / "zero.aidn"), "--in", str(files / "hr.png"),
                "--scale", "3", "--out", str(tmp_path / "d.png")]) == EXIT_OK
    mad = float(capsys.readouterr().out.split("mean_abs_diff=")[1])
    assert mad < 1e-4   # the zero model's LR is the 8-bit bicubic LR up to float32 rounding ties
    assert np.mean(load_image(tmp_path / "d.png")[0].pixels > 0) < 0.01


def test_viz_routing_rejects_outside_locations(files, tmp_path):
    assert run(["viz-routing", "--model", str(files / "small.aidn"), "--in", str(files / "hr.png"),
                "--scales", "2", "--locations", "500,1", "--out", str(tmp_path / "h.png")]) == EXIT_USAGE


def test_train_and_resume(files, tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("patch=32\nbatch=2\nsteps=2\nchannels=4\nn_blocks=1\nhidden=8\nscale_grid=2.0 3.0\n"
                   "lr=1e-3\nlog_every=1\n")
    ck = tmp_path / "m.aidn"
    assert run(["train", "--config", str(cfg), "--data", str(files / "data"), "--out", str(ck)]) == EXIT_OK
    assert load_checkpoint(ck)[1].step == 2
    assert run(["train", "--config", str(cfg), "--data", str(files / "data"), "--out", str(ck),
                "--resume", "--steps", "1"]) == EXIT_OK
    assert load_checkpoint(ck)[1].step == 3
    out = capsys.readouterr().out
    assert out.count("step=") == 3 and "invertibility=" in out


def test_gradcheck_passes(capsys):
    assert run(["gradcheck"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines if l.startswith(("PASS", "FAIL")))


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["downscale", "--model", "m", "--in", "a", "--out", "b"],
    ["downscale", "--model", "m", "--in", "a", "--out", "b", "--scale", "5"],
    ["downscale", "--model", "m", "--in", "a", "--out", "b", "--scale", "1"],
    ["eval", "--model", "m", "--data", "d", "--scales", ""],
])
def test_usage_errors(argv):
    assert run(argv) == EXIT_USAGE


def test_bad_config_is_usage_error(files, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("warp_factor=9\n")
    assert run(["train", "--config", str(cfg), "--data", str(files / "data"), "--out", str(tmp_path / "m")]) == EXIT_USAGE


def test_io_errors(files, tmp_path):
    assert run(["downscale", "--model", str(tmp_path / "nope.aidn"), "--in", str(files / "hr.png"),
                "--out", str(tmp_path / "o.png"), "--scale", "2"]) == EXIT_IO
    (tmp_path / "junk.aidn").write_bytes(b"JUNKJUNKJUNK")
    assert run(["downscale", "--model", str(tmp_path / "junk.aidn"), "--in", str(files / "hr.png"),
                "--out", str(tmp_path / "o.png"), "--scale", "2"]) == EXIT_IO
    assert run(["downscale", "--model", str(files / "zero.aidn"), "--in", str(tmp_path / "missing.png"),
                "--out", str(tmp_path / "o.png"), "--scale", "2"]) == EXIT_IO


def test_too_small_input_is_check_failure(files, tmp_path):
    save_image(from_float(np.zeros((10, 10, 3))), tmp_path / "tiny.png")
    assert run(["downscale", "--model", str(files / "zero.aidn"), "--in", str(tmp_path / "tiny.png"),
                "--out", str(tmp_path / "o.png"), "--scale", "4"]) == EXIT_CHECK


def test_scale_error_type():
    with pytest.raises(ScaleError):
        ScaleSpec(4.5, 10, 10)
