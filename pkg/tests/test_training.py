import struct
import zlib

import numpy as np
import pytest
from scipy import stats

from arbscale import numerics as nx
from arbscale import training as tr
from arbscale.model import Hyper, as_trainable, init_model
from arbscale.params import leaves, map_leaves, named_leaves
from arbscale.toydata import make_texture
from arbscale.training import (BadMagicError, ChecksumError, ConfigError, TrainConfig, TrainingDiverged,
                               TruncatedError, VersionError, guidance_loss, init_optim, invertibility_loss,
                               load_checkpoint, parse_config, sample_scale, save_checkpoint,
                               scale_probabilities, total_loss, train, train_step)

SMALL = dict(channels=4, n_blocks=1, n_experts=4, hidden=8, patch=32, batch=2)


def small_images(n=4, size=40):
    return [make_texture(100 + i, size).astype(np.float32) for i in range(n)]


# ---------------------------------------------------------------- losses


def test_guidance_loss_examples():
    hr = np.random.default_rng(0).random((16, 16, 3))
    ref = nx.bicubic_resize(hr, 8, 8).data
    assert guidance_loss(ref, hr, 8, 8).data == 0.0
    assert abs(guidance_loss(ref + 0.1, hr, 8, 8).data - 0.01) <= 1e-12
    with pytest.raises(nx.ShapeError):
        guidance_loss(ref[:7], hr, 8, 8)


def test_invertibility_loss_examples():
    a = np.random.default_rng(1).random((6, 5, 3))
    assert invertibility_loss(a, a).data == 0.0
    assert abs(invertibility_loss(a + 0.1, a).data - 0.1) <= 1e-12
    b = np.random.default_rng(2).random((6, 5, 3))
    assert invertibility_loss(a, b).data == invertibility_loss(b, a).data
    with pytest.raises(nx.ShapeError):
        invertibility_loss(a, b[:5])


def test_total_loss_examples():
    assert abs(total_loss(0.01, 0.1, 1.0).data - 0.11) <= 1e-12
    assert total_loss(0.5, 0.1, 0.0).data == 0.1
    assert total_loss(0.0, 0.0, 3.0).data == 0.0
    assert total_loss(0.02, 0.1, 1.0).data >= total_loss(0.01, 0.1, 1.0).data
    assert total_loss(0.01, 0.2, 1.0).data >= total_loss(0.01, 0.1, 1.0).data


# ---------------------------------------------------------------- scale sampling


def test_default_grid_probabilities():
    grid = tr.DEFAULT_SCALES
    assert len(grid) == 30 and grid[0] == 1.1 and grid[-1] == 4.0
    assert abs(sum(s * s for s in grid) - 217.55) <= 1e-9
    p = scale_probabilities(grid)
    assert abs(p[-1] - 0.073547) <= 1e-6
    assert abs(p[0] - 0.005562) <= 1e-6
    assert abs(p.sum() - 1.0) <= 1e-12


def test_sampler_frequencies_and_chi_square():
    rng = np.random.default_rng(0)
    grid = tr.DEFAULT_SCALES
    draws = np.array([sample_scale(rng, grid) for _ in range(200_000)])
    counts = np.array([(draws == s).sum() for s in grid])
    assert counts.sum() == 200_000
    expected = np.array([s * s / 217.55 for s in grid])
    assert np.abs(counts / 200_000 - expected).max() <= 0.005
    assert stats.chisquare(counts, expected * 200_000).pvalue > 0.001


def test_sampler_is_deterministic():
    a = [sample_scale(np.random.default_rng(5)) for _ in range(3)]
    b = [sample_scale(np.random.default_rng(5)) for _ in range(3)]
    assert a == b


# ---------------------------------------------------------------- config


def test_parse_config_keys_and_comments():
    cfg = parse_config("# desk run\nlambda = 0.5\nsteps=10  # short\nscale_grid = 1.5, 2.0\naugment=false\n")
    assert cfg.lam == 0.5 and cfg.steps == 10 and cfg.scale_grid == (1.5, 2.0) and not cfg.augment


@pytest.mark.parametrize("text", [
    "bogus=1", "lam=1", "lambda=-1", "scale_grid=0.9,2", "patch=24\nscale_grid=4.0", "steps", "steps=ten",
])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# ---------------------------------------------------------------- steps


def test_train_steps_are_deterministic():
    cfg = TrainConfig(steps=10, seed=3, log_every=0, lr=1e-3, **SMALL)
    imgs = small_images()
    a, _, ha = train(imgs, cfg)
    b, _, hb = train(imgs, cfg)
    assert [r.total for r in ha] == [r.total for r in hb]
    for x, y in zip(leaves(a), leaves(b)):
        np.testing.assert_array_equal(x, y)


def test_single_step_decreases_loss_for_most_seeds():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        batch = np.stack([make_texture(seed * 10 + i, 48) for i in range(4)]).astype(np.float32)
        s = float(rng.choice([1.5, 2.0, 3.0]))
        state = init_model(seed=seed)
        cfg = TrainConfig(lr=1e-4, batch=4, patch=48)
        before = float(tr.loss_terms(batch, s, state, 1.0, 0.5)[0].data)
        _, new_state, _ = train_step(batch, s, state, init_optim(state), cfg)
        after = float(tr.loss_terms(batch, s, new_state, 1.0, 0.5)[0].data)
        wins += after < before
    assert wins >= 8


def test_lambda_zero_guidance_reported_without_gradient():
    state = init_model(Hyper(channels=4, n_blocks=1, n_experts=4, hidden=8), seed=2)
    batch = np.stack(small_images(2, 32))
    tracked = as_trainable(state)
    with nx.GradTape() as tape:
        total, lg, li = tr.loss_terms(batch, 2.0, tracked, 0.0, 0.5)
    assert float(lg.data) > 0.0
    assert float(total.data) == float(li.data)
    g_total = tape.gradient(total, leaves(tracked))
    with nx.GradTape() as tape2:
        _, _, li2 = tr.loss_terms(batch, 2.0, tracked, 0.0, 0.5)
    g_li = tape2.gradient(li2, leaves(tracked))
    for a, b in zip(g_total, g_li):
        np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics():
    state = init_model(Hyper(channels=4, n_blocks=1, n_experts=4, hidden=8), seed=2)
    state = map_leaves(lambda a: np.full_like(a, np.nan), state)
    batch = np.stack(small_images(2, 32))
    with pytest.raises(TrainingDiverged, match=r"s=2\.0"):
        train_step(batch, 2.0, state, init_optim(state), TrainConfig(**SMALL))


def test_adam_bias_correction_first_step():
    state = init_model(Hyper(channels=2, n_blocks=1, n_experts=2, hidden=4), seed=1)
    grads = [np.full_like(a, 0.3) for a in leaves(state)]
    new, opt = tr.adam_update(state, grads, init_optim(state), lr=0.01)
    # after bias correction the first Adam step is lr * sign(g)
    for a, b in zip(leaves(state), leaves(new)):
        np.testing.assert_allclose(a - b, 0.01, rtol=1e-4)
    assert opt.step == 1


def test_learning_rate_halving():
    cfg = TrainConfig(lr=1e-3, lr_halving_every=100)
    assert tr.learning_rate(cfg, 0) == 1e-3
    assert tr.learning_rate(cfg, 100) == 5e-4
    assert tr.learning_rate(cfg, 250) == 2.5e-4


def test_moving_average_loss_decreases_over_300_steps():
    imgs = [make_texture(200 + i, 48).astype(np.float32) for i in range(16)]
    cfg = TrainConfig(steps=300, lr=2e-3, log_every=0, seed=0, **SMALL)
    _, _, hist = train(imgs, cfg)
    totals = np.array([r.total for r in hist])
    assert totals[250:300].mean() < totals[0:50].mean()


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    state = init_model(Hyper(channels=4, n_blocks=2, n_experts=8, hidden=16, content=False), seed=4)
    opt = init_optim(state)
    opt = tr.OptimState(map_leaves(lambda a: a + 0.25, opt.m), map_leaves(lambda a: a + 0.5, opt.v), 17)
    path = tmp_path / "m.aidn"
    save_checkpoint(state, path, opt)
    loaded, lopt = load_checkpoint(path)
    assert loaded.hyper == state.hyper
    for (na, a), (nb, b) in zip(named_leaves(state), named_leaves(loaded)):
        assert na == nb
        assert a.dtype == b.dtype == np.float32
        np.testing.assert_array_equal(a, b)
    assert lopt.step == 17
    for a, b in zip(leaves(opt.v), leaves(lopt.v)):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_without_optimizer(tmp_path):
    state = init_model(Hyper(channels=2, n_blocks=1, n_experts=2, hidden=4), seed=1)
    save_checkpoint(state, tmp_path / "m.aidn")
    assert load_checkpoint(tmp_path / "m.aidn")[1] is None


@pytest.fixture
def ckpt_bytes(tmp_path):
    state = init_model(Hyper(channels=2, n_blocks=1, n_experts=2, hidden=4), seed=1)
    save_checkpoint(state, tmp_path / "m.aidn")
    return (tmp_path / "m.aidn").read_bytes()


def test_checkpoint_header_layout(ckpt_bytes):
    assert ckpt_bytes[:4] == b"AIDN"
    assert struct.unpack_from("<I", ckpt_bytes, 4)[0] == 1
    count = struct.unpack_from("<I", ckpt_bytes, 8)[0]
    assert count > 10
    assert struct.unpack_from("<I", ckpt_bytes, len(ckpt_bytes) - 4)[0] == zlib.crc32(ckpt_bytes[:-4])


def test_checkpoint_written_by_independent_packer_loads(tmp_path):
    # a hand-rolled little-endian writer stands in for "another machine"
    state = init_model(Hyper(channels=2, n_blocks=1, n_experts=2, hidden=4), seed=6)
    hyper = {"channels": 2, "n_blocks": 1, "n_experts": 2, "kernel": 3, "hidden": 4, "content": 1}
    records = [(f"hyper.{k}", np.array(v, dtype=np.float32)) for k, v in hyper.items()]
    records += [(f"model.{n}", np.asarray(a)) for n, a in named_leaves(state)]
    body = b"AIDN" + (1).to_bytes(4, "little") + len(records).to_bytes(4, "little")
    for name, arr in records:
        raw = name.encode()
        body += len(raw).to_bytes(2, "little") + raw + bytes([arr.ndim])
        body += b"".join(int(d).to_bytes(4, "little") for d in arr.shape)
        body += b"".join(struct.pack("<f", float(v)) for v in arr.ravel())
    body += (zlib.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little")
    (tmp_path / "x.aidn").write_bytes(body)
    loaded, _ = load_checkpoint(tmp_path / "x.aidn")
    for a, b in zip(leaves(state), leaves(loaded)):
        np.testing.assert_array_equal(a, b)


def test_corrupt_payload_byte_is_checksum_error(tmp_path, ckpt_bytes):
    bad = bytearray(ckpt_bytes)
    bad[len(bad) - 10] ^= 0x40
    (tmp_path / "bad.aidn").write_bytes(bytes(bad))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "bad.aidn")


def test_every_single_byte_corruption_is_detected(tmp_path, ckpt_bytes):
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(ckpt_bytes), 200, replace=False):
        bad = bytearray(ckpt_bytes)
        bad[pos] ^= 1 << int(rng.integers(8))
        (tmp_path / "bad.aidn").write_bytes(bytes(bad))
        with pytest.raises(tr.CheckpointError):
            load_checkpoint(tmp_path / "bad.aidn")


def test_unknown_version_is_version_error(tmp_path, ckpt_bytes):
    bad = ckpt_bytes[:4] + struct.pack("<I", 2) + ckpt_bytes[8:]
    (tmp_path / "v.aidn").write_bytes(bad)
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v.aidn")


def test_bad_magic_and_truncation(tmp_path, ckpt_bytes):
    (tmp_path / "m.aidn").write_bytes(b"NOPE" + ckpt_bytes[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "m.aidn")
    for cut in (2, 10, 40, len(ckpt_bytes) - 2):
        (tmp_path / "t.aidn").write_bytes(ckpt_bytes[:cut])
        with pytest.raises(TruncatedError):
            load_checkpoint(tmp_path / "t.aidn")


def test_error_classes_are_distinct():
    classes = {BadMagicError, VersionError, ChecksumError, TruncatedError}
    assert len(classes) == 4
    for a in classes:
        for b in classes - {a}:
            assert not issubclass(a, b)
