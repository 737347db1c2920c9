"""Network, normalization, training-loop, and checkpoint tests."""

import json

import numpy as np
import pytest

from eitlab import models, sampler
from eitlab.checkpoint import load_checkpoint, save_checkpoint
from eitlab.errors import ContractError
from eitlab.models import (
    Fvcn,
    NormStats,
    ScoreNet,
    TrainOpts,
    eps_from_score,
    fvcn_forward,
    fvcn_mse,
    score_from_eps,
    sinusoidal_time_embedding,
    train_fvcn,
    train_score,
)
from eitlab.phantoms import Dataset

SMALL_SCORE_ARCH = {
    "grid": 16,
    "base_channels": 16,
    "channel_mult": [1, 2],
    "blocks_per_level": 1,
    "time_dim": 16,
    "time_hidden": 32,
    "groups": 8,
}

SMALL_FVCN_ARCH = {"grid": 8, "channels": [8, 16], "hidden": 64, "n_out": 6}


def _synthetic_dataset(n=24, grid=8, n_out=6, seed=11, zero_record=True):
    """Images pushed through a fixed linear map: learnable by construction."""
    rng = np.random.default_rng(seed)
    imgs = 0.3 * rng.standard_normal((n, grid, grid))
    if zero_record:
        imgs[0] = 0.0
    amap = rng.standard_normal((n_out, grid * grid)) / grid
    base = rng.standard_normal(n_out)
    volts = imgs.reshape(n, -1) @ amap.T + base
    manifest = {
        "image_scale": 0.5,
        "voltage_mean": volts.mean(axis=0).tolist(),
        "voltage_std": volts.std(axis=0).tolist(),
    }
    return Dataset(
        manifest=manifest,
        sigma_true=imgs.astype(np.float32),
        initial=(imgs + 0.05 * rng.standard_normal(imgs.shape)).astype(
            np.float32
        ),
        voltage=volts.astype(np.float32),
    ), base


class TestNormStats:
    def test_roundtrip(self):
        ns = NormStats(0.6, [1.0, 2.0], [0.5, 0.25])
        v = np.array([2.0, 3.0])
        assert np.allclose(ns.denorm_voltage(ns.norm_voltage(v)), v)
        img = np.array([[0.3, -0.6]])
        assert np.allclose(ns.denorm_image(ns.norm_image(img)), img)

    def test_json_roundtrip(self):
        ns = NormStats(0.6, [1.0, 2.0], [0.5, 0.25])
        d = json.loads(json.dumps(ns.to_json_dict()))
        ns2 = NormStats.from_json_dict(d)
        assert ns2.image_scale == ns.image_scale
        assert np.array_equal(ns2.voltage_mean, ns.voltage_mean)
        assert np.array_equal(ns2.voltage_std, ns.voltage_std)

    def test_from_manifest(self):
        ds, _ = _synthetic_dataset()
        ns = NormStats.from_manifest(ds.manifest)
        assert ns.image_scale == 0.5
        assert ns.voltage_mean.shape == (6,)

    def test_validation(self):
        with pytest.raises(ContractError):
            NormStats(0.0, [0.0], [1.0])
        with pytest.raises(ContractError):
            NormStats(1.0, [0.0], [0.0])


class TestTimeEmbedding:
    def test_shape_and_endpoints(self):
        emb = sinusoidal_time_embedding(np.array([0, 3]), 8)
        assert emb.shape == (2, 8)
        assert emb.dtype == np.float32
        assert np.allclose(emb[0, :4], 0.0)  # sin(0)
        assert np.allclose(emb[0, 4:], 1.0)  # cos(0)

    def test_odd_dim_rejected(self):
        with pytest.raises(ContractError):
            sinusoidal_time_embedding(np.array([1]), 7)

    def test_tiny_dim_finite(self):
        assert np.all(np.isfinite(sinusoidal_time_embedding(np.array([5]), 2)))


class TestScoreNet:
    def test_forward_shape_and_repeatability(self):
        rng = np.random.default_rng(0)
        net = ScoreNet(SMALL_SCORE_ARCH, rng=np.random.default_rng(1))
        x = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
        c = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
        t = np.array([1, 10, 50])
        y1 = net.eps(x, c, t)
        y2 = net.eps(x, c, t)
        assert y1.shape == (3, 1, 16, 16)
        assert np.array_equal(y1, y2)

    def test_input_validation(self):
        net = ScoreNet(SMALL_SCORE_ARCH)
        x = np.zeros((2, 1, 16, 16), dtype=np.float32)
        with pytest.raises(ContractError):
            net.eps(x, np.zeros((2, 1, 8, 8), dtype=np.float32), [1, 2])
        with pytest.raises(ContractError):
            net.eps(x, x, [1])
        with pytest.raises(ContractError):
            net.eps(x, x, [0, 1])
        bad = np.zeros((2, 2, 16, 16), dtype=np.float32)
        with pytest.raises(ContractError):
            net.eps(bad, bad, [1, 2])

    def test_eps_score_conversions(self):
        sched = sampler.cosine_schedule(100)
        rng = np.random.default_rng(2)
        eps = rng.standard_normal((4, 1, 5, 5))
        t = np.array([3, 40, 77, 100])
        s = score_from_eps(eps, t, sched)
        back = eps_from_score(s, t, sched)
        assert np.allclose(back, eps, rtol=1e-12, atol=0)
        # the conversion is exactly -eps / sqrt(1 - alpha_bar)
        d = np.sqrt(1.0 - sched.alpha_bar[t])[:, None, None, None]
        assert np.array_equal(s, -eps / d)


class TestTrainScore:
    def test_overfits_tiny_corpus(self):
        ds, _ = _synthetic_dataset(n=4, grid=16)
        sched = sampler.cosine_schedule(50)
        opts = TrainOpts(steps=300, batch=4, lr=1e-3, seed=0)
        res = train_score(ds, sched, opts, arch=SMALL_SCORE_ARCH)
        assert len(res.losses) == 300
        assert min(res.losses[-50:]) < 0.2 * res.losses[0]

    def test_deterministic(self):
        ds, _ = _synthetic_dataset(n=4, grid=16)
        sched = sampler.cosine_schedule(50)
        opts = TrainOpts(steps=25, batch=2, lr=1e-3, seed=7)
        r1 = train_score(ds, sched, opts, arch=SMALL_SCORE_ARCH)
        r2 = train_score(ds, sched, opts, arch=SMALL_SCORE_ARCH)
        assert r1.losses == r2.losses

    def test_epochs_resolve(self):
        opts = TrainOpts(batch=8, epochs=3)
        assert opts.resolve_steps(20) == 9  # ceil(20/8) * 3


class TestTrainFvcn:
    def test_learns_linear_map(self):
        ds, base = _synthetic_dataset()
        opts = TrainOpts(steps=1200, batch=8, lr=3e-3, seed=0,
                         eval_every=50, patience=20)
        res = train_fvcn(ds, opts, arch=SMALL_FVCN_ARCH)
        assert res.train_mse is not None and res.train_mse < 0.1
        assert res.val_mse is not None
        assert res.losses[-1] < res.losses[0]
        assert len(res.val_losses) >= 1

        # a zero (background) image should map near the base frame
        zero_pred = fvcn_forward(res.model, np.zeros((8, 8), dtype=np.float32))
        want = res.norm.norm_voltage(base)
        assert float(np.mean((zero_pred - want) ** 2)) < 0.1

    def test_deterministic(self):
        ds, _ = _synthetic_dataset()
        opts = TrainOpts(steps=60, batch=8, lr=1e-3, seed=3, eval_every=20)
        r1 = train_fvcn(ds, opts, arch=SMALL_FVCN_ARCH)
        r2 = train_fvcn(ds, opts, arch=SMALL_FVCN_ARCH)
        assert r1.losses == r2.losses
        assert r1.val_losses == r2.val_losses

    def test_seed_changes_trajectory(self):
        ds, _ = _synthetic_dataset()
        o1 = TrainOpts(steps=30, batch=8, lr=1e-3, seed=0, eval_every=10)
        o2 = TrainOpts(steps=30, batch=8, lr=1e-3, seed=1, eval_every=10)
        r1 = train_fvcn(ds, o1, arch=SMALL_FVCN_ARCH)
        r2 = train_fvcn(ds, o2, arch=SMALL_FVCN_ARCH)
        assert r1.losses != r2.losses


class TestFvcn:
    def test_forward_shapes(self):
        net = Fvcn(SMALL_FVCN_ARCH)
        single = fvcn_forward(net, np.zeros((8, 8), dtype=np.float32))
        assert single.shape == (6,)
        batch = fvcn_forward(net, np.zeros((3, 8, 8), dtype=np.float32))
        assert batch.shape == (3, 6)
        nchw = net.forward(np.zeros((2, 1, 8, 8), dtype=np.float32))
        assert nchw.shape == (2, 6)

    def test_input_validation(self):
        net = Fvcn(SMALL_FVCN_ARCH)
        with pytest.raises(ContractError):
            net.forward(np.zeros((1, 1, 9, 9), dtype=np.float32))
        with pytest.raises(ContractError):
            net.forward(np.zeros((1, 2, 8, 8), dtype=np.float32))

    def test_mse_helper(self):
        net = Fvcn(SMALL_FVCN_ARCH)
        x = np.zeros((2, 1, 8, 8), dtype=np.float32)
        pred = net.forward(x)
        assert fvcn_mse(net, x, pred) == 0.0


class TestCheckpoint:
    def test_fvcn_roundtrip_bit_identical(self, tmp_path):
        net = Fvcn(SMALL_FVCN_ARCH, rng=np.random.default_rng(4))
        norm = NormStats(0.6, np.zeros(6), np.ones(6))
        save_checkpoint(tmp_path / "ck", net, norm, extra={"steps": 10})
        loaded, norm2 = load_checkpoint(tmp_path / "ck")
        x = np.random.default_rng(0).standard_normal((2, 1, 8, 8)).astype(
            np.float32
        )
        assert np.array_equal(net.forward(x), loaded.forward(x))
        assert norm2.image_scale == 0.6
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["extra"]["steps"] == 10
        assert manifest["arch"]["kind"] == "fvcn"

    def test_score_roundtrip_bit_identical(self, tmp_path):
        net = ScoreNet(SMALL_SCORE_ARCH, rng=np.random.default_rng(5))
        norm = NormStats(0.6, np.zeros(6), np.ones(6))
        save_checkpoint(tmp_path / "ck", net, norm)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        c = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        t = np.array([4, 31])
        assert np.array_equal(net.eps(x, c, t), loaded.eps(x, c, t))

    def test_name_mismatch_rejected(self, tmp_path):
        net = Fvcn(SMALL_FVCN_ARCH)
        save_checkpoint(tmp_path / "ck", net, NormStats(1.0, [0.0], [1.0]))
        mpath = tmp_path / "ck" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["params"][0]["name"] = "bogus.weight"
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(ContractError):
            load_checkpoint(tmp_path / "ck")

    def test_size_mismatch_rejected(self, tmp_path):
        net = Fvcn(SMALL_FVCN_ARCH)
        save_checkpoint(tmp_path / "ck", net, NormStats(1.0, [0.0], [1.0]))
        ppath = tmp_path / "ck" / "params.f32"
        ppath.write_bytes(ppath.read_bytes()[:-8])
        with pytest.raises(ContractError):
            load_checkpoint(tmp_path / "ck")

    def test_unknown_kind_rejected(self, tmp_path):
        net = Fvcn(SMALL_FVCN_ARCH)
        save_checkpoint(tmp_path / "ck", net, NormStats(1.0, [0.0], [1.0]))
        mpath = tmp_path / "ck" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["arch"]["kind"] = "mystery"
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(ContractError):
            load_checkpoint(tmp_path / "ck")


def test_norm_stats_from_dataset():
    ds, _ = _synthetic_dataset()
    ns = models.norm_stats_from_dataset(ds)
    assert ns.image_scale == ds.manifest["image_scale"]
