"""Schedule, DDIM stepping, refinement, and full-trajectory tests."""

import logging

import numpy as np
import pytest

from eitlab import sampler as S
from eitlab.errors import ContractError
from eitlab.fem import KIND_ABSOLUTE, KIND_DIFFERENCE, MeasurementFrame
from eitlab.models import Fvcn, NormStats, ScoreNet
from eitlab.phantoms import PixelImage, disk_mask

TINY_SCORE_ARCH = {
    "grid": 8,
    "base_channels": 8,
    "channel_mult": [1, 2],
    "blocks_per_level": 1,
    "time_dim": 8,
    "time_hidden": 16,
    "groups": 4,
}
TINY_FVCN_ARCH = {"grid": 8, "channels": [4, 8], "hidden": 16, "n_out": 6}


@pytest.fixture(scope="module")
def sched():
    return S.cosine_schedule(1000)


@pytest.fixture(scope="module")
def tiny_models():
    scorenet = ScoreNet(TINY_SCORE_ARCH, rng=np.random.default_rng(0))
    fvcn = Fvcn(TINY_FVCN_ARCH, rng=np.random.default_rng(1))
    norm = NormStats(0.6, np.zeros(6), np.ones(6))
    return scorenet, fvcn, norm


def _cond_and_frame(seed=4):
    rng = np.random.default_rng(seed)
    mask = disk_mask(8)
    vals = np.where(mask, 0.1 * rng.standard_normal((8, 8)), 0.0)
    cond = PixelImage(vals, mask)
    frame = MeasurementFrame(rng.standard_normal(6), kind=KIND_DIFFERENCE)
    return cond, frame


class TestSchedule:
    def test_endpoints_and_monotonicity(self, sched):
        ab = sched.alpha_bar
        assert ab[0] == 1.0
        assert ab[1] > 0.999
        assert ab[sched.T] < 0.01
        assert np.all(np.diff(ab) < 0)

    def test_beta_and_eta_ranges(self, sched):
        assert np.all(sched.beta[1:] > 0) and np.all(sched.beta[1:] < 1)
        assert sched.eta[1] == 0.0  # alpha_bar[0] = 1 kills the ratio
        assert np.all(sched.eta[2:] > 0)
        assert np.all(sched.eta[1:] <= sched.beta[1:])

    def test_short_schedule_rejected(self):
        with pytest.raises(ContractError):
            S.cosine_schedule(9)
        assert S.cosine_schedule(10).T == 10

    def test_invalid_arrays_rejected(self):
        ab = np.array([1.0, 0.5, 0.25])
        with pytest.raises(ContractError):
            S.NoiseSchedule(beta=np.array([0.0, 0.5, 1.5]),
                            alpha=np.array([1.0, 0.5, -0.5]),
                            alpha_bar=ab, eta=np.zeros(3))
        with pytest.raises(ContractError):
            S.NoiseSchedule(beta=np.array([0.0, 0.5, 0.5]),
                            alpha=np.array([1.0, 0.5, 0.5]),
                            alpha_bar=np.array([1.0, 0.5, 0.5]),
                            eta=np.zeros(3))


class TestForwardSample:
    def test_t0_identity(self, sched):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 4))
        eps = rng.standard_normal((4, 4))
        assert np.array_equal(S.forward_sample(x, 0, eps, sched), x)

    def test_formula(self, sched):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 4))
        eps = rng.standard_normal((4, 4))
        t = 321
        ab = sched.alpha_bar[t]
        want = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps
        assert np.array_equal(S.forward_sample(x, t, eps, sched), want)

    def test_t_validation(self, sched):
        x = np.zeros((2, 2))
        with pytest.raises(ContractError):
            S.forward_sample(x, -1, x, sched)
        with pytest.raises(ContractError):
            S.forward_sample(x, sched.T + 1, x, sched)


class TestPosteriorMean:
    def test_exact_score_inversion(self, sched):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((6, 6))
        eps = rng.standard_normal((6, 6))
        t = 700
        xt = S.forward_sample(x0, t, eps, sched)
        score = -eps / np.sqrt(1.0 - sched.alpha_bar[t])
        rec = S.posterior_mean_estimate(xt, score, t, sched)
        assert np.abs(rec - x0).max() < 1e-10

    def test_t_zero_rejected(self, sched):
        x = np.zeros((2, 2))
        with pytest.raises(ContractError):
            S.posterior_mean_estimate(x, x, 0, sched)


class TestDdimTimesteps:
    def test_endpoints_descending(self):
        ts = S.ddim_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert len(ts) == 50

    def test_full_chain(self):
        assert S.ddim_timesteps(10, 10) == list(range(10, 0, -1))

    def test_too_many_rejected(self):
        with pytest.raises(ContractError):
            S.ddim_timesteps(20, 21)


class TestDdimStep:
    def test_giant_step_recovers_clean(self, sched):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((1, 1, 4, 4))
        eps = rng.standard_normal((1, 1, 4, 4))
        T = sched.T
        xt = S.forward_sample(x0, T, eps, sched)
        score = -eps / np.sqrt(1.0 - sched.alpha_bar[T])
        s0 = S.posterior_mean_estimate(xt, score, T, sched)
        opts = S.SamplerOpts(eta_mode="deterministic")
        out = S.ddim_step(xt, s0, score, T, 0, sched, opts, rng)
        assert np.abs(out - x0).max() < 1e-8

    def test_t_prev_ordering_enforced(self, sched):
        x = np.zeros((1, 1, 2, 2))
        opts = S.SamplerOpts()
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            S.ddim_step(x, x, x, 10, 10, sched, opts, rng)
        with pytest.raises(ContractError):
            S.ddim_step(x, x, x, 10, -1, sched, opts, rng)

    def test_deterministic_mode_consumes_no_rng(self, sched):
        rng = np.random.default_rng(5)
        before = rng.bit_generator.state
        x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
        opts = S.SamplerOpts(eta_mode="deterministic")
        S.ddim_step(x, x, x, 500, 400, sched, opts, rng)
        assert rng.bit_generator.state == before

    def test_paper_mode_consumes_rng(self, sched):
        rng = np.random.default_rng(5)
        before = rng.bit_generator.state
        x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
        S.ddim_step(x, x, x, 500, 400, sched, S.SamplerOpts(), rng)
        assert rng.bit_generator.state != before

    def test_variance_clip_warns(self, sched, caplog):
        # eta is the full-schedule posterior variance; at a late->final jump
        # it can exceed the remaining noise budget 1 - alpha_bar[t_prev]
        x = np.zeros((1, 1, 2, 2))
        rng = np.random.default_rng(0)
        assert sched.eta[21] > 1.0 - sched.alpha_bar[1]
        with caplog.at_level(logging.WARNING, logger="eitlab.sampler"):
            S.ddim_step(x, x, x, 21, 1, sched, S.SamplerOpts(), rng)
        assert any("clipping" in r.message for r in caplog.records)


class TestVcRefine:
    def test_zero_iters_identity(self, tiny_models):
        _, fvcn, _ = tiny_models
        x = np.ones((1, 1, 8, 8), dtype=np.float32)
        res = S.vc_refine(x, np.zeros(6), fvcn, iters=0)
        assert res.image is x
        assert res.fvcn_evals == 0
        assert np.isnan(res.loss_before) and np.isnan(res.loss_after)

    def test_never_increases_loss(self, tiny_models):
        _, fvcn, _ = tiny_models
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        v = rng.standard_normal(6)
        res = S.vc_refine(x, v, fvcn, iters=8, lr=1e-2)
        assert res.loss_after <= res.loss_before
        assert res.fvcn_evals == 8

    def test_exact_match_is_fixed_point(self, tiny_models):
        _, fvcn, _ = tiny_models
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        v = fvcn.forward(x).astype(np.float64)[0]
        res = S.vc_refine(x, v, fvcn, iters=4)
        assert res.loss_before == 0.0
        assert res.loss_after == 0.0
        assert np.array_equal(res.image, x)

    def test_nonfinite_loss_returns_input(self, tiny_models, caplog):
        # a NaN image would be silenced by the ReLUs; poison the target
        _, fvcn, _ = tiny_models
        x = np.zeros((1, 1, 8, 8), dtype=np.float32)
        with caplog.at_level(logging.WARNING, logger="eitlab.sampler"):
            res = S.vc_refine(x, np.full(6, np.nan), fvcn, iters=5)
        assert res.image is x
        assert res.fvcn_evals == 1
        assert any("non-finite" in r.message for r in caplog.records)


class TestSamplerOpts:
    @pytest.mark.parametrize(
        "kw",
        [
            {"eta_mode": "bogus"},
            {"vc_mode": "sometimes"},
            {"vc_assign": "replace"},
            {"vc_interval": 0},
            {"ddim_steps": 0},
            {"x0_clip": 0.0},
            {"x0_clip": -1.0},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ContractError):
            S.SamplerOpts(**kw)

    def test_none_clip_allowed(self):
        assert S.SamplerOpts(x0_clip=None).x0_clip is None


class TestSample:
    def test_deterministic_repeatability(self, sched, tiny_models):
        scorenet, fvcn, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=10, eta_mode="deterministic",
                             vc_mode="off", seed=3)
        a = S.sample(cond, frame, scorenet, None, sched, opts, norm,
                     np.random.default_rng(3))
        b = S.sample(cond, frame, scorenet, None, sched, opts, norm,
                     np.random.default_rng(3))
        assert np.array_equal(a.image.values, b.image.values)
        assert a.score_evals == 10
        assert a.fvcn_evals == 0
        assert len(a.steps) == 10

    def test_paper_mode_repeatability(self, sched, tiny_models):
        scorenet, _, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=8, vc_mode="off", seed=5)
        a = S.sample(cond, frame, scorenet, None, sched, opts, norm,
                     np.random.default_rng(5))
        b = S.sample(cond, frame, scorenet, None, sched, opts, norm,
                     np.random.default_rng(5))
        assert np.array_equal(a.image.values, b.image.values)

    def test_during_without_trigger_equals_off(self, sched, tiny_models):
        scorenet, fvcn, norm = tiny_models
        cond, frame = _cond_and_frame()
        ts = S.ddim_timesteps(sched.T, 3)
        assert all(t % 7 != 0 for t in ts)  # no trigger fires
        base = S.SamplerOpts(ddim_steps=3, eta_mode="deterministic",
                             vc_mode="off", seed=0)
        during = S.SamplerOpts(ddim_steps=3, eta_mode="deterministic",
                               vc_mode="during", vc_interval=7, seed=0)
        a = S.sample(cond, frame, scorenet, None, sched, base, norm,
                     np.random.default_rng(0))
        b = S.sample(cond, frame, scorenet, fvcn, sched, during, norm,
                     np.random.default_rng(0))
        assert np.array_equal(a.image.values, b.image.values)
        assert b.fvcn_evals == 0

    def test_during_trigger_costs(self, sched, tiny_models):
        scorenet, fvcn, norm = tiny_models
        cond, frame = _cond_and_frame()
        ts = S.ddim_timesteps(sched.T, 50)
        n_trig = sum(1 for t in ts if t % 10 == 0)
        assert n_trig > 0
        opts = S.SamplerOpts(ddim_steps=50, vc_mode="during", vc_interval=10,
                             vc_iters=3, seed=1)
        out = S.sample(cond, frame, scorenet, fvcn, sched, opts, norm,
                       np.random.default_rng(1))
        assert out.fvcn_evals == n_trig * 3
        assert out.score_evals == 50
        logged = [r for r in out.steps if r["vc_loss_before"] != ""]
        assert len(logged) == n_trig

    def test_after_appends_one_row(self, sched, tiny_models):
        scorenet, fvcn, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=6, vc_mode="after", vc_iters=4, seed=2)
        out = S.sample(cond, frame, scorenet, fvcn, sched, opts, norm,
                       np.random.default_rng(2))
        assert len(out.steps) == 7
        last = out.steps[-1]
        assert last["t"] == 0
        assert last["vc_loss_after"] <= last["vc_loss_before"]
        assert out.fvcn_evals == 4

    def test_clip_bounds_output(self, sched, tiny_models):
        scorenet, _, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=10, eta_mode="deterministic",
                             vc_mode="off", x0_clip=0.5, seed=0)
        out = S.sample(cond, frame, scorenet, None, sched, opts, norm,
                       np.random.default_rng(0))
        # final state is the clipped clean estimate, then denormalized
        assert np.abs(out.image.values).max() <= 0.5 * norm.image_scale + 1e-12

    def test_unclipped_runs(self, sched, tiny_models):
        scorenet, _, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=5, eta_mode="deterministic",
                             vc_mode="off", x0_clip=None, seed=0)
        out = S.sample(cond, frame, scorenet, None, sched, opts, norm,
                       np.random.default_rng(0))
        assert np.all(np.isfinite(out.image.values))

    def test_output_masked_and_shaped(self, sched, tiny_models):
        scorenet, fvcn, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=4, vc_mode="during", vc_interval=10,
                             seed=6)
        out = S.sample(cond, frame, scorenet, fvcn, sched, opts, norm,
                       np.random.default_rng(6))
        img = out.image
        assert img.values.shape == (8, 8)
        assert np.all(img.values[~img.mask] == 0.0)

    def test_absolute_frame_rejected(self, sched, tiny_models):
        scorenet, _, norm = tiny_models
        cond, _ = _cond_and_frame()
        frame = MeasurementFrame(np.ones(6), kind=KIND_ABSOLUTE)
        with pytest.raises(ContractError):
            S.sample(cond, frame, scorenet, None, sched, S.SamplerOpts(),
                     norm, np.random.default_rng(0))

    def test_vc_requires_fvcn(self, sched, tiny_models):
        scorenet, _, norm = tiny_models
        cond, frame = _cond_and_frame()
        for mode in ("during", "after"):
            with pytest.raises(ContractError):
                S.sample(cond, frame, scorenet, None, sched,
                         S.SamplerOpts(vc_mode=mode), norm,
                         np.random.default_rng(0))

    def test_condition_shape_enforced(self, sched, tiny_models):
        scorenet, _, norm = tiny_models
        _, frame = _cond_and_frame()
        bad = PixelImage(np.zeros((16, 16)), disk_mask(16))
        with pytest.raises(ContractError):
            S.sample(bad, frame, scorenet, None, sched, S.SamplerOpts(),
                     norm, np.random.default_rng(0))

    def test_csv_roundtrip(self, sched, tiny_models, tmp_path):
        scorenet, fvcn, norm = tiny_models
        cond, frame = _cond_and_frame()
        opts = S.SamplerOpts(ddim_steps=6, vc_mode="after", seed=0)
        out = S.sample(cond, frame, scorenet, fvcn, sched, opts, norm,
                       np.random.default_rng(0))
        path = tmp_path / "steps.csv"
        out.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,t,vc_loss_before,vc_loss_after"
        assert len(lines) == len(out.steps) + 1
