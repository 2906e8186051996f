import numpy as np
import pytest

from scoredm import autodiff as ad
from scoredm.autodiff import Tensor
from scoredm.networks import GaussianDecoder, GaussianEncoder, ScoreNetwork
from scoredm.objectives import LossConfig
from scoredm.priors import BlendedScorePrior, Gaussian, LearnableMixture, MixtureOfGaussians
from scoredm.trainer import (Adam, DomainData, Model, NoiseSchedule, RunTrace, TrainConfig, TrainingDiverged,
                             adam_init, adam_step, alternate_train, cosine_lr, pretrain_score, score_step,
                             stability_run, vae_step)


def toy_data(seed=0, n=40):
    rng = np.random.default_rng(seed)
    return DomainData([rng.standard_normal((n, 3)), rng.standard_normal((n, 3)) + 1.0])


def toy_model(seed=0, prior="score"):
    rng = np.random.default_rng(seed)
    enc = GaussianEncoder(3, 2, [8], 2, rng)
    dec = GaussianDecoder(2, 3, [8], 2, rng)
    if prior == "score":
        p = BlendedScorePrior(ScoreNetwork(2, [8], rng), np.zeros(2), np.ones(2))
    elif prior == "learnable":
        p = LearnableMixture(2, 2, rng)
    else:
        p = Gaussian.standard(2)
    return Model(enc, dec, p)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        state = adam_init([p])
        adam_step([p], [np.array([0.5, -4.0, 1e3])], state, lr=0.1, eps=0.0)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], rtol=1e-12)

    def test_none_gradient_is_zero(self):
        p = Tensor(np.ones(2), requires_grad=True)
        adam_step([p], [None], adam_init([p]), lr=0.1)
        np.testing.assert_array_equal(p.data, np.ones(2))

    def test_nonfinite_gradient(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(FloatingPointError):
            adam_step([p], [np.array([np.nan, 0.0])], adam_init([p]), lr=0.1)

    def test_shape_mismatch(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            adam_step([p], [np.ones(3)], adam_init([p]), lr=0.1)

    def test_reference_implementation(self):
        """Matches a direct transcription of the textbook update over several steps."""
        rng = np.random.default_rng(0)
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        ref = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        state = adam_init([p])
        for t in range(1, 6):
            g = rng.standard_normal(4)
            adam_step([p], [g], state, lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
            m = 0.8 * m + 0.2 * g
            v = 0.99 * v + 0.01 * g * g
            ref = ref - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
        np.testing.assert_allclose(p.data, ref, rtol=1e-13)

    def test_quadratic_bowl(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(2000):
            opt.zero_grad()
            ad.reduce_sum(ad.square(p - np.array([1.0, 2.0]))).backward()
            opt.step()
        np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)

    def test_cosine_lr(self):
        assert cosine_lr(1.0, 0, 100) == 1.0
        assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)
        assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0)


class TestNoiseSchedule:
    def test_levels_geometric(self):
        np.testing.assert_allclose(NoiseSchedule(0.01, 1.0, 3).levels(), [0.01, 0.1, 1.0])

    def test_continuous_within_range(self):
        s = NoiseSchedule(0.01, 1.0).sample(np.random.default_rng(0), 1000, continuous=True)
        assert s.min() >= 0.01 and s.max() <= 1.0
        # log-uniform: median of log sigma is the midpoint
        assert np.median(np.log10(s)) == pytest.approx(-1.0, abs=0.1)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 3), (0.5, 0.1, 3), (0.1, 1.0, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            NoiseSchedule(*args)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"mode": "nope"}, {"vae_lr": 0.0}, {"score_loops": 0}, {"steps": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestAlternating:
    def test_zero_steps(self):
        model = toy_model()
        before = [p.data.copy() for p in model.vae_parameters() + model.score_parameters()]
        trace = alternate_train(toy_data(), model, TrainConfig(steps=0))
        assert len(trace) == 0
        for b, p in zip(before, model.vae_parameters() + model.score_parameters()):
            np.testing.assert_array_equal(b, p.data)

    def test_vae_step_leaves_score_untouched(self):
        model = toy_model()
        cfg = TrainConfig(batch_size=16)
        before = [p.data.copy() for p in model.score_parameters()]
        enc_before = [p.data.copy() for p in model.vae_parameters()]
        vae_step(model, toy_data(), cfg, np.random.default_rng(0), Adam(model.vae_parameters(), 1e-2))
        assert all(np.array_equal(b, p.data) for b, p in zip(before, model.score_parameters()))
        assert any(not np.array_equal(b, p.data) for b, p in zip(enc_before, model.vae_parameters()))

    @pytest.mark.parametrize("mode", ["sfs", "lsgm"])
    def test_score_parameters_frozen_in_vae_phase(self, mode):
        model = toy_model()
        cfg = TrainConfig(batch_size=16, mode=mode)
        before = [p.data.copy() for p in model.score_parameters()]
        vae_step(model, toy_data(), cfg, np.random.default_rng(0), Adam(model.vae_parameters(), 1e-2))
        assert all(p.grad is None for p in model.score_parameters())
        assert all(np.array_equal(b, p.data) for b, p in zip(before, model.score_parameters()))

    def test_score_step_leaves_vae_untouched(self):
        model = toy_model()
        before = [p.data.copy() for p in model.vae_parameters()]
        score_before = [p.data.copy() for p in model.score_parameters()]
        score_step(model, toy_data(), TrainConfig(batch_size=16), np.random.default_rng(0),
                   Adam(model.score_parameters(), 1e-2))
        assert all(np.array_equal(b, p.data) for b, p in zip(before, model.vae_parameters()))
        assert any(not np.array_equal(b, p.data) for b, p in zip(score_before, model.score_parameters()))

    def test_deterministic(self):
        cfg = TrainConfig(steps=5, batch_size=16, score_loops=2, loss=LossConfig(lambda_gw=0.5))
        a = alternate_train(toy_data(), toy_model(), cfg)
        b = alternate_train(toy_data(), toy_model(), cfg)
        assert np.array_equal(np.array(a.rows()), np.array(b.rows()), equal_nan=True)

    def test_trace_columns(self):
        trace = alternate_train(toy_data(), toy_model(), TrainConfig(steps=3, batch_size=8, score_loops=1),
                                nll_prior=Gaussian.standard(2))
        assert len(trace) == 3
        assert np.all(np.isfinite(trace.column("dsm")))
        assert np.all(np.isfinite(trace.column("nll")))
        assert np.all(np.isnan(trace.column("wall_ms")))

    def test_timing_recorded_when_enabled(self):
        trace = alternate_train(toy_data(), toy_model(), TrainConfig(steps=2, batch_size=8, record_timing=True))
        assert np.all(trace.column("wall_ms") > 0)

    def test_learnable_prior_analytic_mode(self):
        model = toy_model(prior="learnable")
        before = model.prior.means.data.copy()
        alternate_train(toy_data(), model, TrainConfig(steps=3, batch_size=8, mode="analytic-vaub"))
        assert not np.array_equal(before, model.prior.means.data)

    def test_mode_prior_mismatch(self):
        with pytest.raises(ValueError):
            alternate_train(toy_data(), toy_model(prior="gaussian"), TrainConfig(steps=1, mode="sfs"))
        with pytest.raises(ValueError):
            alternate_train(toy_data(), toy_model(), TrainConfig(steps=1, mode="analytic-vaub"))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_carries_partial_trace(self):
        model = toy_model()
        cfg = TrainConfig(steps=10, batch_size=8, score_loops=1)

        def explode(step, vals):
            if step == 2:
                model.encoder.nets[0].weights[0].data[...] = 1e300

        with pytest.raises(TrainingDiverged) as info:
            alternate_train(toy_data(), model, cfg, callback=explode)
        assert info.value.step == 3
        assert len(info.value.trace) == 3

    def test_reduces_loss(self):
        model = toy_model()
        cfg = TrainConfig(steps=150, batch_size=40, score_loops=1, vae_lr=5e-3)
        trace = alternate_train(toy_data(), model, cfg)
        assert trace.column("recon")[-10:].mean() < trace.column("recon")[:10].mean()


class TestStability:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        target = MixtureOfGaussians(np.full(2, 0.5), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.full((2, 2), 0.3))
        data = DomainData([target.sample(64, rng)])
        enc = GaussianEncoder(2, 2, [8], 1, np.random.default_rng(seed))
        dec = GaussianDecoder(2, 2, [8], 1, np.random.default_rng(seed + 1))
        return target, data, enc, dec

    def test_sfs_with_exact_score_matches_analytic_vaub(self):
        """Without evaluation noise, SFS against the analytic score follows the VAUB trajectory."""
        target, data, enc, dec = self._setup()
        cfg = TrainConfig(steps=20, batch_size=32, vae_lr=1e-2, sfs_noise=False)
        a = stability_run(data, enc, dec, target, target, "sfs", cfg)
        _, _, enc2, dec2 = self._setup()
        b = stability_run(data, enc2, dec2, target, target, "analytic-vaub", cfg)
        np.testing.assert_allclose(a.column("nll"), b.column("nll"), rtol=1e-8)

    def test_frozen_network(self):
        target, data, enc, dec = self._setup()
        net = ScoreNetwork(2, [8], np.random.default_rng(3))
        before = [p.data.copy() for p in net.parameters()]
        for mode in ("sfs", "lsgm"):
            stability_run(data, enc, dec, target, net, mode, TrainConfig(steps=3, batch_size=16))
        assert all(np.array_equal(b, p.data) for b, p in zip(before, net.parameters()))
        assert all(p.grad is None for p in net.parameters())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_recorded_as_inf(self):
        target, data, enc, dec = self._setup()
        enc.nets[0].weights[0].data[...] = 1e200
        trace = stability_run(data, enc, dec, target, target, "analytic-vaub", TrainConfig(steps=5, batch_size=8))
        assert np.isinf(trace.column("nll")[-1])

    def test_unknown_mode(self):
        target, data, enc, dec = self._setup()
        with pytest.raises(ValueError):
            stability_run(data, enc, dec, target, target, "bogus", TrainConfig(steps=1))


class TestPretrain:
    def test_zero_steps_returns_untouched_network(self):
        net = ScoreNetwork(2, [8], np.random.default_rng(0))
        before = [p.data.copy() for p in net.parameters()]
        out, last = pretrain_score(Gaussian.standard(2), net, NoiseSchedule(), 0, seed=0)
        assert out is net and np.isnan(last)
        assert all(np.array_equal(b, p.data) for b, p in zip(before, net.parameters()))

    def test_learns_gaussian_score(self):
        prior = Gaussian(np.array([1.0, -1.0]), np.array([0.5, 0.5]))
        net = ScoreNetwork(2, [32, 32], np.random.default_rng(0))
        sched = NoiseSchedule(0.1, 1.0, 5)
        pretrain_score(prior, net, sched, 800, seed=0, batch_size=512)
        z = prior.sample(200, np.random.default_rng(1))
        for s in (0.3, 1.0):
            err = np.linalg.norm(net.score_numpy(z, s) - prior.perturbed(s).score(z), axis=1)
            ref = np.linalg.norm(prior.perturbed(s).score(z), axis=1)
            assert err.mean() / ref.mean() < 0.25

    def test_mog_score_points_to_nearest_mode(self):
        means = np.array([[-2.0, 0.0], [2.0, 0.0]])
        prior = MixtureOfGaussians(np.full(2, 0.5), means, np.full((2, 2), 0.1))
        net = ScoreNetwork(2, [32, 32], np.random.default_rng(0))
        pretrain_score(prior, net, NoiseSchedule(0.1, 1.0, 5), 800, seed=0, batch_size=512)
        probes = np.array([[-2.6, 0.0], [-1.4, 0.0], [1.4, 0.0], [2.6, 0.0]])
        s = net.score_numpy(probes, 0.1)
        np.testing.assert_array_equal(np.sign(s[:, 0]), [1, -1, 1, -1])

    def test_array_sampler(self):
        net = ScoreNetwork(2, [8], np.random.default_rng(0))
        _, last = pretrain_score(np.random.default_rng(0).standard_normal((50, 2)), net,
                                 NoiseSchedule(), 5, seed=0, batch_size=16)
        assert np.isfinite(last)


def test_run_trace_fills_missing_columns():
    t = RunTrace()
    t.append(step=0, recon=1.0)
    assert np.isnan(t.column("dsm")[0])
    assert t.rows()[0][:2] == [0, 1.0]
