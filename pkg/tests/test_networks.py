import numpy as np
import pytest

from scoredm import autodiff as ad
from scoredm.autodiff import Tensor
from scoredm.networks import (BatchNormState, GaussianDecoder, GaussianEncoder, MlpSpec, ScoreNetwork,
                              batchnorm_no_affine, load_checkpoint, named_parameters, restore_parameters,
                              save_checkpoint)


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestMlpSpec:
    def test_needs_two_layers(self):
        with pytest.raises(ValueError):
            MlpSpec([3])

    def test_positive_widths(self):
        with pytest.raises(ValueError):
            MlpSpec([3, 0, 2])

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            MlpSpec([3, 2], activation="gelu")


class TestEncoder:
    def test_zero_weights_give_zero_outputs(self, rng):
        enc = GaussianEncoder(3, 2, [8], 2, rng)
        zero_params(enc)
        mu, logvar = enc.encode(rng.standard_normal((5, 3)), 1)
        assert not np.any(mu.data) and not np.any(logvar.data)

    def test_output_width(self, rng):
        enc = GaussianEncoder(3, 4, [8], 1, rng)
        assert enc.nets[0].weights[-1].shape[1] == 8
        mu, logvar = enc.encode(np.ones((2, 3)), 0)
        assert mu.shape == logvar.shape == (2, 4)

    def test_unknown_domain(self, rng):
        enc = GaussianEncoder(3, 2, [8], 2, rng)
        with pytest.raises(IndexError):
            enc.encode(np.ones((2, 3)), 2)

    def test_logvar_clamped(self, rng):
        enc = GaussianEncoder(1, 1, [4], 1, rng, init_scale=50.0)
        _, logvar = enc.encode(np.array([[100.0], [-100.0]]), 0)
        assert np.all(logvar.data <= 10.0) and np.all(logvar.data >= -10.0)

    def test_batchnorm_centres_mu(self, rng):
        enc = GaussianEncoder(3, 2, [8], 1, rng, batchnorm=True)
        mu, _ = enc.encode(rng.standard_normal((16, 3)) * 4 + 2, 0, mode="train")
        np.testing.assert_allclose(mu.data.mean(axis=0), 0.0, atol=1e-9)

    def test_batchnorm_train_needs_two_rows(self, rng):
        enc = GaussianEncoder(3, 2, [8], 1, rng, batchnorm=True)
        with pytest.raises(ValueError):
            enc.encode(np.ones((1, 3)), 0, mode="train")

    def test_gradient_of_mean_mu_matches_fd(self, rng):
        enc = GaussianEncoder(3, 2, [5], 1, rng, activation="tanh")
        x = rng.standard_normal((4, 3))
        w = enc.nets[0].weights[0]
        ad.reduce_mean(enc.encode(x, 0)[0]).backward()

        def f(v):
            old = w.data.copy()
            w.data[...] = v
            with ad.no_grad():
                out = float(np.mean(enc.encode(x, 0)[0].data))
            w.data[...] = old
            return out

        fd = ad.finite_difference_gradient(f, w.data.copy())
        np.testing.assert_allclose(w.grad, fd, rtol=1e-6, atol=1e-10)

    def test_deterministic_given_inputs(self, rng):
        enc = GaussianEncoder(3, 2, [8], 1, rng)
        x = np.ones((2, 3))
        assert enc.encode(x, 0)[0].data.tobytes() == enc.encode(x, 0)[0].data.tobytes()


class TestDecoder:
    def test_zero_weights(self, rng):
        dec = GaussianDecoder(2, 3, [8], 2, rng)
        zero_params(dec)
        assert not np.any(dec.decode(rng.standard_normal((4, 2)), 0).data)

    @pytest.mark.parametrize("batch", [1, 3, 17])
    def test_output_shape(self, rng, batch):
        dec = GaussianDecoder(2, 5, [8], 1, rng)
        assert dec.decode(rng.standard_normal((batch, 2)), 0).shape == (batch, 5)

    def test_obs_var_positive(self, rng):
        with pytest.raises(ValueError):
            GaussianDecoder(2, 3, [8], 1, rng, obs_var=0.0)

    def test_unknown_domain(self, rng):
        with pytest.raises(IndexError):
            GaussianDecoder(2, 3, [8], 1, rng).decode(np.zeros((1, 2)), 1)

    def test_overfit_single_point(self, rng):
        from scoredm.trainer import Adam

        enc = GaussianEncoder(2, 2, [16], 1, rng)
        dec = GaussianDecoder(2, 2, [16], 1, rng)
        x = np.array([[0.7, -1.3]])
        opt = Adam(enc.parameters() + dec.parameters(), 1e-2)
        for _ in range(600):
            opt.zero_grad()
            mu, _ = enc.encode(x, 0)
            ad.reduce_sum(ad.square(dec.decode(mu, 0) - x)).backward()
            opt.step()
        with ad.no_grad():
            rec = dec.decode(enc.encode(x, 0)[0], 0).data
        np.testing.assert_allclose(rec, x, atol=1e-2)


class TestScoreNetwork:
    def test_zero_weights_zero_score(self, rng):
        net = ScoreNetwork(2, [8], rng)
        net.zero_()
        assert not np.any(net.score(rng.standard_normal((3, 2)), 0.1).data)

    @pytest.mark.parametrize("sigma", [0.01, 0.5, 1.0])
    def test_shape_preserved(self, rng, sigma):
        net = ScoreNetwork(3, [8], rng)
        assert net.score(np.ones((4, 3)), sigma).shape == (4, 3)

    def test_per_sample_sigma(self, rng):
        net = ScoreNetwork(2, [8], rng)
        z = rng.standard_normal((3, 2))
        sig = np.array([0.1, 0.2, 0.3])
        out = net.score_numpy(z, sig)
        for i in range(3):
            np.testing.assert_allclose(out[i], net.score_numpy(z[i:i + 1], sig[i])[0])

    def test_differentiable_in_z(self, rng):
        net = ScoreNetwork(2, [8], rng, activation="tanh")
        z = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        ad.reduce_sum(net.score(z, 0.2)).backward()
        fd = ad.finite_difference_gradient(lambda v: float(np.sum(net.score_numpy(v, 0.2))), z.data.copy())
        np.testing.assert_allclose(z.grad, fd, rtol=1e-6, atol=1e-10)

    def test_continuous_in_sigma(self, rng):
        net = ScoreNetwork(2, [8], rng)
        z = rng.standard_normal((5, 2))
        diff = np.abs(net.score_numpy(z, 0.3) - net.score_numpy(z, 0.3 + 1e-7))
        assert diff.max() < 1e-5

    def test_sigma_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            ScoreNetwork(2, [8], rng).score(np.zeros((1, 2)), 0.0)


class TestBatchNorm:
    def test_constant_column(self):
        st = BatchNormState(np.zeros(2), np.ones(2))
        out = batchnorm_no_affine(np.array([[1.0, 3.0], [1.0, 5.0], [1.0, 7.0]]), "train", st)
        np.testing.assert_array_equal(out.data[:, 0], 0.0)

    def test_standardized_column_unchanged(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0])[:, None]
        st = BatchNormState(np.zeros(1), np.ones(1))
        out = batchnorm_no_affine(x, "train", st)
        np.testing.assert_allclose(out.data, x, atol=1e-5)

    def test_running_stats_update(self):
        x = np.array([[0.0], [2.0]])
        st = BatchNormState(np.zeros(1), np.ones(1))
        batchnorm_no_affine(x, "train", st)
        np.testing.assert_allclose(st.running_mean, [0.1])
        np.testing.assert_allclose(st.running_var, [0.9 + 0.1 * 2.0])  # unbiased batch variance = 2

    def test_eval_uses_running_stats(self):
        st = BatchNormState(np.array([1.0]), np.array([4.0]))
        out = batchnorm_no_affine(np.array([[5.0]]), "eval", st)
        assert out.item() == pytest.approx(4.0 / np.sqrt(4.0 + 1e-5))

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            batchnorm_no_affine(np.ones((1, 2)), "train", BatchNormState(np.zeros(2), np.ones(2)))

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 3))
        t = Tensor(x, requires_grad=True)
        ad.reduce_sum(batchnorm_no_affine(t, "train", BatchNormState(np.zeros(3), np.ones(3))) * w).backward()

        def f(v):
            with ad.no_grad():
                return float(np.sum(batchnorm_no_affine(v, "train", BatchNormState(np.zeros(3), np.ones(3))).data * w))

        np.testing.assert_allclose(t.grad, ad.finite_difference_gradient(f, x), rtol=1e-5, atol=1e-8)


class TestCheckpoint:
    def test_round_trip_exact(self, rng, tmp_path):
        enc = GaussianEncoder(3, 2, [4], 2, rng)
        net = ScoreNetwork(2, [4], rng)
        params = named_parameters(encoder=enc, score=net)
        save_checkpoint(tmp_path / "c.txt", params, {"bn0.mean": np.array([0.1, 1 / 3])})
        state = load_checkpoint(tmp_path / "c.txt")
        for k, p in params.items():
            assert state[k].tobytes() == p.data.tobytes()
        assert state["buffer:bn0.mean"][1] == 1 / 3

    def test_restore(self, rng, tmp_path):
        a = GaussianEncoder(3, 2, [4], 1, np.random.default_rng(1))
        b = GaussianEncoder(3, 2, [4], 1, np.random.default_rng(2))
        save_checkpoint(tmp_path / "c.txt", named_parameters(encoder=a))
        restore_parameters(named_parameters(encoder=b), load_checkpoint(tmp_path / "c.txt"))
        x = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(a.encode(x, 0)[0].data, b.encode(x, 0)[0].data)

    def test_bad_header(self, tmp_path):
        (tmp_path / "c.txt").write_text("not a checkpoint\n")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.txt")

    def test_version_mismatch(self, tmp_path):
        (tmp_path / "c.txt").write_text("scoredm-checkpoint 99\n")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.txt")

    def test_missing_parameter(self, rng, tmp_path):
        enc = GaussianEncoder(3, 2, [4], 1, rng)
        save_checkpoint(tmp_path / "c.txt", named_parameters(encoder=enc))
        with pytest.raises(KeyError):
            restore_parameters(named_parameters(decoder=GaussianDecoder(2, 3, [4], 1, rng)),
                               load_checkpoint(tmp_path / "c.txt"))


def test_parameter_partition_disjoint(rng):
    enc = GaussianEncoder(3, 2, [4], 2, rng)
    dec = GaussianDecoder(2, 3, [4], 2, rng)
    net = ScoreNetwork(2, [4], rng)
    ids = [set(map(id, m.parameters())) for m in (enc, dec, net)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    names = named_parameters(encoder=enc, decoder=dec, score=net)
    assert len(names) == sum(len(s) for s in ids)
