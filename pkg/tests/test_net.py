import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uqloc import mdn, net
from uqloc.dataset import NormalizationState


def numeric_gradient(params, cfg, x, y, masks, h=1e-4):
    grads = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = mdn.nll_and_grad(net.forward(params, cfg, x, "train", masks=masks), y)[0]
            arr[idx] = old - h
            down = mdn.nll_and_grad(net.forward(params, cfg, x, "train", masks=masks), y)[0]
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_small_net(seed, n_mixtures=3, dropout=0.0):
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in rng.integers(2, 9, size=rng.integers(1, 4)))
    cfg = net.MlpConfig(
        input_dim=int(rng.integers(2, 7)), hidden_widths=widths, n_mixtures=n_mixtures,
        dropout_rate=dropout, dropout_layers=tuple(range(1, len(widths) + 1)) if dropout else (),
        init_std=0.5, seed=seed,
    )
    params = net.init_params(cfg)
    for b in params.biases:
        b += rng.normal(0, 0.1, size=b.shape)
    x = rng.normal(0, 1, size=(5, cfg.input_dim))
    y = rng.uniform(0, 1, size=(5, 2))
    return cfg, params, x, y, rng


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    cfg, params, x, y, rng = random_small_net(seed, dropout=0.2 if seed % 2 else 0.0)
    masks = net.dropout_masks(cfg, len(x), rng)
    _, grads = net.backward(params, cfg, x, y, mdn.nll_and_grad, masks=masks)
    numeric = numeric_gradient(params, cfg, x, y, masks)
    assert max_relative_error(grads.arrays(), numeric) < 1e-4


def test_duplicated_batch_gives_same_gradient():
    cfg, params, x, y, _ = random_small_net(3)
    _, g1 = net.backward(params, cfg, x, y, mdn.nll_and_grad, mode="eval")
    _, g2 = net.backward(params, cfg, np.vstack([x, x]), np.vstack([y, y]), mdn.nll_and_grad,
                         mode="eval")
    for a, b in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_mean_gradient_zero_at_stationary_point():
    # K=1 head whose means sit exactly on the target: only the output bias feeds the means
    cfg = net.MlpConfig(input_dim=3, hidden_widths=(4,), n_mixtures=1, init_std=0.3, seed=1)
    params = net.init_params(cfg)
    params.weights[-1][:, 1:3] = 0.0
    params.biases[-1][1:3] = [0.25, 0.75]
    x = np.random.default_rng(0).normal(size=(6, 3))
    y = np.tile([0.25, 0.75], (6, 1))
    _, grads = net.backward(params, cfg, x, y, mdn.nll_and_grad, mode="eval")
    np.testing.assert_array_equal(grads.biases[-1][1:3], 0.0)
    np.testing.assert_array_equal(grads.weights[-1][:, 1:3], 0.0)


def test_non_finite_loss_is_reported():
    cfg = net.MlpConfig(input_dim=2, hidden_widths=(3,), n_mixtures=1)
    params = net.init_params(cfg)

    def bad_loss(raw, y):
        return float("nan"), np.zeros_like(raw)

    with pytest.raises(net.TrainingError):
        net.backward(params, cfg, np.ones((2, 2)), np.ones((2, 2)), bad_loss, mode="eval")


class TestInit:
    def test_deterministic(self):
        cfg = net.MlpConfig(input_dim=8, hidden_widths=(6, 4), seed=5)
        a, b = net.init_params(cfg), net.init_params(cfg)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_weight_variance_and_zero_biases(self):
        params = net.init_params(net.MlpConfig(input_dim=512, hidden_widths=(256, 8)))
        assert 0.008 <= params.weights[0].var() <= 0.012
        assert all(np.all(b == 0) for b in params.biases)

    def test_shapes_chain(self):
        cfg = net.MlpConfig(input_dim=256)
        params = net.init_params(cfg)
        assert [w.shape for w in params.weights] == [(256, 512), (512, 256), (256, 128),
                                                      (128, 64), (64, 15)]


class TestForward:
    def test_no_dropout_train_equals_eval(self):
        cfg, params, x, _, rng = random_small_net(4)
        np.testing.assert_array_equal(net.forward(params, cfg, x, "train", rng),
                                      net.forward(params, cfg, x, "eval"))

    def test_zero_everything(self):
        cfg = net.MlpConfig(input_dim=3, hidden_widths=(4, 4))
        params = net.init_params(cfg)
        for w in params.weights:
            w[:] = 0
        np.testing.assert_array_equal(net.forward(params, cfg, np.zeros((2, 3))), 0.0)

    def test_mc_dropout_reproducible(self):
        cfg, params, x, _, _ = random_small_net(5, dropout=0.3)
        a = net.forward(params, cfg, x, "mc_dropout", np.random.default_rng(11))
        b = net.forward(params, cfg, x, "mc_dropout", np.random.default_rng(11))
        c = net.forward(params, cfg, x, "mc_dropout", np.random.default_rng(12))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_shape_mismatch(self):
        cfg = net.MlpConfig(input_dim=3, hidden_widths=(4,))
        with pytest.raises(ValueError):
            net.forward(net.init_params(cfg), cfg, np.zeros((2, 4)))

    def test_dropout_expectation_matches_eval(self):
        # dropout only after the last hidden layer, so the output is linear in the mask
        cfg = net.MlpConfig(input_dim=4, hidden_widths=(8, 8), n_mixtures=1, dropout_rate=0.1,
                            dropout_layers=(2,), init_std=0.5, seed=2)
        params = net.init_params(cfg)
        params.biases[-1][:] = 3.0
        x = np.random.default_rng(0).normal(size=(1, 4))
        reps = np.repeat(x, 20_000, axis=0)
        mc = net.forward(params, cfg, reps, "mc_dropout", np.random.default_rng(1)).mean(axis=0)
        ev = net.forward(params, cfg, x, "eval")[0]
        np.testing.assert_allclose(mc, ev, rtol=0.02)

    def test_mask_values(self):
        cfg = net.MlpConfig(input_dim=2, hidden_widths=(50, 50), dropout_rate=0.2,
                            dropout_layers=(1,))
        masks = net.dropout_masks(cfg, 100, np.random.default_rng(0))
        assert set(masks) == {1}
        assert set(np.unique(masks[1])) == {0.0, 1.25}


class TestClipAndAdam:
    def grads(self, *values):
        return net.ModelParams([np.array([list(values)])], [np.zeros(len(values))])

    def test_clip_examples(self):
        assert net.clip_gradients(self.grads(0.5, -2.0), 1.0).weights[0].tolist() == [[0.5, -1.0]]
        assert net.clip_gradients(self.grads(0.1, -0.2), 1.0).weights[0].tolist() == [[0.1, -0.2]]
        assert net.clip_gradients(self.grads(1.0), 1.0).weights[0].tolist() == [[1.0]]

    def test_clip_rejects_non_positive(self):
        with pytest.raises(ValueError):
            net.clip_gradients(self.grads(1.0), 0.0)

    @given(st.lists(st.floats(-1e6, 1e6).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=6))
    def test_first_step_moves_by_learning_rate(self, values):
        params = net.ModelParams([np.zeros((1, len(values)))], [np.zeros(len(values))])
        state = net.AdamState.zeros_like(params)
        cfg = net.TrainConfig(learning_rate=1e-3)
        net.adam_step(params, self.grads(*values), state, cfg)
        np.testing.assert_allclose(params.weights[0][0], -1e-3 * np.sign(values), rtol=1e-4)

    def test_zero_gradient_leaves_params(self):
        params = net.ModelParams([np.ones((1, 3))], [np.ones(3)])
        state = net.AdamState.zeros_like(params)
        net.adam_step(params, self.grads(0.0, 0.0, 0.0), state, net.TrainConfig())
        np.testing.assert_array_equal(params.weights[0], 1.0)

    def test_matches_textbook_adam(self):
        rng = np.random.default_rng(0)
        cfg = net.TrainConfig(learning_rate=1e-2)
        p = net.ModelParams([np.zeros((1, 4))], [np.zeros(4)])
        state = net.AdamState.zeros_like(p)
        ref, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
        for t in range(1, 30):
            g = rng.normal(size=4)
            net.adam_step(p, self.grads(*g), state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.weights[0][0], ref, rtol=1e-10, atol=1e-14)


def toy_problem(n=20, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 1, size=(n, 2))
    x = np.hstack([y, y**2, np.sin(3 * y)])
    return x, y


class TestTrain:
    cfg = net.MlpConfig(input_dim=6, hidden_widths=(16, 8), n_mixtures=2, seed=1)

    def test_loss_decreases(self):
        x, y = toy_problem()
        tcfg = net.TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=60, patience=60)
        result = net.train(self.cfg, tcfg, (x, y), (x, y))
        hist = result.history
        assert hist[-1]["train_loss"] < hist[0]["train_loss"]

    def test_patience_zero_stops_at_first_non_improvement(self):
        x, y = toy_problem()
        xv, yv = toy_problem(seed=9)
        tcfg = net.TrainConfig(learning_rate=5e-2, batch_size=4, max_epochs=200, patience=0)
        hist = net.train(self.cfg, tcfg, (x, y), (xv, yv)).history
        vals = [h["val_loss"] for h in hist]
        assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))
        assert len(hist) == 200 or vals[-1] >= min(vals[:-1])

    def test_returns_best_validation_params(self):
        x, y = toy_problem()
        xv, yv = toy_problem(seed=9)
        tcfg = net.TrainConfig(learning_rate=5e-2, batch_size=4, max_epochs=40, patience=10)
        result = net.train(self.cfg, tcfg, (x, y), (xv, yv))
        best = min(h["val_loss"] for h in result.history)
        got = net.evaluate_loss(result.params, self.cfg, xv, yv, mdn.nll_and_grad)
        assert got == pytest.approx(best, rel=1e-12)
        assert result.history[result.best_epoch - 1]["val_loss"] == best

    def test_identical_seeds_identical_history(self):
        x, y = toy_problem()
        cfg = net.MlpConfig(input_dim=6, hidden_widths=(16, 8), n_mixtures=2, dropout_rate=0.1,
                            dropout_layers=(1,), seed=1)
        tcfg = net.TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=10, patience=10,
                               clip_value=1.0, seed=4)
        a = net.train(cfg, tcfg, (x, y), (x, y))
        b = net.train(cfg, tcfg, (x, y), (x, y))
        assert a.history == b.history
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    def test_rejects_empty(self):
        x, y = toy_problem()
        with pytest.raises(ValueError):
            net.train(self.cfg, net.TrainConfig(max_epochs=1, patience=1), (x[:0], y[:0]), (x, y))

    def test_divergence_names_epoch(self):
        x, y = toy_problem()

        def exploding(raw, t):
            return float("inf"), np.zeros_like(raw)

        with pytest.raises(net.TrainingError, match="epoch 1, batch 0"):
            net.train(self.cfg, net.TrainConfig(max_epochs=2, patience=1), (x, y), (x, y),
                      loss_fn=exploding)


def test_config_validation():
    with pytest.raises(ValueError):
        net.MlpConfig(input_dim=4, dropout_rate=1.0)
    with pytest.raises(ValueError):
        net.MlpConfig(input_dim=4, hidden_widths=(4, 4), dropout_rate=0.1, dropout_layers=(3,))
    with pytest.raises(ValueError):
        net.TrainConfig(max_epochs=5, patience=6)
    with pytest.raises(ValueError):
        net.TrainConfig(learning_rate=0.0)


def test_checkpoint_round_trip(tmp_path):
    cfg = net.MlpConfig(input_dim=6, hidden_widths=(5, 4), n_mixtures=2, dropout_rate=0.1,
                        dropout_layers=(1,), seed=3)
    params = net.init_params(cfg)
    norm = NormalizationState(0.123, np.array([1.0, -2.0]), np.array([30.5, 7.25]))
    manifest = net.save_checkpoint(tmp_path / "model", params, cfg, norm)
    assert manifest.read_text().startswith("# " + net.CHECKPOINT_MAGIC)
    raw = (tmp_path / "model.bin").read_bytes()
    assert len(raw) == 8 * params.flat().size
    back, cfg2, norm2 = net.load_checkpoint(tmp_path / "model")
    assert cfg2 == cfg
    np.testing.assert_array_equal(back.flat(), params.flat())
    assert norm2.delta_norm == norm.delta_norm
    np.testing.assert_array_equal(norm2.target_max, norm.target_max)
