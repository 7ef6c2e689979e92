"""Layer tests: finite-difference gradients for every layer, recurrent cell
semantics (gate wiring, zoneout modes), batch-norm statistics handling, and
multi-head attention masking."""

import numpy as np
import pytest
from scipy.special import expit

from rakugo_tts import autodiff as T
from rakugo_tts.autodiff import Tensor
from rakugo_tts import nn

from fdcheck import max_rel_error


@pytest.fixture(autouse=True)
def float64_mode():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(99)


class TestModuleRegistry:
    def test_parameters_found_recursively(self, rng):
        class Tiny(nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = nn.Dense(3, 2, rng)
                self.stack = nn.ModuleList([nn.Dense(2, 2, rng), nn.Dense(2, 1, rng)])

        names = dict(Tiny().named_parameters())
        assert set(names) == {
            "inner.w", "inner.b", "stack.0.w", "stack.0.b", "stack.1.w", "stack.1.b"}

    def test_train_eval_propagates(self, rng):
        outer = nn.ModuleList([nn.Dropout(0.5, rng)])
        outer.eval()
        assert not outer[0].training
        outer.train()
        assert outer[0].training

    def test_zero_grad(self, rng):
        layer = nn.Dense(2, 2, rng)
        (layer(T.tensor(np.ones((1, 2)))) ** 2).sum().backward()
        assert layer.w.grad is not None
        layer.zero_grad()
        assert layer.w.grad is None


class TestDense:
    def test_grads(self, rng):
        layer = nn.Dense(4, 3, rng, activation="tanh")
        x = T.tensor(rng.normal(size=(5, 4)), requires_grad=True)
        err = max_rel_error(lambda: (layer(x) ** 2).sum(), [layer.w, layer.b, x])
        assert err < 1e-6

    def test_width_mismatch_rejected(self, rng):
        layer = nn.Dense(4, 3, rng)
        with pytest.raises(ValueError, match="width"):
            layer(T.tensor(np.zeros((2, 5))))

    def test_unknown_activation_rejected(self, rng):
        with pytest.raises(ValueError, match="activation"):
            nn.Dense(2, 2, rng, activation="gelu")


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        bn = nn.BatchNorm(3)
        x = T.tensor(np.full((4, 3), 7.0))
        out = bn(x)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_standardized_batch_is_near_identity(self, rng):
        bn = nn.BatchNorm(2, eps=1e-3)
        raw = rng.normal(size=(200, 2))
        raw = (raw - raw.mean(0)) / raw.std(0)
        out = bn(T.tensor(raw))
        np.testing.assert_allclose(out.data, raw, atol=2e-3)

    def test_eval_uses_running_statistics(self, rng):
        bn = nn.BatchNorm(3)
        x = T.tensor(rng.normal(size=(16, 3)) * 2.0 + 1.0)
        train_out = bn(x)
        # force the running statistics to the exact batch statistics (the
        # infinite-momentum limit) and compare evaluation output
        bn.update_buffer("running_mean", x.data.mean(axis=0))
        bn.update_buffer("running_var", x.data.var(axis=0))
        bn.eval()
        eval_out = bn(x)
        np.testing.assert_allclose(eval_out.data, train_out.data, atol=1e-10)

    def test_running_stats_update(self, rng):
        bn = nn.BatchNorm(2, momentum=0.9)
        x = rng.normal(size=(50, 2)) + 5.0
        bn(T.tensor(x))
        expected_mean = 0.9 * 0.0 + 0.1 * x.mean(axis=0)
        np.testing.assert_allclose(bn.running_mean, expected_mean, rtol=1e-9)

    def test_grads(self, rng):
        bn = nn.BatchNorm(3)
        x = T.tensor(rng.normal(size=(6, 3)), requires_grad=True)
        err = max_rel_error(lambda: (bn(x) ** 2).sum(), [bn.gamma, bn.beta, x])
        assert err < 1e-5

    def test_channelwise_over_time_axis(self, rng):
        bn = nn.BatchNorm(4)
        out = bn(T.tensor(rng.normal(size=(2, 7, 4))))
        assert out.shape == (2, 7, 4)


class TestDropout:
    def test_eval_is_identity(self, rng):
        drop = nn.Dropout(0.5, rng)
        drop.eval()
        x = T.tensor(rng.normal(size=(3, 3)))
        np.testing.assert_array_equal(drop(x).data, x.data)

    def test_force_applies_in_eval_mode(self):
        drop = nn.Dropout(0.5, np.random.default_rng(0))
        drop.eval()
        x = T.tensor(np.ones((100, 10)))
        out = drop(x, force=True)
        assert np.any(out.data == 0.0)

    def test_inverted_scaling_preserves_mean(self):
        drop = nn.Dropout(0.3, np.random.default_rng(0))
        x = T.tensor(np.ones((200, 200)))
        out = drop(x)
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_seeded_reproducibility(self):
        x = T.tensor(np.ones((8, 8)))
        outs = []
        for _ in range(2):
            drop = nn.Dropout(0.5, np.random.default_rng(42))
            outs.append(drop(x).data)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_invalid_probability_rejected(self, rng):
        with pytest.raises(ValueError, match="probability"):
            nn.Dropout(1.5, rng)


def lstm_step_oracle(x, h, c, wx, wh, b, forget_bias=1.0):
    """Direct numpy LSTM step with (input, forget, candidate, output) gates."""
    z = x @ wx + h @ wh + b
    u = h.shape[1]
    i = expit(z[:, :u])
    f = expit(z[:, u:2 * u] + forget_bias)
    g = np.tanh(z[:, 2 * u:3 * u])
    o = expit(z[:, 3 * u:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


class TestLSTMCell:
    def test_matches_direct_oracle(self, rng):
        cell = nn.LSTMCell(3, 4, rng)
        x = rng.normal(size=(2, 3))
        h0, c0 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        h, c = cell(T.tensor(x), (T.tensor(h0), T.tensor(c0)))
        eh, ec = lstm_step_oracle(x, h0, c0, cell.wx.data, cell.wh.data, cell.b.data)
        np.testing.assert_allclose(h.data, eh, atol=1e-12)
        np.testing.assert_allclose(c.data, ec, atol=1e-12)

    def test_zoneout_one_keeps_previous_state(self, rng):
        cell = nn.LSTMCell(3, 4, rng, zoneout=1.0)
        h0, c0 = cell.initial_state(2)
        h0 = T.tensor(rng.normal(size=(2, 4)))
        c0 = T.tensor(rng.normal(size=(2, 4)))
        h, c = cell(T.tensor(rng.normal(size=(2, 3))), (h0, c0))
        np.testing.assert_array_equal(h.data, h0.data)
        np.testing.assert_array_equal(c.data, c0.data)

    def test_zoneout_zero_is_plain_step(self, rng):
        plain = nn.LSTMCell(3, 4, rng, zoneout=0.0)
        x = T.tensor(rng.normal(size=(2, 3)))
        state = (T.tensor(rng.normal(size=(2, 4))), T.tensor(rng.normal(size=(2, 4))))
        h1, c1 = plain(x, state)
        eh, ec = lstm_step_oracle(x.data, state[0].data, state[1].data,
                                  plain.wx.data, plain.wh.data, plain.b.data)
        np.testing.assert_allclose(h1.data, eh, atol=1e-12)

    def test_zoneout_seeded_reproducibility(self):
        results = []
        for _ in range(2):
            cell = nn.LSTMCell(3, 4, np.random.default_rng(5), zoneout=0.4)
            x = T.tensor(np.ones((2, 3)))
            state = (T.tensor(np.ones((2, 4))), T.tensor(np.ones((2, 4))))
            h, c = cell(x, state)
            results.append((h.data.copy(), c.data.copy()))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        np.testing.assert_array_equal(results[0][1], results[1][1])

    def test_zoneout_eval_interpolates(self, rng):
        cell = nn.LSTMCell(3, 4, rng, zoneout=0.25)
        cell.eval()
        x = T.tensor(rng.normal(size=(1, 3)))
        h0 = T.tensor(rng.normal(size=(1, 4)))
        c0 = T.tensor(rng.normal(size=(1, 4)))
        h, c = cell(x, (h0, c0))
        plain_h, plain_c = lstm_step_oracle(x.data, h0.data, c0.data,
                                            cell.wx.data, cell.wh.data, cell.b.data)
        np.testing.assert_allclose(h.data, 0.25 * h0.data + 0.75 * plain_h, atol=1e-12)
        np.testing.assert_allclose(c.data, 0.25 * c0.data + 0.75 * plain_c, atol=1e-12)

    def test_invalid_zoneout_rejected(self, rng):
        with pytest.raises(ValueError, match="zoneout"):
            nn.LSTMCell(2, 2, rng, zoneout=-0.1)

    def test_grads(self, rng):
        cell = nn.LSTMCell(3, 4, rng)
        x = T.tensor(rng.normal(size=(2, 3)), requires_grad=True)

        def loss():
            h, c = cell(x, cell.initial_state(2))
            return (h * h).sum() + (c * c).sum()

        err = max_rel_error(loss, [cell.wx, cell.wh, cell.b, x])
        assert err < 1e-6


class TestLSTMSequence:
    def test_output_shape(self, rng):
        lstm = nn.LSTM(3, 5, rng)
        out = lstm(T.tensor(rng.normal(size=(2, 7, 3))))
        assert out.shape == (2, 7, 5)

    def test_mask_freezes_state_on_padding(self, rng):
        lstm = nn.LSTM(2, 3, rng)
        x = rng.normal(size=(1, 5, 2))
        x[:, 3:] = 99.0  # garbage in the padded region
        mask = np.array([[1, 1, 1, 0, 0]])
        out = lstm(T.tensor(x), mask)
        # padded steps carry the last valid state forward unchanged
        np.testing.assert_allclose(out.data[0, 3], out.data[0, 2], atol=1e-12)
        np.testing.assert_allclose(out.data[0, 4], out.data[0, 2], atol=1e-12)

    def test_backward_direction_ignores_trailing_padding(self, rng):
        lstm = nn.LSTM(2, 3, rng, go_backwards=True)
        x_short = rng.normal(size=(1, 3, 2))
        x_padded = np.concatenate([x_short, np.full((1, 2, 2), 42.0)], axis=1)
        mask = np.array([[1, 1, 1, 0, 0]])
        out_short = lstm(T.tensor(x_short))
        out_padded = lstm(T.tensor(x_padded), mask)
        np.testing.assert_allclose(out_padded.data[:, :3], out_short.data, atol=1e-12)

    def test_grads_through_time(self, rng):
        lstm = nn.LSTM(2, 3, rng)
        x = T.tensor(rng.normal(size=(1, 4, 2)), requires_grad=True)
        params = [lstm.cell.wx, lstm.cell.wh, lstm.cell.b, x]
        err = max_rel_error(lambda: (lstm(x) ** 2).sum(), params)
        assert err < 1e-6


class TestBiLSTM:
    def test_output_width_is_double(self, rng):
        bi = nn.BiLSTM(3, 8, rng)
        out = bi(T.tensor(rng.normal(size=(2, 5, 3))))
        assert out.shape == (2, 5, 8)

    def test_odd_width_rejected(self, rng):
        with pytest.raises(ValueError, match="even"):
            nn.BiLSTM(3, 7, rng)

    def test_grads(self, rng):
        bi = nn.BiLSTM(2, 4, rng)
        x = T.tensor(rng.normal(size=(1, 3, 2)), requires_grad=True)
        err = max_rel_error(lambda: (bi(x) ** 2).sum(), bi.parameters() + [x])
        assert err < 1e-6


class TestGRU:
    def test_matches_direct_oracle(self, rng):
        gru = nn.GRU(3, 4, rng)
        x = rng.normal(size=(2, 3, 3))
        out = gru(T.tensor(x))

        h = np.zeros((2, 4))
        u = 4
        for t in range(3):
            zx = x[:, t] @ gru.wx.data + gru.b.data
            rz = zx[:, :2 * u] + h @ gru.wh_rz.data
            r, z = expit(rz[:, :u]), expit(rz[:, u:])
            n = np.tanh(zx[:, 2 * u:] + (r * h) @ gru.wh_n.data)
            h = z * h + (1.0 - z) * n
        np.testing.assert_allclose(out.data[:, -1], h, atol=1e-12)

    def test_grads(self, rng):
        gru = nn.GRU(2, 3, rng)
        x = T.tensor(rng.normal(size=(1, 3, 2)), requires_grad=True)
        err = max_rel_error(lambda: (gru(x)[:, -1] ** 2).sum(), gru.parameters() + [x])
        assert err < 1e-6


class TestMultiHeadAttention:
    def test_output_shape_and_row_sums(self, rng):
        mha = nn.MultiHeadAttention(6, 6, 8, 2, rng)
        x = T.tensor(rng.normal(size=(2, 5, 6)))
        out, w = mha(x, x)
        assert out.shape == (2, 5, 8)
        assert w.shape == (2, 2, 5, 5)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_indivisible_heads_rejected(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            nn.MultiHeadAttention(4, 4, 6, 4, rng)

    def test_causal_masking_blocks_future(self, rng):
        mha = nn.MultiHeadAttention(4, 4, 4, 2, rng, causal=True)
        x1 = rng.normal(size=(1, 6, 4))
        x2 = x1.copy()
        x2[:, 4:] = rng.normal(size=(1, 2, 4))  # perturb only the future
        out1, _ = mha(T.tensor(x1), T.tensor(x1))
        out2, _ = mha(T.tensor(x2), T.tensor(x2))
        np.testing.assert_allclose(out1.data[:, :4], out2.data[:, :4], atol=1e-12)

    def test_prefix_query_equals_full_causal(self, rng):
        # running the last step alone over the prefix must reproduce the
        # full causal pass at that step (the autoregressive decode path)
        mha = nn.MultiHeadAttention(4, 4, 4, 2, rng, causal=True)
        x = T.tensor(rng.normal(size=(1, 5, 4)))
        full, _ = mha(x, x)
        last, _ = mha(x[:, 4:5, :], x)
        np.testing.assert_allclose(last.data[:, 0], full.data[:, 4], atol=1e-12)

    def test_key_mask_zeroes_attention(self, rng):
        mha = nn.MultiHeadAttention(4, 4, 4, 2, rng)
        x = T.tensor(rng.normal(size=(1, 4, 4)))
        key_mask = np.array([[True, True, False, False]])
        _, w = mha(x, x, key_mask=key_mask)
        np.testing.assert_allclose(w.data[..., 2:], 0.0, atol=1e-9)

    def test_grads(self, rng):
        mha = nn.MultiHeadAttention(3, 3, 4, 2, rng, causal=True)
        x = T.tensor(rng.normal(size=(1, 4, 3)), requires_grad=True)
        err = max_rel_error(lambda: (mha(x, x)[0] ** 2).sum(), mha.parameters() + [x])
        assert err < 1e-6

    def test_dropout_only_thins_mixing_weights(self, rng):
        mha = nn.MultiHeadAttention(3, 3, 4, 2, rng, dropout=0.5)
        x = T.tensor(rng.normal(size=(1, 6, 3)))
        _, w = mha(x, x)
        # returned weights stay a distribution even while training
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


class TestEmbeddingLayer:
    def test_out_of_range_rejected(self, rng):
        emb = nn.Embedding(10, 4, rng)
        with pytest.raises(ValueError, match="range"):
            emb(np.array([10]))

    def test_lookup_shape(self, rng):
        emb = nn.Embedding(10, 4, rng)
        assert emb(np.array([[1, 2, 3]])).shape == (1, 3, 4)
