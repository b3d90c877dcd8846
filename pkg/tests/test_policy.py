import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oilad import autodiff as ad
from oilad.errors import ConfigError, ParseError, ShapeError, VersionError
from oilad.policy import (PolicyConfig, TransformerPolicy, checkpoint_bytes,
                          checkpoint_from_bytes, forward, load_checkpoint, policy_probs,
                          save_checkpoint, state_values, state_values_t)

from conftest import check_grad


def small(seed=0, **kw):
    cfg = dict(state_dim=3, action_count=4, embed_dim=8, layers=2, heads=2, dropout=0.0,
               max_seq_len=6, seed=seed)
    cfg.update(kw)
    return TransformerPolicy(PolicyConfig(**cfg))


def params_grad_error(model, states, weights):
    """Worst finite-difference error of sum(w * Q) over all parameters."""
    names = list(model.params)

    def build(*leaves):
        model.params = dict(zip(names, leaves))
        return ad.sum(model.forward(states) * weights)

    return check_grad(build, *[model.params[n].data.copy() for n in names])


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            PolicyConfig(2, 3, embed_dim=10, heads=3)

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            PolicyConfig(2, 3, dropout=1.0)

    def test_parameter_count(self):
        m = small()
        E, F, d, A, L = 8, 32, 3, 4, 6
        per_block = 4 * E + 4 * E * E + E + E * F + F + F * E + E
        expected = d * E + E + L * E + 2 * per_block + 2 * E + E * A + A
        assert m.parameter_count() == expected

    def test_init_is_seeded(self):
        a, b = small(seed=3), small(seed=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        assert not np.array_equal(small(seed=4).params["embed.W"].data, a.params["embed.W"].data)


class TestForward:
    def test_shapes(self):
        m = small()
        x = np.random.default_rng(0).normal(size=(2, 5, 3))
        assert m.forward(x).shape == (2, 5, 4)
        assert m.forward(x[0]).shape == (5, 4)
        assert m.q_values(x[0]).shape == (5, 4)

    def test_shape_errors(self):
        m = small()
        with pytest.raises(ShapeError):
            m.q_values(np.zeros((5, 2)))
        with pytest.raises(ShapeError):
            m.q_values(np.zeros((7, 3)))
        with pytest.raises(ShapeError):
            m.q_values(np.zeros((0, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_causality_is_bitwise(self, seed, t):
        m = small(seed=seed % 7)
        x = np.random.default_rng(seed).normal(size=(6, 3))
        full = m.q_values(x)
        np.testing.assert_array_equal(m.q_values(x[:t]), full[:t])

    def test_future_states_do_not_leak_in_batched_forward(self):
        m = small()
        x = np.random.default_rng(1).normal(size=(1, 6, 3))
        y = x.copy()
        y[0, 4:] += 10.0
        np.testing.assert_allclose(m.forward(x).data[0, :4], m.forward(y).data[0, :4], atol=1e-12)

    def test_eval_is_deterministic_and_train_uses_seed(self):
        m = small(dropout=0.3)
        x = np.random.default_rng(2).normal(size=(5, 3))
        np.testing.assert_array_equal(forward(m, x), forward(m, x))
        a = forward(m, x, train_flag=True, seed=1)
        b = forward(m, x, train_flag=True, seed=1)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, forward(m, x))

    def test_without_positions(self):
        m = small(positional=False)
        assert "pos" not in m.params
        assert m.q_values(np.ones((3, 3))).shape == (3, 4)


class TestValues:
    def test_probabilities(self):
        q = np.array([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]])
        p = policy_probs(q)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert np.all(np.isfinite(p))

    def test_value_is_between_min_and_max(self):
        q = np.random.default_rng(0).normal(size=(50, 5)) * 10
        v = state_values(q)
        assert np.all(v <= q.max(axis=1) + 1e-12) and np.all(v >= q.min(axis=1) - 1e-12)

    def test_differentiable_value_matches(self):
        q = np.random.default_rng(1).normal(size=(2, 4, 3))
        np.testing.assert_allclose(state_values_t(ad.Tensor(q)).data, state_values(q), atol=1e-12)
        assert check_grad(lambda t: ad.sum(state_values_t(t)), q) < 1e-6


class TestGradients:
    def test_full_transformer(self):
        m = small()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(2, 5, 4))
        assert params_grad_error(m, x, w) < 1e-4

    def test_single_layer_one_head(self):
        m = small(layers=1, heads=1, seed=2)
        rng = np.random.default_rng(6)
        assert params_grad_error(m, rng.normal(size=(4, 3)), rng.normal(size=(4, 4))) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        m = small(seed=9)
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, p)
        back = load_checkpoint(p)
        assert back.cfg == m.cfg
        assert checkpoint_bytes(back) == checkpoint_bytes(m)
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(back.q_values(x), m.q_values(x))

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            checkpoint_from_bytes(b"NOTACKPT" + bytes(20))

    def test_truncated(self):
        data = checkpoint_bytes(small())
        with pytest.raises(ParseError, match="truncated"):
            checkpoint_from_bytes(data[:-5])

    def test_trailing_bytes(self):
        with pytest.raises(ParseError, match="trailing"):
            checkpoint_from_bytes(checkpoint_bytes(small()) + b"\x00")

    def test_version(self):
        data = bytearray(checkpoint_bytes(small()))
        data[8] = 7
        with pytest.raises(VersionError):
            checkpoint_from_bytes(bytes(data))

    def test_architecture_mismatch(self):
        with pytest.raises(VersionError, match="state_dim"):
            checkpoint_from_bytes(checkpoint_bytes(small()), expect={"state_dim": 5})

    def test_wrong_parameter_shapes(self):
        arrays = small().arrays()
        arrays["head.W"] = np.zeros((2, 2))
        with pytest.raises(VersionError):
            TransformerPolicy(small().cfg, arrays)
