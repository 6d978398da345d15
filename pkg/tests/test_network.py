"""
Tests for the point/line network
"""

import numpy as np
import pytest

from app.relocalization.diffcore import Tensor
from app.relocalization.exceptions import DimensionError
from app.relocalization.models.config_models import ModelConfig
from app.relocalization.network import (
    attention_layer,
    encode_line,
    forward,
    init_params,
    reliability,
    storage_bytes,
)

pytestmark = pytest.mark.unit

TRIALS = 100


def _inputs(rng, config: ModelConfig, n: int, m: int, dtype=np.float64):
    D, T = config.descriptor_dim, config.line_tokens
    return rng.normal(size=(n, D)).astype(dtype), rng.normal(size=(m, T, D)).astype(dtype)


class TestInitialization:
    def test_deterministic_in_seed(self, tiny_model_config):
        a = init_params(tiny_model_config, seed=7)
        b = init_params(tiny_model_config, seed=7)
        c = init_params(tiny_model_config, seed=8)
        assert a.names() == b.names()
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)
        assert not all(np.array_equal(a[n].data, c[n].data) for n in a)

    def test_layout(self, tiny_model_config):
        params = init_params(tiny_model_config)
        D = tiny_model_config.descriptor_dim
        assert params["encoder.attn.q.weight"].shape == (D, D)
        assert params["layers.1.mlp.0.weight"].shape == (2 * D, 2 * D)
        assert params["point_head.1.weight"].shape == (32, 4)
        assert params["line_head.1.weight"].shape == (32, 7)
        assert np.all(params["encoder.norm1.gain"].data == 1.0)
        assert np.all(params["layers.0.attn.q.bias"].data == 0.0)
        assert params.dtype == np.float32

    def test_reliability_logit_columns_are_scaled_by_beta(self, tiny_model_config):
        flat = tiny_model_config.model_copy(update={"beta": 1.0})
        scaled, plain = init_params(tiny_model_config, seed=2), init_params(flat, seed=2)
        for name, column in (("point_head.1.weight", 3), ("line_head.1.weight", 6)):
            np.testing.assert_allclose(scaled[name].data[:, column] * 100.0, plain[name].data[:, column], rtol=1e-6)
            np.testing.assert_array_equal(scaled[name].data[:, :column], plain[name].data[:, :column])
        assert np.array_equal(scaled["layers.0.attn.q.weight"].data, plain["layers.0.attn.q.weight"].data)

    def test_fresh_network_is_not_saturated_unreliable(self, tiny_model_config):
        rng = np.random.default_rng(1)
        params = init_params(tiny_model_config, seed=1, dtype=np.float64)
        pred = forward(*_inputs(rng, tiny_model_config, 50, 20), tiny_model_config, params)
        assert np.median(pred.point_reliability.data) > 0.1
        assert np.median(pred.line_reliability.data) > 0.1

    def test_default_network_storage(self):
        # float32 weights of the full-size network land near 25 MB
        assert 20e6 < storage_bytes(ModelConfig()) < 30e6

    def test_rejects_heads_not_dividing_width(self):
        with pytest.raises(ValueError):
            ModelConfig(descriptor_dim=30, num_heads=4)


class TestForward:
    def test_shapes_and_reliability_range(self, tiny_model_config):
        rng = np.random.default_rng(0)
        params = init_params(tiny_model_config, dtype=np.float64)
        points, tokens = _inputs(rng, tiny_model_config, 7, 3)
        pred = forward(points, tokens, tiny_model_config, params)
        assert pred.point_coords.shape == (7, 3)
        assert pred.line_coords.shape == (3, 6)
        for r in (pred.point_reliability.data, pred.line_reliability.data):
            assert np.all((r > 0) & (r <= 1))

    def test_empty_lines(self, tiny_model_config):
        rng = np.random.default_rng(1)
        params = init_params(tiny_model_config, dtype=np.float64)
        points, tokens = _inputs(rng, tiny_model_config, 5, 0)
        pred = forward(points, tokens, tiny_model_config, params)
        assert pred.point_coords.shape == (5, 3)
        assert pred.line_coords.shape == (0, 6)

    def test_empty_points(self, tiny_model_config):
        rng = np.random.default_rng(2)
        params = init_params(tiny_model_config, dtype=np.float64)
        points, tokens = _inputs(rng, tiny_model_config, 0, 2)
        pred = forward(points, tokens, tiny_model_config, params)
        assert pred.point_coords.shape == (0, 3)
        assert pred.line_coords.shape == (2, 6)

    def test_wrong_descriptor_width(self, tiny_model_config):
        params = init_params(tiny_model_config)
        with pytest.raises(DimensionError):
            forward(np.zeros((3, 8)), np.zeros((0, 4, 16)), tiny_model_config, params)

    def test_wrong_token_count(self, tiny_model_config):
        params = init_params(tiny_model_config)
        with pytest.raises(DimensionError):
            forward(np.zeros((3, 16)), np.zeros((2, 3, 16)), tiny_model_config, params)

    def test_lines_inform_points(self, tiny_model_config):
        rng = np.random.default_rng(3)
        params = init_params(tiny_model_config, dtype=np.float64)
        points, tokens = _inputs(rng, tiny_model_config, 4, 2)
        base = forward(points, tokens, tiny_model_config, params).point_coords.data
        moved = forward(points, tokens + 1.0, tiny_model_config, params).point_coords.data
        assert not np.allclose(base, moved)

    def test_float32_forward_stays_float32(self, tiny_model_config):
        rng = np.random.default_rng(4)
        params = init_params(tiny_model_config)
        points, tokens = _inputs(rng, tiny_model_config, 4, 2, np.float32)
        assert forward(points, tokens, tiny_model_config, params).point_coords.dtype == np.float32


class TestSymmetries:
    def test_point_and_line_permutation_equivariance(self, tiny_model_config):
        rng = np.random.default_rng(10)
        params = init_params(tiny_model_config, seed=1, dtype=np.float64)
        for _ in range(TRIALS):
            n, m = int(rng.integers(1, 9)), int(rng.integers(1, 5))
            points, tokens = _inputs(rng, tiny_model_config, n, m)
            pp, lp = rng.permutation(n), rng.permutation(m)
            base = forward(points, tokens, tiny_model_config, params)
            perm = forward(points[pp], tokens[lp], tiny_model_config, params)
            np.testing.assert_allclose(perm.point_coords.data, base.point_coords.data[pp], atol=1e-6)
            np.testing.assert_allclose(perm.point_reliability.data, base.point_reliability.data[pp], atol=1e-6)
            np.testing.assert_allclose(perm.line_coords.data, base.line_coords.data[lp], atol=1e-6)
            np.testing.assert_allclose(perm.line_reliability.data, base.line_reliability.data[lp], atol=1e-6)

    def test_equivariance_at_float32(self, tiny_model_config):
        rng = np.random.default_rng(11)
        params = init_params(tiny_model_config, seed=2)
        points, tokens = _inputs(rng, tiny_model_config, 8, 4, np.float32)
        pp = rng.permutation(8)
        base = forward(points, tokens, tiny_model_config, params).point_coords.data
        perm = forward(points[pp], tokens, tiny_model_config, params).point_coords.data
        np.testing.assert_allclose(perm, base[pp], atol=1e-5)

    def test_line_encoder_token_permutation_invariance(self, tiny_model_config):
        rng = np.random.default_rng(12)
        params = init_params(tiny_model_config, seed=3, dtype=np.float64)
        T, D = tiny_model_config.line_tokens, tiny_model_config.descriptor_dim
        for _ in range(TRIALS):
            tokens = rng.normal(size=(T, D))
            base = encode_line(Tensor(tokens), params, tiny_model_config).data
            shuffled = encode_line(Tensor(tokens[rng.permutation(T)]), params, tiny_model_config).data
            assert base.shape == (D,)
            np.testing.assert_allclose(shuffled, base, atol=1e-6)

    def test_attention_layer_kinds(self, tiny_model_config):
        rng = np.random.default_rng(13)
        params = init_params(tiny_model_config, dtype=np.float64)
        D = tiny_model_config.descriptor_dim
        points, lines = Tensor(rng.normal(size=(5, D))), Tensor(rng.normal(size=(3, D)))
        for kind, index in (("self", 0), ("cross", 1)):
            new_points, new_lines = attention_layer(points, lines, kind, params, index, tiny_model_config)
            assert new_points.shape == (5, D) and new_lines.shape == (3, D)
        with pytest.raises(ValueError):
            attention_layer(points, lines, "sideways", params, 0, tiny_model_config)


class TestReliability:
    def test_closed_forms(self):
        assert reliability(Tensor([0.0]), 100.0).data[0] == pytest.approx(1.0, abs=1e-9)
        assert reliability(Tensor([0.01]), 100.0).data[0] == pytest.approx(0.5, abs=1e-9)
        assert reliability(Tensor([-0.01]), 100.0).data[0] == pytest.approx(0.5, abs=1e-9)

    def test_bounded(self):
        r = reliability(Tensor(np.linspace(-50, 50, 101)), 100.0).data
        assert np.all((r > 0) & (r <= 1))
