from __future__ import annotations

import numpy as np
import pytest

from gaitlab import autograd as ag
from gaitlab.errors import InvalidConfig, MissingForwardState, TooManyFrames
from gaitlab.ted import (
    TedConfig,
    init_ted,
    parameter_count,
    ted_backward,
    ted_forward,
    zero_grads,
)
from gaitlab.util import rng_for

DESK = TedConfig(M=4, L=2, H=4, D=16)


def _v(t=8, d=16, seed=0, scale=1.0):
    return rng_for("ted-v", seed).normal(size=(t, d)) * scale


class TestInit:
    def test_production_scale_shapes(self):
        cfg = TedConfig(M=32, L=3, H=4, D=2048)
        params = init_ted(cfg, T_max=32, seed=0)
        assert params.queries.data.shape == (32, 2048)
        assert params.pos_emb.data.shape == (32, 2048)
        assert len(params.layers) == 3
        del params

    def test_same_seed_bit_identical(self):
        a = init_ted(DESK, 8, seed=7)
        b = init_ted(DESK, 8, seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            assert np.array_equal(pa.data, pb.data)

    def test_different_seeds_differ(self):
        a = init_ted(DESK, 8, seed=7)
        b = init_ted(DESK, 8, seed=8)
        assert not np.array_equal(a.queries.data, b.queries.data)

    def test_parameter_count_closed_form(self):
        for cfg, tmax in [(DESK, 8), (TedConfig(M=32, L=3, H=4, D=64), 16)]:
            params = init_ted(cfg, tmax, seed=1)
            actual = sum(p.data.size for p in params.parameters())
            assert actual == parameter_count(cfg, tmax)

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            TedConfig(D=10, H=4)
        with pytest.raises(InvalidConfig):
            TedConfig(M=0)
        with pytest.raises(InvalidConfig):
            init_ted(DESK, 0, seed=0)


class TestForward:
    def test_output_shape(self):
        params = init_ted(DESK, 8, seed=3)
        for t in (1, 4, 8):
            out = ted_forward(params, _v(t))
            assert out.f_temp.data.shape == (16,)

    def test_too_many_frames(self):
        params = init_ted(DESK, 8, seed=3)
        with pytest.raises(TooManyFrames):
            ted_forward(params, _v(9))

    def test_attention_maps_row_stochastic(self):
        params = init_ted(DESK, 8, seed=3)
        out = ted_forward(params, _v(8))
        assert len(out.attention_maps) == DESK.L
        for layer_maps in out.attention_maps:
            for kind in ("self", "cross"):
                for m in layer_maps[kind]:
                    assert np.max(np.abs(m.sum(axis=1) - 1.0)) < 1e-12

    def test_deterministic(self):
        params = init_ted(DESK, 8, seed=3)
        a = ted_forward(params, _v(8)).f_temp.data
        b = ted_forward(params, _v(8)).f_temp.data
        assert np.array_equal(a, b)

    def test_positions_zeroed_gives_permutation_invariance(self):
        params = init_ted(DESK, 8, seed=4)
        params.pos_emb.tensor.data[...] = 0.0
        v = _v(8, seed=5)
        perm = rng_for("perm", 1).permutation(8)
        a = ted_forward(params, v).f_temp.data
        b = ted_forward(params, v[perm]).f_temp.data
        assert np.max(np.abs(a - b)) <= 1e-9

    def test_positions_present_gives_permutation_sensitivity(self):
        params = init_ted(DESK, 8, seed=4)
        v = _v(8, seed=5)
        perm = rng_for("perm", 2).permutation(8)
        a = ted_forward(params, v).f_temp.data
        b = ted_forward(params, v[perm]).f_temp.data
        assert np.max(np.abs(a - b)) > 1e-6

    def test_self_attention_flag_changes_output(self):
        v = _v(8, seed=6)
        with_self = ted_forward(init_ted(DESK, 8, seed=4), v).f_temp.data
        cfg = TedConfig(M=4, L=2, H=4, D=16, query_self_attention=False)
        without = ted_forward(init_ted(cfg, 8, seed=4), v).f_temp.data
        assert not np.allclose(with_self, without)


class TestBackward:
    def test_grad_check_full_decoder(self):
        params = init_ted(DESK, 8, seed=7)
        v = _v(8, seed=8, scale=0.7)

        def fn():
            return ag.sum_all(ted_forward(params, v).f_temp)

        assert ag.grad_check(fn, params.parameters()) < 1e-4

    def test_zero_upstream_zero_grads(self):
        params = init_ted(DESK, 8, seed=7)
        fwd = ted_forward(params, _v(8))
        grads = ted_backward(params, fwd, np.zeros(16))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_upstream_linearity(self):
        params = init_ted(DESK, 8, seed=7)
        up = rng_for("up", 1).normal(size=16)
        fwd1 = ted_forward(params, _v(8))
        g1 = ted_backward(params, fwd1, up)
        fwd2 = ted_forward(params, _v(8))
        g2 = ted_backward(params, fwd2, 2.0 * up)
        for name in g1:
            assert np.allclose(2.0 * g1[name], g2[name], rtol=0, atol=1e-18)

    def test_input_gradient_available_on_request(self):
        params = init_ted(DESK, 8, seed=7)
        fwd = ted_forward(params, _v(8), want_input_grad=True)
        grads = ted_backward(params, fwd, np.ones(16))
        assert grads["V"].shape == (8, 16)
        assert np.any(grads["V"] != 0.0)

    def test_missing_forward_state(self):
        params = init_ted(DESK, 8, seed=7)
        for p in params.parameters():
            p.trainable = False
            p.tensor.requires_grad = False
        fwd = ted_forward(params, _v(8))
        with pytest.raises(MissingForwardState):
            ted_backward(params, fwd, np.ones(16))
        zero_grads(params)
