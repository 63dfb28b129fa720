"""Residual-gate contracts: the scalar transform, its exact reduction to
plain prefix tuning at alpha = 0, equality with the gated expert-mixture
route, gradient correctness for the gate scalars, and monotonicity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefix_moe.attention import (Prefix, attention_matrix, empty_prefix, init_msa_params,
                                  init_prefix, msa_head_outputs, prefix_head_outputs)
from prefix_moe.moe_view import prefix_moe_head_row
from prefix_moe.norga import (ACTIVATIONS, NorgaGate, gate_param_count, norga_attention,
                              norga_moe_row, norga_msa_forward, norga_score,
                              prefix_param_count, transform_prompt_block)
from prefix_moe.numerics import NumericError, Rng, Tensor, backward, tsum

# frozen ahead of the implementation with 40-digit arithmetic:
# 0.5 + tanh(0.5)
HALF_PLUS_TANH_HALF = 0.9621171572600097585023184836436725487303


def instance(seed, n=4, d=8, m=2, L=2, activation="tanh", alpha=1.0, tau=1.0):
    rng = Rng(seed)
    x = rng.uniform(-1, 1, size=(n, d))
    params = init_msa_params(rng.child(1), d, m)
    prefix = init_prefix(rng.child(2), L, d, requires_grad=False)
    gate = NorgaGate(alpha=Tensor(alpha), tau=Tensor(tau), activation=activation)
    return x, params, prefix, gate


class TestNorgaScore:
    def test_alpha_zero_is_identity(self):
        for act in ACTIVATIONS:
            gate = NorgaGate(alpha=Tensor(0.0), tau=Tensor(3.3), activation=act)
            for s in (-2.0, 0.0, 0.7, 40.0):
                assert norga_score(s, gate) == s

    def test_odd_activation_at_origin(self):
        gate = NorgaGate(alpha=Tensor(5.0), tau=Tensor(-2.0), activation="tanh")
        assert norga_score(0.0, gate) == 0.0

    def test_high_precision_reference_value(self):
        gate = NorgaGate(alpha=Tensor(1.0), tau=Tensor(1.0), activation="tanh")
        assert norga_score(0.5, gate) == pytest.approx(HALF_PLUS_TANH_HALF, abs=1e-15)

    def test_nonfinite_rejected(self):
        gate = NorgaGate()
        with pytest.raises(NumericError):
            norga_score(float("nan"), gate)
        with pytest.raises(NumericError):
            norga_score(Tensor([np.inf]), gate)

    def test_sigmoid_saturation_asymptote(self):
        gate = NorgaGate(alpha=Tensor(0.8), tau=Tensor(2.0), activation="sigmoid")
        s = 50.0
        assert norga_score(s, gate) == pytest.approx(s + 0.8, abs=1e-12)

    @given(st.floats(0, 3), st.floats(0, 3),
           st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=60, deadline=None)
    def test_monotone_for_nonnegative_alpha_tau(self, alpha, tau, s1, s2):
        if s1 == s2:
            return
        lo, hi = sorted((s1, s2))
        gate = NorgaGate(alpha=Tensor(alpha), tau=Tensor(tau), activation="tanh")
        assert norga_score(lo, gate) < norga_score(hi, gate)


class TestNorgaAttention:
    def test_alpha_zero_reduces_to_prefix_tuning(self):
        x, params, prefix, _ = instance(0)
        gate = NorgaGate(alpha=Tensor(0.0), tau=Tensor(1.0))
        plain = prefix_head_outputs(Tensor(x), params, prefix)
        for h, ref in zip(params.heads, plain):
            got = norga_attention(Tensor(x), h, prefix, gate)
            assert np.abs(got.data - ref.data).max() < 1e-12

    def test_empty_prefix_ignores_gate(self):
        x, params, _, gate = instance(1)
        plain = msa_head_outputs(Tensor(x), params)
        for h, ref in zip(params.heads, plain):
            got = norga_attention(Tensor(x), h, empty_prefix(8), gate)
            assert np.abs(got.data - ref.data).max() < 1e-12

    def test_pretrain_block_untouched(self):
        x, params, prefix, gate = instance(2)
        h = params.heads[0]
        a_prompt, a_pretrain = attention_matrix(Tensor(x), h, prefix)
        gated = transform_prompt_block(a_prompt, gate)
        # the transform builds a new prompt block; the pretrained block is the
        # very same node, hence element-for-element identical by construction
        _, a_pretrain_2 = attention_matrix(Tensor(x), h, prefix)
        np.testing.assert_array_equal(a_pretrain.data, a_pretrain_2.data)
        assert gated.shape == a_prompt.shape

    @pytest.mark.parametrize("activation", ["tanh", "sigmoid", "gelu"])
    def test_matches_gated_mixture_route(self, activation):
        for seed in range(6):
            x, params, prefix, gate = instance(seed, activation=activation,
                                               alpha=0.7, tau=1.3)
            for h in params.heads:
                out = norga_attention(Tensor(x), h, prefix, gate).data
                for i in range(x.shape[0]):
                    moe = norga_moe_row(x, h, prefix, gate, i)
                    assert np.abs(out[i] - moe).max() < 1e-10

    def test_full_layer_wrapper(self):
        x, params, prefix, gate = instance(3)
        out = norga_msa_forward(Tensor(x), params, prefix, gate)
        heads = [norga_attention(Tensor(x), h, prefix, gate).data for h in params.heads]
        expected = np.concatenate(heads, axis=1) @ params.w_o.data
        assert np.abs(out.data - expected).max() < 1e-12


class TestNorgaMoeRow:
    def test_frozen_identity_gate(self):
        x, params, prefix, _ = instance(4)
        gate = NorgaGate(alpha=Tensor(0.0), tau=Tensor(1.0), frozen=True)
        h = params.heads[1]
        for i in range(4):
            a = norga_moe_row(x, h, prefix, gate, i)
            b = prefix_moe_head_row(x, h, prefix, i)
            np.testing.assert_allclose(a, b, atol=1e-15)


class TestGateGradients:
    def rel_err(self, a, b):
        return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))

    def fd(self, f, x, step=1e-5):
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(x)
            flat[i] = orig - step
            lo = f(x)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        return g

    def test_gate_and_prefix_gradients_match_fd(self):
        rng = Rng(123)
        weights = rng.uniform(-1, 1, size=(4, 4))

        def loss_value(pk, pv, alpha, tau):
            prefix = Prefix(p_k=Tensor(pk), p_v=Tensor(pv))
            gate = NorgaGate(alpha=Tensor(alpha), tau=Tensor(tau), activation="tanh")
            out = norga_attention(Tensor(x), h, prefix, gate)
            return tsum(out * Tensor(weights)).item()

        for seed in range(5):
            x, params, prefix0, _ = instance(seed + 50, n=4, d=8, m=2, L=2)
            h = params.heads[0]
            pk0, pv0 = prefix0.p_k.data.copy(), prefix0.p_v.data.copy()
            a0, t0 = 0.9, 1.1

            prefix = Prefix(p_k=Tensor(pk0, requires_grad=True),
                            p_v=Tensor(pv0, requires_grad=True))
            gate = NorgaGate(alpha=Tensor(a0, requires_grad=True),
                             tau=Tensor(t0, requires_grad=True), activation="tanh")
            out = norga_attention(Tensor(x), h, prefix, gate)
            backward(tsum(out * Tensor(weights)))

            g_pk = self.fd(lambda v: loss_value(v, pv0, a0, t0), pk0.copy())
            g_pv = self.fd(lambda v: loss_value(pk0, v, a0, t0), pv0.copy())
            g_a = self.fd(lambda v: loss_value(pk0, pv0, float(v), t0), np.array(a0))
            g_t = self.fd(lambda v: loss_value(pk0, pv0, a0, float(v)), np.array(t0))

            assert self.rel_err(prefix.p_k.grad, g_pk).max() < 1e-5
            assert self.rel_err(prefix.p_v.grad, g_pv).max() < 1e-5
            assert self.rel_err(gate.alpha.grad, g_a).max() < 1e-5
            assert self.rel_err(gate.tau.grad, g_t).max() < 1e-5


class TestParameterCount:
    def test_gate_adds_exactly_two_scalars(self):
        prefix = init_prefix(Rng(1), 3, 8)
        base = prefix_param_count(prefix)
        assert base == 2 * 3 * 8
        assert gate_param_count(NorgaGate()) == 2
        assert gate_param_count(None) == 0
        gated_total = base + gate_param_count(NorgaGate())
        assert gated_total - base == 2

    def test_frozen_gate_exposes_no_trainables(self):
        gate = NorgaGate.fixed(1.0, 1.0)
        assert gate.trainable_params() == []
        live = NorgaGate()
        assert len(live.trainable_params()) == 2
