"""Forward-pass engine: formulas, invariants, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnforge.errors import DimensionError, EvaluationOverflowError, InputError
from attnforge.runtime import (
    AttentionHead,
    FeedForward,
    TransformerBlock,
    TransformerNet,
    attention_forward,
    block_forward,
    ffn_forward,
    mha_forward,
    model_size,
    net_forward,
    net_from_json,
    net_to_json,
    weight_sup_norm,
)

rng = np.random.default_rng(20240811)


def relu(x):
    return np.maximum(x, 0.0)


def attention_loops(Q, K, V, H):
    """Independent triple-loop evaluation of V H relu((K H)^T Q H)."""
    d, l = H.shape
    out = np.zeros((d, l))
    for t in range(l):
        for k in range(l):
            score = 0.0
            qh = Q @ H[:, t]
            kh = K @ H[:, k]
            for r in range(d):
                score += qh[r] * kh[r]
            out[:, t] += max(score, 0.0) * (V @ H[:, k])
    return out


def random_head(d, scale=1.0):
    return AttentionHead(
        Q=scale * rng.standard_normal((d, d)),
        K=scale * rng.standard_normal((d, d)),
        V=scale * rng.standard_normal((d, d)),
    )


class TestAttentionForward:
    def test_zero_weights_give_zero(self):
        d, l = 4, 6
        head = AttentionHead(Q=np.zeros((d, d)), K=np.zeros((d, d)), V=np.zeros((d, d)))
        H = rng.standard_normal((d, l))
        assert np.all(attention_forward(head, H) == 0.0)

    def test_scalar_case_by_hand(self):
        # d=1, l=1, Q=K=V=[1], H=[2]: score 4, output 2*relu(4) = 8
        head = AttentionHead(Q=[[1.0]], K=[[1.0]], V=[[1.0]])
        out = attention_forward(head, np.array([[2.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(8.0, abs=1e-14)

    def test_matches_triple_loop_oracle(self):
        d, l = 5, 8
        head = random_head(d)
        H = rng.standard_normal((d, l))
        expected = attention_loops(head.Q, head.K, head.V, H)
        got = attention_forward(head, H)
        assert np.max(np.abs(got - expected)) < 1e-12

    def test_input_unmodified(self):
        head = random_head(3)
        H = rng.standard_normal((3, 4))
        before = H.copy()
        attention_forward(head, H)
        assert np.array_equal(H, before)

    def test_shape_mismatch_raises(self):
        head = random_head(3)
        with pytest.raises(DimensionError):
            attention_forward(head, rng.standard_normal((4, 4)))

    def test_value_linearity(self):
        d, l = 5, 7
        Q = rng.standard_normal((d, d))
        K = rng.standard_normal((d, d))
        V = rng.standard_normal((d, d))
        H = rng.standard_normal((d, l))
        base = attention_forward(AttentionHead(Q=Q, K=K, V=V), H)
        for c in (0.5, -2.0, 3.25):
            scaled = attention_forward(AttentionHead(Q=Q, K=K, V=c * V), H)
            assert np.max(np.abs(scaled - c * base)) < 1e-12 * max(1.0, abs(c)) * (
                1.0 + np.max(np.abs(base))
            )


class TestMhaForward:
    def test_single_head_equals_attention(self):
        head = random_head(4)
        H = rng.standard_normal((4, 5))
        assert np.array_equal(mha_forward([head], H), attention_forward(head, H))

    def test_two_copies_double(self):
        head = random_head(4)
        H = rng.standard_normal((4, 5))
        one = attention_forward(head, H)
        two = mha_forward([head, head], H)
        assert np.max(np.abs(two - 2.0 * one)) < 1e-12 * (1 + np.max(np.abs(one)))

    def test_empty_head_list_gives_zeros(self):
        H = rng.standard_normal((4, 5))
        assert np.all(mha_forward([], H) == 0.0)

    def test_three_heads_sum(self):
        heads = [random_head(5) for _ in range(3)]
        H = rng.standard_normal((5, 6))
        total = sum(attention_forward(h, H) for h in heads)
        assert np.max(np.abs(mha_forward(heads, H) - total)) < 1e-12 * (
            1 + np.max(np.abs(total))
        )


class TestFfnForward:
    def test_identity_layer(self):
        ffn = FeedForward(layers=((np.eye(4), np.zeros(4)),))
        H = rng.standard_normal((4, 6))
        assert np.array_equal(ffn_forward(ffn, H), H)

    def test_relu_kills_negated_positives(self):
        d = 3
        ffn = FeedForward(layers=((-np.eye(d), np.zeros(d)), (np.eye(d), np.zeros(d))))
        H = np.abs(rng.standard_normal((d, 5))) + 0.1
        assert np.all(ffn_forward(ffn, H) == 0.0)

    def test_matches_per_column_loop(self):
        d, w, l = 4, 6, 7
        W1, b1 = rng.standard_normal((w, d)), rng.standard_normal(w)
        W2, b2 = rng.standard_normal((d, w)), rng.standard_normal(d)
        ffn = FeedForward(layers=((W1, b1), (W2, b2)))
        H = rng.standard_normal((d, l))
        got = ffn_forward(ffn, H)
        for t in range(l):
            col = W2 @ relu(W1 @ H[:, t] + b1) + b2
            assert np.max(np.abs(got[:, t] - col)) < 1e-12

    def test_bad_shapes_raise(self):
        with pytest.raises(DimensionError):
            FeedForward(layers=((np.zeros((3, 4)), np.zeros(3)), (np.zeros((2, 5)), np.zeros(2))))


class TestBlockForward:
    def test_pure_residual(self):
        block = TransformerBlock(heads=(), ffn=None)
        H = rng.standard_normal((5, 6))
        assert np.array_equal(block_forward(block, H), H)

    def test_constant_ffn_broadcast(self):
        d = 4
        c = rng.standard_normal(d)
        ffn = FeedForward(layers=((np.zeros((d, d)), c),))
        block = TransformerBlock(heads=(), ffn=ffn)
        H = rng.standard_normal((d, 5))
        assert np.max(np.abs(block_forward(block, H) - (H + c[:, None]))) < 1e-15

    def test_matches_manual_composition(self):
        d = 5
        head = random_head(d, scale=0.3)
        W1, b1 = rng.standard_normal((d, d)), rng.standard_normal(d)
        ffn = FeedForward(layers=((W1, b1),))
        block = TransformerBlock(heads=(head,), ffn=ffn)
        H = rng.standard_normal((d, 6))
        G = mha_forward([head], H) + H
        manual = ffn_forward(ffn, G) + G
        assert np.array_equal(block_forward(block, H), manual)


def passthrough_net(value_clip=10.0):
    """One-token net whose decoder reads the raw input coordinate."""
    return TransformerNet(
        input_dim=1,
        d_embd=5,
        token_count=1,
        input_map=np.array([[1.0]]),
        positional=np.zeros((5, 1)),
        blocks=(),
        output_clip=value_clip,
    )


class TestNetForward:
    def test_zero_block_passthrough(self):
        net = passthrough_net()
        assert net_forward(net, np.array([0.3])) == pytest.approx(0.3, abs=0)

    def test_zero_clip_forces_zero(self):
        net = passthrough_net(value_clip=0.0)
        for x in (-2.0, 0.4, 7.0):
            assert net_forward(net, np.array([x])) == 0.0

    def test_nonfinite_input_rejected(self):
        net = passthrough_net()
        with pytest.raises(InputError):
            net_forward(net, np.array([np.nan]))

    def test_overflow_names_block(self):
        d = 5
        big = FeedForward(layers=((np.full((d, d), 1e200), np.zeros(d)), (np.full((d, d), 1e200), np.zeros(d))))
        block = TransformerBlock(heads=(), ffn=big)
        net = TransformerNet(
            input_dim=1,
            d_embd=5,
            token_count=1,
            input_map=np.array([[1.0]]),
            positional=np.ones((5, 1)),
            blocks=(block,),
            output_clip=1.0,
        )
        with pytest.raises(EvaluationOverflowError) as err:
            net_forward(net, np.array([1.0]))
        assert err.value.block_index == 1

    def test_determinism_bit_identical(self):
        d = 5
        head = random_head(d, scale=0.2)
        block = TransformerBlock(heads=(head,), ffn=None)
        net = TransformerNet(
            input_dim=2,
            d_embd=d,
            token_count=3,
            input_map=rng.standard_normal((3, 2)),
            positional=rng.standard_normal((d, 3)),
            blocks=(block, block),
            output_clip=50.0,
        )
        x = rng.standard_normal(2)
        vals = {net_forward(net, x) for _ in range(5)}
        assert len(vals) == 1

    def test_decoder_reads_only_last_token_first_row(self):
        # Perturbing any other entry of the final embedding must not matter.
        l, d = 4, 5
        base = rng.standard_normal((d, l))
        read = np.clip(base[0, -1], -10, 10)
        for r in range(d):
            for t in range(l):
                if r == 0 and t == l - 1:
                    continue
                perturbed = base.copy()
                perturbed[r, t] += 1.23
                assert np.clip(perturbed[0, -1], -10, 10) == read


class TestModelSize:
    def _net(self, blocks):
        l = 2
        return TransformerNet(
            input_dim=1,
            d_embd=5,
            token_count=l,
            input_map=np.zeros((l, 1)),
            positional=np.zeros((5, l)),
            blocks=blocks,
            output_clip=1.0,
        )

    def test_formula_by_hand(self):
        heads = tuple(random_head(5, 0.1) for _ in range(2))
        layers = tuple((np.eye(5), np.zeros(5)) for _ in range(4))
        block = TransformerBlock(heads=heads, ffn=FeedForward(layers=layers))
        net = self._net((block,))
        assert model_size(net).formula == 1 * 25 * (3 * 2 + 4)

    def test_empty_net(self):
        assert model_size(self._net(())).formula == 0

    def test_linear_in_heads(self):
        def formula(m):
            heads = tuple(random_head(5, 0.1) for _ in range(m))
            block = TransformerBlock(heads=heads, ffn=None)
            return model_size(self._net((block,))).formula

        assert formula(2) == 2 * formula(1)

    def test_exact_entry_count(self):
        head = random_head(5, 0.1)
        ffn = FeedForward(layers=((rng.standard_normal((3, 5)), np.zeros(3)), (rng.standard_normal((5, 3)), np.zeros(5))))
        block = TransformerBlock(heads=(head,), ffn=ffn)
        net = self._net((block,))
        expected = net.input_map.size + 3 * 25 + (15 + 3) + (15 + 5)
        assert model_size(net).learnable_entries == expected


class TestSerialization:
    def test_round_trip_preserves_outputs(self):
        d = 5
        head = random_head(d, scale=0.2)
        ffn = FeedForward(layers=((rng.standard_normal((d, d)) * 0.1, rng.standard_normal(d) * 0.1),))
        block = TransformerBlock(heads=(head,), ffn=ffn)
        net = TransformerNet(
            input_dim=2,
            d_embd=d,
            token_count=3,
            input_map=rng.standard_normal((3, 2)),
            positional=rng.standard_normal((d, 3)),
            blocks=(block,),
            output_clip=25.0,
        )
        doc = net_to_json(net)
        clone = net_from_json(doc)
        for _ in range(10):
            x = rng.standard_normal(2)
            assert net_forward(net, x) == net_forward(clone, x)

    def test_loader_validates_shapes(self):
        net = passthrough_net()
        doc = net_to_json(net)
        doc["U"] = [[1.0], [2.0]]  # wrong row count for l=1
        with pytest.raises(DimensionError):
            net_from_json(doc)

    def test_weight_sup_norm_finite(self):
        net = passthrough_net()
        assert np.isfinite(weight_sup_norm(net))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_blocks_with_zero_weights_act_as_identity(d, l, seed):
    r = np.random.default_rng(seed)
    zero_head = AttentionHead(Q=np.zeros((d, d)), K=np.zeros((d, d)), V=np.zeros((d, d)))
    zero_ffn = FeedForward(layers=((np.zeros((d, d)), np.zeros(d)),))
    block = TransformerBlock(heads=(zero_head,), ffn=zero_ffn)
    H = r.standard_normal((d, l))
    assert np.array_equal(block_forward(block, H), H)
