"""Structured-token constructors: interaction heads, gates, band programs."""

import math

import numpy as np
import pytest

from attnforge.blocks import (
    D_EMBD,
    DataKernelPair,
    StructuredLayout,
    compile_ffn_program,
    make_addition_block,
    make_gating_ffn,
    make_interaction_head,
    make_psi_ffn,
    make_replace_ffn,
    one_minus_cos_step,
    op_affine,
    op_ramp,
    op_swap,
    op_trapezoid,
    parallelize_blocks,
    psi,
)
from attnforge.errors import (
    BoundViolationError,
    ParameterError,
    UnsupportedBlockError,
)
from attnforge.runtime import (
    TransformerBlock,
    attention_forward,
    block_forward,
    ffn_forward,
)

rng = np.random.default_rng(7)


def structured_matrix(layout: StructuredLayout, data: np.ndarray | None = None):
    """Embedding matrix with the layout's interaction rows and constant row."""
    H = layout.positional()
    if data is not None:
        H = H.copy()
        H[0:2, :] = data
    return H


def random_kernels(kappa: float) -> DataKernelPair:
    return DataKernelPair(
        QB=rng.uniform(-kappa, kappa, size=(2, D_EMBD)),
        KB=rng.uniform(-kappa, kappa, size=(2, D_EMBD)),
    )


class TestInteractionHead:
    def test_zero_kernels_give_zero_everywhere(self):
        layout = StructuredLayout(6, 1.0)
        head, _ = make_interaction_head(
            2, 5, 1, DataKernelPair(np.zeros((2, 5)), np.zeros((2, 5))), layout
        )
        H = structured_matrix(layout, rng.uniform(-1, 1, (2, 6)))
        assert np.all(attention_forward(head, H) == 0.0)

    def test_reads_constant_times_first_data_row(self):
        # QB row 1 = e5 picks the query's constant 1; KB row 1 = e1 reads
        # the key token's first data entry.
        layout = StructuredLayout(4, 1.0)
        qb = np.zeros((2, 5))
        qb[0, 4] = 1.0
        kb = np.zeros((2, 5))
        kb[0, 0] = 1.0
        head, C = make_interaction_head(1, 3, 2, DataKernelPair(qb, kb), layout)
        data = rng.uniform(0.05, 1.0, (2, 4))
        H = structured_matrix(layout, data)
        out = attention_forward(head, H)
        assert abs(out[1, 0] - data[0, 2]) <= 10 * C * np.finfo(float).eps
        mask = np.ones((5, 4), bool)
        mask[1, 0] = False
        assert np.all(out[mask] == 0.0)

    def test_randomized_exactness_and_payload(self):
        # Off-target columns must be *exactly* zero, target within 10 C eps.
        for trial in range(200):
            l = int(rng.integers(2, 65))
            m_bound = float(rng.uniform(0.2, 2.0))
            layout = StructuredLayout(l, m_bound)
            kernels = random_kernels(float(rng.uniform(0.05, 1.0)))
            t1, t2 = int(rng.integers(1, l + 1)), int(rng.integers(1, l + 1))
            row = int(rng.integers(1, 6))
            head, C = make_interaction_head(t1, t2, row, kernels, layout)
            data = rng.uniform(-m_bound, m_bound, (2, l))
            H = structured_matrix(layout, data)
            out = attention_forward(head, H)
            expected = max(float(kernels.QB @ H[:, t1 - 1] @ (kernels.KB @ H[:, t2 - 1])), 0.0)
            assert abs(out[row - 1, t1 - 1] - expected) <= 10 * C * np.finfo(float).eps
            mask = np.ones((5, l), bool)
            mask[row - 1, t1 - 1] = False
            assert np.all(out[mask] == 0.0)

    def test_weight_bound_order(self):
        for l in (2, 8, 64):
            layout = StructuredLayout(l, 1.5)
            kernels = random_kernels(0.8)
            head, _ = make_interaction_head(1, l, 3, kernels, layout)
            kappa = max(kernels.kappa, 1.0)
            m = layout.m_eff
            bound = 2 * 5**4 * kappa**2 * m**2 * l**2 / one_minus_cos_step(l) + 1
            worst = max(np.max(np.abs(head.Q)), np.max(np.abs(head.K)), np.max(np.abs(head.V)))
            assert worst <= bound

    def test_parameter_errors(self):
        layout = StructuredLayout(4, 1.0)
        kernels = random_kernels(0.5)
        with pytest.raises(ParameterError):
            make_interaction_head(0, 1, 1, kernels, layout)
        with pytest.raises(ParameterError):
            make_interaction_head(1, 5, 1, kernels, layout)
        with pytest.raises(ParameterError):
            make_interaction_head(1, 1, 6, kernels, layout)
        with pytest.raises(ParameterError):
            StructuredLayout(0, 1.0)
        with pytest.raises(ParameterError):
            StructuredLayout(4, -1.0)


class TestPsiFfn:
    def test_trapezoid_values(self):
        ffn = make_psi_ffn()
        for u, want in [(0.0, 1.0), (1.5, 0.5), (3.0, 0.0), (-3.0, 0.0), (-1.25, 0.75)]:
            h = np.array([[u], [0.3], [0.5], [0.5], [1.0]])
            out = ffn_forward(ffn, h)
            assert out[0, 0] == pytest.approx(want, abs=1e-15)
            assert np.all(out[1:, 0] == 0.0)

    def test_matches_closed_form_densely(self):
        ffn = make_psi_ffn()
        us = np.linspace(-4, 4, 10_000)
        H = np.zeros((5, us.size))
        H[0, :] = us
        H[4, :] = 1.0
        got = ffn_forward(ffn, H)[0, :]
        assert np.max(np.abs(got - psi(us))) < 1e-12


class TestReplaceFfn:
    def test_swap_examples(self):
        ffn = make_replace_ffn()
        for a, b in [(0.4, -0.2), (0.7, 0.7), (0.9, 0.0)]:
            h = np.array([[a], [b], [0.1], [0.2], [1.0]])
            out = h + ffn_forward(ffn, h)
            assert out[0, 0] == pytest.approx(b, abs=1e-15)
            assert out[1, 0] == 0.0
            assert np.all(out[2:, 0] == h[2:, 0])


class TestGatingFfn:
    def test_small_case_by_hand(self):
        layout = StructuredLayout(2, 1.0)
        ffn = make_gating_ffn(1, "prefix", layout)
        data = np.array([[0.3, -0.8], [0.2, 0.5]])
        H = structured_matrix(layout, data)
        out = ffn_forward(ffn, H)
        assert np.max(np.abs(out[:, 0] - H[:, 0])) < 1e-12
        assert np.all(out[0:2, 1] == 0.0)
        assert np.max(np.abs(out[2:, 1] - H[2:, 1])) < 1e-15

    def test_zero_data_is_fixed_point(self):
        layout = StructuredLayout(8, 1.0)
        ffn = make_gating_ffn(3, "suffix", layout)
        H = structured_matrix(layout)
        out = ffn_forward(ffn, H)
        assert np.max(np.abs(out - H)) < 1e-12

    def test_big_layout_kept_bitwise_dropped_exact(self):
        l, M = 64, 3.0
        layout = StructuredLayout(l, M)
        k = 40
        ffn = make_gating_ffn(k, "prefix", layout)
        data = rng.uniform(-M, M, (2, l))
        H = structured_matrix(layout, data)
        out = ffn_forward(ffn, H)
        assert np.max(np.abs(out[0:2, :k] - data[:, :k])) < 1e-12
        assert np.all(out[0:2, k:] == 0.0)

    def test_idempotent_on_data_rows(self):
        layout = StructuredLayout(16, 2.0)
        ffn = make_gating_ffn(5, "suffix", layout)
        H = structured_matrix(layout, rng.uniform(-2, 2, (2, 16)))
        once = ffn_forward(ffn, H)
        twice = ffn_forward(ffn, once)
        assert np.max(np.abs(twice[0:2] - once[0:2])) < 1e-12

    def test_requires_two_tokens(self):
        with pytest.raises(ParameterError):
            make_gating_ffn(1, "prefix", StructuredLayout(1, 1.0))


class TestBandPrograms:
    def test_affine_band_updates_only_band(self):
        l = 12
        layout = StructuredLayout(l, 1.0)
        ffn = compile_ffn_program([op_affine(4, 7, 2.0, -0.5)], layout, data_bound=1.0)
        data = rng.uniform(-1, 1, (2, l))
        H = structured_matrix(layout, data)
        out = H + ffn_forward(ffn, H)
        for t in range(l):
            if 4 <= t + 1 <= 7:
                assert out[0, t] == pytest.approx(2.0 * data[0, t] - 0.5, abs=1e-10)
            else:
                assert out[0, t] == data[0, t]
            assert out[1, t] == data[1, t]

    def test_affine_off_band_output_exactly_zero(self):
        l = 9
        layout = StructuredLayout(l, 1.0)
        ffn = compile_ffn_program([op_affine(3, 5, 0.25, 1.0)], layout, data_bound=1.0)
        H = structured_matrix(layout, rng.uniform(-1, 1, (2, l)))
        raw = ffn_forward(ffn, H)
        outside = [t for t in range(l) if not (3 <= t + 1 <= 5)]
        assert np.all(raw[:, outside] == 0.0)

    def test_swap_band(self):
        l = 10
        layout = StructuredLayout(l, 2.0)
        ffn = compile_ffn_program([op_swap(6, 10)], layout, data_bound=2.0)
        data = rng.uniform(-2, 2, (2, l))
        H = structured_matrix(layout, data)
        out = H + ffn_forward(ffn, H)
        for t in range(5):
            assert out[0, t] == data[0, t] and out[1, t] == data[1, t]
        for t in range(5, 10):
            assert out[0, t] == pytest.approx(data[1, t], abs=1e-10)
            assert abs(out[1, t]) < 1e-10

    def test_trapezoid_band_self_neutral(self):
        l, N = 8, 4
        gain = 3.0 * (N - 1)
        layout = StructuredLayout(l, 2.0)
        ffn = compile_ffn_program([op_trapezoid(3, 6, gain)], layout, data_bound=2.0)
        data = np.zeros((2, l))
        data[0, :2] = rng.uniform(-1, 1, 2)   # inputs: row2 zero
        data[1, 2:6] = rng.uniform(0.0, 2.0, 4)
        H = structured_matrix(layout, data)
        out = H + ffn_forward(ffn, H)
        for t in range(2, 6):
            assert out[0, t] == pytest.approx(float(psi(gain * (data[1, t] - 1.0))), abs=1e-12)
            assert abs(out[1, t]) < 1e-12
        assert np.all(ffn_forward(ffn, H)[:, [0, 1, 6, 7]] == 0.0)

    def test_ramp_band(self):
        l = 6
        layout = StructuredLayout(l, 6.0)
        r2, delta = 1.0, 0.125
        ffn = compile_ffn_program([op_ramp(2, 2, r2, delta)], layout, data_bound=6.0)
        for s, want in [(0.0, 1.0), (r2 - delta, 1.0), (r2 - delta / 2, 0.5), (r2, 0.0), (4.0, 0.0)]:
            data = np.zeros((2, l))
            data[0, 1] = s
            data[0, 0] = 0.7  # outside the band: must stay 0.7
            H = structured_matrix(layout, data)
            out = H + ffn_forward(ffn, H)
            assert out[0, 1] == pytest.approx(want, abs=1e-9)
            assert out[0, 0] == 0.7

    def test_ramp_strictly_outside_is_exact_zero(self):
        layout = StructuredLayout(4, 9.0)
        ffn = compile_ffn_program([op_ramp(1, 1, 0.25, 0.05)], layout, data_bound=9.0)
        data = np.zeros((2, 4))
        data[0, 0] = 4 * 0.25  # ||x-c|| = 2r  =>  s = 4 r^2
        H = structured_matrix(layout, data)
        out = H + ffn_forward(ffn, H)
        assert out[0, 0] == 0.0

    def test_multiple_bands_compose(self):
        l = 12
        layout = StructuredLayout(l, 1.0)
        ffn = compile_ffn_program(
            [op_affine(1, 3, 1.0, 0.25), op_swap(9, 12)], layout, data_bound=1.0
        )
        data = rng.uniform(-1, 1, (2, l))
        H = structured_matrix(layout, data)
        out = H + ffn_forward(ffn, H)
        assert np.allclose(out[0, :3], data[0, :3] + 0.25, atol=1e-10)
        assert np.allclose(out[0, 8:], data[1, 8:], atol=1e-10)
        assert np.allclose(out[0, 3:8], data[0, 3:8], atol=0)

    def test_min_depth_padding(self):
        layout = StructuredLayout(6, 1.0)
        ffn = compile_ffn_program([op_affine(2, 6, 1.0, -0.5)], layout, min_depth=3)
        assert ffn.depth == 3
        data = rng.uniform(-1, 1, (2, 6))
        H = structured_matrix(layout, data)
        out = H + ffn_forward(ffn, H)
        assert np.allclose(out[0, 1:], data[0, 1:] - 0.5, atol=1e-10)


class TestAdditionBlock:
    def layout(self, D, M=2.0):
        return StructuredLayout(2 * D, M)

    def fresh_H(self, layout, x):
        D = x.size
        data = np.zeros((2, 2 * D))
        data[0, :D] = x
        return structured_matrix(layout, data)

    def test_zero_shift_copies(self):
        D = 3
        layout = self.layout(D)
        block, C = make_addition_block(np.zeros(D), layout)
        x = rng.uniform(-0.9, 0.9, D)
        out = block_forward(block, self.fresh_H(layout, x))
        tol = 10 * C * np.finfo(float).eps
        assert np.max(np.abs(out[0, D:] - x)) <= tol
        assert np.max(np.abs(out[0, :D] - x)) <= tol

    def test_componentwise_subtraction(self):
        D = 2
        layout = self.layout(D)
        block, C = make_addition_block(np.array([0.1, -0.2]), layout)
        out = block_forward(block, self.fresh_H(layout, np.array([0.3, 0.7])))
        tol = 10 * C * np.finfo(float).eps
        assert abs(out[0, 2] - 0.2) <= tol
        assert abs(out[0, 3] - 0.9) <= tol

    def test_inverse_composition_restores_x(self):
        D = 2
        layout = self.layout(D)
        c = np.array([0.15, -0.05])
        fwd, C1 = make_addition_block(c, layout)
        # second block reads the shifted slots and writes back into 1..D
        inv, C2 = make_addition_block(-c, layout, src=(D + 1, 2 * D), dst=(1, D))
        x = rng.uniform(-0.8, 0.8, D)
        out = block_forward(inv, block_forward(fwd, self.fresh_H(layout, x)))
        tol = 10 * max(C1, C2) * np.finfo(float).eps
        assert np.max(np.abs(out[0, :D] - x)) <= tol

    def test_bound_violation(self):
        layout = self.layout(2, M=1.0)
        with pytest.raises(BoundViolationError):
            make_addition_block(np.array([0.9, 0.0]), layout)


class TestParallelize:
    def single_head_block(self, layout, t1, t2):
        qb = np.zeros((2, 5))
        qb[0, 4] = 1.0
        kb = np.zeros((2, 5))
        kb[0, 0] = 1.0
        head, C = make_interaction_head(t1, t2, 2, DataKernelPair(qb, kb), layout)
        return TransformerBlock(heads=(head,), ffn=None, data_bound=layout.magnitude_bound), C

    def test_neutral_partner(self):
        l1 = 4
        layout1 = StructuredLayout(l1, 1.0)
        b1, _ = self.single_head_block(layout1, 2, 3)
        layout2 = StructuredLayout(3, 1.0)
        b2 = TransformerBlock(heads=(), ffn=None, data_bound=1.0)
        merged, mlay = parallelize_blocks(b1, layout1, b2, layout2)
        assert mlay.l == 7
        data = rng.uniform(-1, 1, (2, 7))
        H = structured_matrix(mlay, data)
        out = block_forward(merged, H)
        ref = block_forward(b1, structured_matrix(layout1, data[:, :l1]))
        assert np.max(np.abs(out[0:2, :l1] - ref[0:2, :])) < 1e-9
        assert np.array_equal(out[0:2, l1:], data[:, l1:])

    def test_two_blocks_match_standalone(self):
        layout1 = StructuredLayout(4, 1.0)
        layout2 = StructuredLayout(4, 1.0)
        b1, C1 = self.single_head_block(layout1, 1, 4)
        b2, C2 = self.single_head_block(layout2, 3, 2)
        merged, mlay = parallelize_blocks(b1, layout1, b2, layout2)
        cmax = max(
            h.tag.cancellation for h in merged.heads
        )
        data = rng.uniform(-1, 1, (2, 8))
        H = structured_matrix(mlay, data)
        out = block_forward(merged, H)
        ref1 = block_forward(b1, structured_matrix(layout1, data[:, :4]))
        ref2 = block_forward(b2, structured_matrix(layout2, data[:, 4:]))
        tol = 10 * max(C1, C2, cmax) * np.finfo(float).eps
        assert np.max(np.abs(out[0:2, :4] - ref1[0:2])) <= tol
        assert np.max(np.abs(out[0:2, 4:] - ref2[0:2])) <= tol

    def test_associativity_on_data_rows(self):
        lays = [StructuredLayout(3, 1.0), StructuredLayout(4, 1.0), StructuredLayout(5, 1.0)]
        blocks = [self.single_head_block(lay, 1, lay.l)[0] for lay in lays]
        left_inner, lil = parallelize_blocks(blocks[0], lays[0], blocks[1], lays[1])
        left, ll = parallelize_blocks(left_inner, lil, blocks[2], lays[2])
        right_inner, ril = parallelize_blocks(blocks[1], lays[1], blocks[2], lays[2])
        right, rl = parallelize_blocks(blocks[0], lays[0], right_inner, ril)
        assert ll.l == rl.l == 12
        data = rng.uniform(-1, 1, (2, 12))
        H = structured_matrix(ll, data)
        a = block_forward(left, H)
        b = block_forward(right, H)
        assert np.max(np.abs(a[0:2] - b[0:2])) < 1e-9

    def test_untagged_head_rejected(self):
        layout = StructuredLayout(3, 1.0)
        raw = TransformerBlock(
            heads=(
                __import__("attnforge.runtime", fromlist=["AttentionHead"]).AttentionHead(
                    Q=np.zeros((5, 5)), K=np.zeros((5, 5)), V=np.zeros((5, 5))
                ),
            ),
            ffn=None,
            data_bound=1.0,
        )
        with pytest.raises(UnsupportedBlockError):
            parallelize_blocks(raw, layout, raw, layout)


class TestLayoutInvariants:
    def test_interaction_terms_unit_norm(self):
        for l in (1, 2, 7, 64, 1000):
            layout = StructuredLayout(l, 1.0)
            terms = layout.interaction_terms()
            norms = np.sqrt(np.sum(terms**2, axis=0))
            assert np.max(np.abs(norms - 1.0)) < 1e-12

    def test_positional_matrix_shape_and_constant_row(self):
        layout = StructuredLayout(9, 1.0)
        P = layout.positional()
        assert P.shape == (5, 9)
        assert np.all(P[4] == 1.0)
        assert np.all(P[0:2] == 0.0)
