from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from vblora.core import (
    BANK_INIT_BOUND,
    ComposedFactors,
    LogitTensor,
    VectorBank,
    A_to_subvectors,
    B_to_subvectors,
    adapted_backward,
    adapted_forward,
    adapted_linear_backward,
    admix,
    complete_weights,
    compose_A,
    compose_B,
    compose_factors,
    init_bank,
    init_logits,
    merge_delta,
    merge_weight,
    selection_backward,
    tkam_backward,
    topk_admix,
    topk_selection,
)

BANK4 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]])


def _random_instance(seed, h=6, b=4, n=2, r=2, dtype=np.float64):
    rng = np.random.default_rng(seed)
    bank = rng.normal(size=(h, b)).astype(dtype)
    logits = rng.normal(size=(n, r, h)).astype(dtype)
    return rng, bank, logits


class TestInit:
    def test_bank_bounds_and_dtype(self):
        bank = init_bank(64, 16, seed=3)
        assert bank.values.shape == (64, 16)
        assert bank.values.dtype == np.float32
        assert np.all(np.abs(bank.values) <= BANK_INIT_BOUND)

    def test_bank_is_seeded(self):
        assert np.array_equal(init_bank(8, 4, 1).values, init_bank(8, 4, 1).values)
        assert not np.array_equal(init_bank(8, 4, 1).values, init_bank(8, 4, 2).values)

    def test_logit_shape_and_scale(self):
        lg = init_logits(1024, 4, 90, seed=0, b=256)
        assert lg.values.shape == (4, 4, 90)
        big = init_logits(4096, 8, 256, seed=0, b=16)
        assert abs(float(big.values.std()) - 0.01) < 1e-3

    def test_indivisible_dimension_names_both(self):
        with pytest.raises(ValueError, match=r"(?s)(1000.*256|256.*1000)"):
            init_logits(1000, 4, 90, seed=0, b=256)

    @pytest.mark.parametrize("shape", [(0, 4), (4,), (2, 3, 4)])
    def test_bad_bank_shape(self, shape):
        with pytest.raises(ValueError):
            VectorBank(np.zeros(shape))

    def test_nonfinite_bank(self):
        with pytest.raises(ValueError):
            VectorBank(np.array([[1.0, np.nan]]))

    def test_logit_tensor_side(self):
        with pytest.raises(ValueError):
            LogitTensor(np.zeros((1, 1, 2)), side="C")


class TestTopkAdmix:
    def test_worked_example(self):
        # softmax([2, 1]) = (e / (1 + e), 1 / (1 + e))
        sv = topk_admix(np.array([0.5, 2.0, -1.0, 1.0]), BANK4, k=2)
        assert sv.selected_indices.tolist() == [1, 3]
        np.testing.assert_allclose(sv.weights, [0.7310585786300049, 0.2689414213699951], rtol=1e-15)
        np.testing.assert_allclose(sv.values, [0.5378828427399902, 0.4621171572600098], rtol=1e-15)

    def test_ties_go_to_lower_index(self):
        sv = topk_admix(np.array([1.0, 3.0, 3.0, 3.0]), BANK4, k=2)
        assert sv.selected_indices.tolist() == [1, 2]
        np.testing.assert_allclose(sv.weights, [0.5, 0.5])

    def test_k1_copies_a_row(self):
        sv = topk_admix(np.array([0.0, 0.0, 0.0, 5.0]), BANK4, k=1)
        assert sv.weights.tolist() == [1.0]
        assert sv.values.tolist() == [2.0, -1.0]

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            topk_admix(np.zeros(4), BANK4, k=k)

    def test_nonfinite_logits(self):
        with pytest.raises(ValueError):
            topk_admix(np.array([0.0, np.inf, 0.0, 0.0]), BANK4, k=2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            topk_admix(np.zeros(3), BANK4, k=2)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 10), b=st.integers(1, 6), data=st.data())
    def test_matches_oracle(self, seed, h, b, data):
        k = data.draw(st.integers(1, h))
        rng = np.random.default_rng(seed)
        bank = rng.normal(size=(h, b))
        sigma = rng.normal(size=h) * 3
        sv = topk_admix(sigma, bank, k)
        u, idx, w = oracle.admix(sigma.tolist(), bank.tolist(), k)
        assert sv.selected_indices.tolist() == idx
        np.testing.assert_allclose(sv.weights, w, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(sv.values, u, rtol=1e-12, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8),
           dtype=st.sampled_from([np.float32, np.float64]))
    def test_weights_form_a_simplex(self, seed, k, dtype):
        rng = np.random.default_rng(seed)
        sel = topk_selection(rng.normal(size=(5, 8)) * 4, k, dtype=dtype)
        w = sel.weights
        assert w.dtype == dtype
        assert np.all(w >= 0) and np.all(w <= 1)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert np.all(np.diff(sel.soft, axis=-1) <= 0)

    def test_last_weight_is_recomputed(self):
        head = np.array([0.25, 0.5], dtype=np.float32)
        full = complete_weights(head)
        assert full.tolist() == [0.25, 0.5, 0.25]
        assert complete_weights(np.array([0.7, 0.6]))[-1] == 0.0

    def test_admix_in_float32_bank(self):
        rng, bank, logits = _random_instance(0, dtype=np.float32)
        sel = topk_selection(logits, 2, dtype=np.float32)
        out = admix(bank, sel.indices, sel.weights)
        assert out.dtype == np.float32


class TestTkamBackward:
    def test_matches_closed_form_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            h, b, k = 7, 3, 3
            bank, sigma, g = rng.normal(size=(h, b)), rng.normal(size=h), rng.normal(size=b)
            grad = tkam_backward(g, sigma, bank, k)
            d_sigma, d_bank = oracle.admix_backward(g.tolist(), sigma.tolist(), bank.tolist(), k)
            np.testing.assert_allclose(grad.grad_sigma, d_sigma, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(grad.grad_rows, np.array(d_bank)[grad.rows], rtol=1e-12)

    def test_worked_example(self):
        # g = (1, 0): dL/dsigma_1 = w1 (alpha_1 . g - u . g) = -w1 * u_0
        grad = tkam_backward(np.array([1.0, 0.0]), np.array([0.5, 2.0, -1.0, 1.0]), BANK4, 2)
        w1, w3 = 0.7310585786300049, 0.2689414213699951
        u0 = 0.5378828427399902
        np.testing.assert_allclose(grad.grad_sigma, [0.0, -w1 * u0, 0.0, w3 * (2.0 - u0)], rtol=1e-14)
        assert grad.rows.tolist() == [1, 3]
        np.testing.assert_allclose(grad.grad_rows, [[w1, 0.0], [w3, 0.0]], rtol=1e-15)

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_finite_differences(self, k):
        rng = np.random.default_rng(k)
        h, b = 6, 4
        bank, sigma, g = rng.normal(size=(h, b)), rng.normal(size=h), rng.normal(size=b)
        grad = tkam_backward(g, sigma, bank, k)
        loss = lambda s, B: float(g @ topk_admix(s, B, k).values)  # noqa: E731
        eps = 1e-6
        for s in range(h):
            e = np.zeros(h)
            e[s] = eps
            fd = (loss(sigma + e, bank) - loss(sigma - e, bank)) / (2 * eps)
            assert fd == pytest.approx(grad.grad_sigma[s], rel=1e-7, abs=1e-9)
        full = np.zeros((h, b))
        full[grad.rows] = grad.grad_rows
        for i in range(h):
            for c in range(b):
                e = np.zeros((h, b))
                e[i, c] = eps
                fd = (loss(sigma, bank + e) - loss(sigma, bank - e)) / (2 * eps)
                assert fd == pytest.approx(full[i, c], rel=1e-7, abs=1e-9)

    def test_unselected_exact_zero(self):
        rng, bank, logits = _random_instance(3, h=8)
        sel = topk_selection(logits, 2)
        g_logits, g_bank = selection_backward(rng.normal(size=logits.shape[:-1] + (4,)), bank, sel)
        mask = np.zeros(logits.shape, dtype=bool)
        np.put_along_axis(mask, sel.indices, True, axis=-1)
        assert np.all(g_logits[~mask] == 0.0)
        used = np.unique(sel.indices)
        unused = np.setdiff1d(np.arange(8), used)
        assert np.all(g_bank[unused] == 0.0)


class TestFactorLayout:
    def test_A_layout_matches_oracle(self):
        _, bank, logits = _random_instance(1, h=5, b=3, n=3, r=2)
        A = compose_A(logits, bank, 2)
        assert A.shape == (2, 9)
        np.testing.assert_allclose(A, oracle.compose_A(logits.tolist(), bank.tolist(), 2), rtol=1e-12)

    def test_B_is_A_transposed_for_the_same_logits(self):
        _, bank, logits = _random_instance(2)
        assert np.array_equal(compose_B(logits, bank, 2), compose_A(logits, bank, 2).T)

    def test_subvector_roundtrip(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(3, 12))
        np.testing.assert_array_equal(A_to_subvectors(A, 4).transpose(1, 0, 2).reshape(3, 12), A)
        B = rng.normal(size=(12, 3))
        assert A_to_subvectors(A, 4).shape == (3, 3, 4)
        assert B_to_subvectors(B, 4).shape == (3, 3, 4)
        np.testing.assert_array_equal(B_to_subvectors(B, 4), A_to_subvectors(B.T, 4))

    def test_factor_shapes(self):
        rng = np.random.default_rng(0)
        bank = rng.normal(size=(6, 4))
        f = compose_factors(rng.normal(size=(2, 3, 6)), rng.normal(size=(4, 3, 6)), bank, 2)
        assert (f.r, f.d_in, f.d_out) == (3, 8, 16)
        assert merge_delta(f).shape == (16, 8)

    def test_incompatible_factors(self):
        with pytest.raises(ValueError):
            ComposedFactors(np.zeros((2, 4)), np.zeros((4, 3)))

    def test_bank_mismatch(self):
        with pytest.raises(ValueError, match="h=6"):
            compose_A(np.zeros((2, 2, 5)), np.zeros((6, 4)), 2)


class TestAdaptedLinear:
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
    def test_unmerged_equals_merged(self, dtype, tol):
        rng = np.random.default_rng(4)
        bank = rng.normal(size=(6, 4)).astype(dtype)
        f = compose_factors(rng.normal(size=(2, 2, 6)), rng.normal(size=(3, 2, 6)), bank, 2)
        W = rng.normal(size=(8, 12)).astype(dtype)
        x = rng.normal(size=(5, 8)).astype(dtype)
        y1 = adapted_forward(x, W, f)
        y2 = x @ merge_weight(W, f)
        np.testing.assert_allclose(y1, y2, rtol=tol, atol=tol * np.abs(y2).max())

    def test_forward_matches_oracle(self):
        rng = np.random.default_rng(5)
        bank = rng.normal(size=(4, 2))
        la, lb = rng.normal(size=(2, 1, 4)), rng.normal(size=(2, 1, 4))
        f = compose_factors(la, lb, bank, 2)
        W, x = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
        A = oracle.compose_A(la.tolist(), bank.tolist(), 2)
        B = oracle.compose_B(lb.tolist(), bank.tolist(), 2)
        dW = oracle.matmul(B, A)
        merged = [[W[i][j] + dW[j][i] for j in range(4)] for i in range(4)]
        np.testing.assert_allclose(adapted_forward(x, W, f), oracle.matmul(x.tolist(), merged), rtol=1e-12)

    def test_shape_errors(self):
        f = ComposedFactors(np.zeros((2, 4)), np.zeros((6, 2)))
        with pytest.raises(ValueError):
            adapted_forward(np.zeros((3, 5)), np.zeros((5, 6)), f)
        with pytest.raises(ValueError):
            adapted_forward(np.zeros((3, 4)), np.zeros((4, 5)), f)

    def test_bilinear_backward(self):
        rng = np.random.default_rng(6)
        f = ComposedFactors(rng.normal(size=(2, 4)), rng.normal(size=(3, 2)))
        W, x, gy = rng.normal(size=(4, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        gx, gA, gB = adapted_backward(gy, x, W, f)
        eps = 1e-6

        def fd(fn, arr):
            out = np.zeros_like(arr)
            for idx in np.ndindex(*arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                plus = fn()
                arr[idx] = old - eps
                minus = fn()
                arr[idx] = old
                out[idx] = (plus - minus) / (2 * eps)
            return out

        loss = lambda: float(np.sum(gy * adapted_forward(x, W, f)))  # noqa: E731
        np.testing.assert_allclose(gx, fd(loss, x), rtol=1e-7)
        np.testing.assert_allclose(gA, fd(loss, f.A), rtol=1e-7)
        np.testing.assert_allclose(gB, fd(loss, f.B), rtol=1e-7)

    def test_full_chain_finite_differences(self):
        rng = np.random.default_rng(8)
        h, b, r, k = 6, 2, 2, 2
        bank = rng.normal(size=(h, b))
        la, lb = rng.normal(size=(2, r, h)), rng.normal(size=(3, r, h))
        W, x, gy = rng.normal(size=(4, 6)), rng.normal(size=(3, 4)), rng.normal(size=(3, 6))
        grads = adapted_linear_backward(gy, x, W, bank, la, lb, k)

        def loss():
            return float(np.sum(gy * adapted_forward(x, W, compose_factors(la, lb, bank, k))))

        eps = 1e-6
        checks = [(bank, grads["bank"]), (la, grads["logits_A"]), (lb, grads["logits_B"]), (x, grads["x"])]
        for arr, analytic in checks:
            for idx in np.ndindex(*arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                plus = loss()
                arr[idx] = old - eps
                minus = loss()
                arr[idx] = old
                fd = (plus - minus) / (2 * eps)
                assert fd == pytest.approx(analytic[idx], rel=1e-6, abs=1e-9), idx

    def test_float64_accumulation_for_large_banks(self):
        # b*h above 2**16: a float32 bank still gets one rounding of the float64 sum
        rng = np.random.default_rng(9)
        bank = rng.normal(size=(512, 256)).astype(np.float32)
        sel = topk_selection(rng.normal(size=(4, 512)), 8, dtype=np.float32)
        out = admix(bank, sel.indices, sel.weights)
        w64, rows = sel.weights.astype(np.float64), bank.astype(np.float64)[sel.indices]
        ref = np.zeros((4, 256))
        for j in range(8):
            ref += w64[:, j, None] * rows[:, j]
        assert np.array_equal(out, ref.astype(np.float32))
