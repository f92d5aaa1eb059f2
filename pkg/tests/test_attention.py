import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csaseg import attention as A
from csaseg.errors import ConfigError, DimensionError
from csaseg.tensor import softmax_rows

from conftest import random_tokens, random_weights


def loop_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    return [v / sum(e) for v in e]


def neighbourhood_mask(rows, cols, size):
    """Enumerate admissible (query, key) pairs one at a time."""
    n = rows * cols + 1
    allowed = np.zeros((n, n), dtype=bool)
    allowed[0, :] = True
    half = size // 2
    for i in range(rows * cols):
        for j in range(rows * cols):
            ri, ci = divmod(i, cols)
            rj, cj = divmod(j, cols)
            if abs(ri - rj) <= half and abs(ci - cj) <= half:
                allowed[1 + i, 1 + j] = True
    return allowed


class TestModes:
    @pytest.mark.parametrize(
        "text, mode",
        [
            ("vanilla", A.Vanilla()),
            ("csa", A.CsaDual()),
            ("csa-q", A.CsaSingle("q")),
            ("csa-k", A.CsaSingle("k")),
            ("csa-id", A.CsaSingle("identity")),
            ("identity", A.Identity()),
            ("local:3", A.LocalWindow(3)),
            ("sharpen:0.5", A.Sharpened(0.5)),
            ("ensemble:4:9", A.RandomEnsemble(4, 9)),
            ("early:3", A.EarlyBorrow(3)),
        ],
    )
    def test_parse_and_format(self, text, mode):
        assert A.parse_mode(text) == mode
        assert A.format_mode(mode) == text

    @pytest.mark.parametrize("text", ["local:2", "local:0", "sharpen:-1", "ensemble:0:1", "early:0", "csa-x", "local"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            A.parse_mode(text)

    def test_weights_head_divisibility(self, rng):
        w = random_weights(rng)
        with pytest.raises(DimensionError):
            A.AttentionWeights(w.w_q, w.w_k, w.w_v, w.w_o, w.b_q, w.b_k, w.b_v, w.b_o, head_count=3)


class TestVanilla:
    def test_single_token(self, rng):
        w = random_weights(rng)
        s = A.vanilla_scores(random_tokens(rng, 1), w)
        np.testing.assert_array_equal(s, np.ones((4, 1, 1)))

    def test_zero_projections_are_uniform(self, rng):
        w = random_weights(rng, bias_scale=0.0)
        z = np.zeros_like(w.w_q)
        w0 = A.AttentionWeights(z, z, w.w_v, w.w_o, w.b_q, w.b_k, w.b_v, w.b_o, head_count=4)
        s = A.vanilla_scores(random_tokens(rng, 6), w0)
        np.testing.assert_allclose(s, 1 / 6, atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        s = A.vanilla_scores(random_tokens(rng, 5), random_weights(rng))
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)

    def test_per_head_loop_oracle(self, rng):
        x, w = random_tokens(rng, 5), random_weights(rng)
        s = A.vanilla_scores(x, w)
        q = x.astype(np.float64) @ w.w_q + w.b_q
        k = x.astype(np.float64) @ w.w_k + w.b_k
        hd = w.head_dim
        for h in range(w.head_count):
            cols = slice(h * hd, (h + 1) * hd)
            for i in range(5):
                logits = [float(q[i, cols] @ k[j, cols]) / math.sqrt(hd) for j in range(5)]
                np.testing.assert_allclose(s[h, i], loop_softmax(logits), atol=1e-6)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            A.vanilla_scores(random_tokens(rng, 3, d=8), random_weights(rng))


class TestCsa:
    def test_identity_projection_correlates_inputs(self, rng):
        x = random_tokens(rng, 6)
        s = A.csa_scores(x, np.eye(16, dtype=np.float32), heads=1, tau=4.0)
        expected = softmax_rows((x.astype(np.float64) @ x.T.astype(np.float64) / 4.0).astype(np.float32))
        np.testing.assert_allclose(s[0], expected, atol=1e-6)

    def test_identity_mode_matches_identity_projection(self, rng):
        x, w = random_tokens(rng, 6), random_weights(rng)
        s = A.compute_scores(A.CsaSingle("identity"), x, w)
        np.testing.assert_array_equal(s, A.csa_scores(x, np.eye(16, dtype=np.float32), 4))

    def test_normalised_diagonal_is_row_max(self, rng):
        x, w = random_tokens(rng, 9), random_weights(rng)
        s = A.csa_logits(x, w.w_q, 4, normalize=True)
        diag = np.diagonal(s, axis1=1, axis2=2)
        assert np.all(diag >= s.max(-1) - 1e-6)

    def test_symmetric_logits(self, rng):
        x, w = random_tokens(rng, 8), random_weights(rng)
        s = A.csa_logits(x, w.w_k, 4, bias=w.b_k)
        assert np.abs(s - s.transpose(0, 2, 1)).max() < 1e-6

    def test_dual_with_equal_projections_doubles(self, rng):
        x, w = random_tokens(rng, 7), random_weights(rng)
        same = A.AttentionWeights(w.w_q, w.w_q, w.w_v, w.w_o, w.b_q, w.b_q, w.b_v, w.b_o, head_count=4)
        np.testing.assert_array_equal(A.csa_dual_scores(x, same), 2 * A.csa_scores(x, w.w_q, 4, bias=w.b_q))

    def test_dual_rows_sum_to_two(self, rng):
        s = A.csa_dual_scores(random_tokens(rng, 7), random_weights(rng))
        np.testing.assert_allclose(s.sum(-1), 2.0, atol=1e-6)

    def test_dual_recomposition(self, rng):
        x, w = random_tokens(rng, 7), random_weights(rng)
        parts = A.csa_scores(x, w.w_q, 4, bias=w.b_q) + A.csa_scores(x, w.w_k, 4, bias=w.b_k)
        assert np.abs(A.csa_dual_scores(x, w) - parts).max() <= 1e-7

    def test_custom_projection(self, rng):
        x, w = random_tokens(rng, 5), random_weights(rng)
        w_r = rng.standard_normal((16, 16)).astype(np.float32)
        np.testing.assert_array_equal(A.compute_scores(A.CsaSingle(w_r), x, w), A.csa_scores(x, w_r, 4))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 12))
    def test_permutation_equivariance(self, seed, l):
        r = np.random.default_rng(seed)
        x, w = random_tokens(r, l + 1), random_weights(r)
        perm = np.concatenate([[0], 1 + r.permutation(l)])
        s = A.csa_scores(x, w.w_q, 4)
        assert np.abs(A.csa_scores(x[perm], w.w_q, 4) - s[:, perm][:, :, perm]).max() < 1e-6


class TestIdentityAndLocal:
    def test_identity_scores(self):
        np.testing.assert_array_equal(A.identity_scores(0), [[1.0]])
        np.testing.assert_array_equal(A.identity_scores(3), np.eye(4))

    def test_window_one_patch_rows_are_identity(self, rng):
        x, w = random_tokens(rng, 13), random_weights(rng)
        s = A.local_window_scores(x, w, 1, (3, 4))
        for h in range(4):
            np.testing.assert_array_equal(s[h, 1:], A.identity_scores(12)[1:])

    def test_mask_against_enumeration(self):
        for rows, cols, size in ((4, 4, 3), (3, 5, 5), (2, 2, 1), (4, 3, 7)):
            np.testing.assert_array_equal(A.local_window_mask((rows, cols), size), neighbourhood_mask(rows, cols, size))

    def test_corner_patch_window_three(self, rng):
        x, w = random_tokens(rng, 17), random_weights(rng)
        s = A.local_window_scores(x, w, 3, (4, 4))
        corner = s[:, 1, :]
        assert np.all((corner > 0).sum(-1) == 4)
        assert np.all(corner[:, 0] == 0)  # class-token column closed for patches
        assert np.all(s[:, 0, :] > 0)  # class token sees everything

    def test_covering_window_is_softmax_over_patches(self, rng):
        x, w = random_tokens(rng, 13), random_weights(rng)
        s = A.local_window_scores(x, w, 7, (3, 4))
        logits = A.vanilla_logits(x, w)
        np.testing.assert_allclose(s[:, 0], A.vanilla_scores(x, w)[:, 0], atol=1e-6)
        np.testing.assert_allclose(s[:, 1:, 1:], softmax_rows(logits[:, 1:, 1:]), atol=1e-6)

    def test_grid_mismatch(self, rng):
        with pytest.raises(DimensionError):
            A.local_window_scores(random_tokens(rng, 10), random_weights(rng), 3, (3, 4))


class TestSharpened:
    def test_default_tau_is_vanilla(self, rng):
        x, w = random_tokens(rng, 9), random_weights(rng)
        np.testing.assert_array_equal(A.sharpened_scores(x, w, math.sqrt(w.head_dim)), A.vanilla_scores(x, w))

    def test_zero_tau_is_hard_max(self, rng):
        x, w = random_tokens(rng, 9), random_weights(rng)
        s = A.sharpened_scores(x, w, 0.0)
        assert set(np.unique(s)) == {0.0, 1.0}
        np.testing.assert_array_equal(s.argmax(-1), A.vanilla_logits(x, w).argmax(-1))

    def test_small_tau_converges_to_one_hot(self, rng):
        x, w = random_tokens(rng, 9), random_weights(rng)
        np.testing.assert_allclose(A.sharpened_scores(x, w, 1e-4), A.sharpened_scores(x, w, 0.0), atol=1e-6)


class TestEnsemble:
    def test_single_member_is_csa(self, rng):
        x = random_tokens(rng, 6)
        expected = A.csa_scores(x, A.ensemble_matrix(16, 5, 0), 4)
        np.testing.assert_array_equal(A.ensemble_scores(x, 1, 5, 4), expected)

    def test_deterministic(self, rng):
        x = random_tokens(rng, 6)
        np.testing.assert_array_equal(A.ensemble_scores(x, 3, 42, 4), A.ensemble_scores(x, 3, 42, 4))

    def test_average_of_members(self, rng):
        x = random_tokens(rng, 6)
        members = [A.csa_scores(x, A.ensemble_matrix(16, 8, i), 4) for i in range(4)]
        np.testing.assert_allclose(A.ensemble_scores(x, 4, 8, 4), np.mean(members, axis=0), atol=1e-7)
        np.testing.assert_allclose(A.ensemble_scores(x, 4, 8, 4).sum(-1), 1.0, atol=1e-6)

    def test_matrix_scale(self):
        m = A.ensemble_matrix(256, 3, 0)
        assert abs(m.var() * 256 - 1.0) < 0.02
        assert not np.array_equal(m, A.ensemble_matrix(256, 3, 1))
        assert not np.array_equal(m, A.ensemble_matrix(256, 4, 0))


class TestAggregate:
    def test_identity_passthrough(self, rng):
        x = random_tokens(rng, 5)
        w = A.AttentionWeights.identity(16, 4)
        out = A.aggregate(x, A.compute_scores(A.Identity(), x, w), w)
        np.testing.assert_array_equal(out, x)

    def test_uniform_scores_mean_pool(self, rng):
        x, w = random_tokens(rng, 5), random_weights(rng)
        out = A.aggregate(x, np.full((4, 5, 5), 0.2, dtype=np.float32), w)
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-6)

    def test_loop_oracle(self, rng):
        x, w = random_tokens(rng, 6), random_weights(rng)
        scores = A.vanilla_scores(x, w)
        v = x.astype(np.float64) @ w.w_v + w.b_v
        hd = w.head_dim
        mixed = np.zeros((6, 16))
        for h in range(4):
            for i in range(6):
                for j in range(6):
                    mixed[i, h * hd : (h + 1) * hd] += scores[h, i, j] * v[j, h * hd : (h + 1) * hd]
        expected = mixed @ w.w_o + w.b_o
        assert np.abs(A.aggregate(x, scores, w) - expected).max() < 1e-5

    def test_score_shape_checked(self, rng):
        x, w = random_tokens(rng, 5), random_weights(rng)
        with pytest.raises(DimensionError):
            A.aggregate(x, np.ones((4, 4, 4), dtype=np.float32), w)


class TestDispatch:
    def test_local_needs_grid(self, rng):
        with pytest.raises(ConfigError):
            A.compute_scores(A.LocalWindow(3), random_tokens(rng, 5), random_weights(rng))

    def test_borrow_needs_scores(self, rng):
        with pytest.raises(ConfigError):
            A.compute_scores(A.EarlyBorrow(1), random_tokens(rng, 5), random_weights(rng))

    def test_borrow_returns_given_scores(self, rng):
        x, w = random_tokens(rng, 5), random_weights(rng)
        borrowed = A.vanilla_scores(x, w)
        np.testing.assert_array_equal(A.compute_scores(A.EarlyBorrow(1), x, w, borrowed=borrowed), borrowed)
