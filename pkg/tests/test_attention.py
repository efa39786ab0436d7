import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grcn import ConfigurationError, DimensionError, Tensor
from grcn.attention import AttentionWeights, attention_map, global_context_attend, init_attention
from grcn.gradcheck import check_gradients


def setup(seed, q=5, m=7, d=8, heads=1, keep_v=False, batch=()):
    rng = np.random.default_rng(seed)
    P = Tensor(rng.standard_normal((*batch, q, d)), requires_grad=True)
    V = Tensor(rng.standard_normal((m, d)), requires_grad=True)
    w = init_attention(d, rng, keep_value_proj=keep_v, num_heads=heads)
    return P, V, w


def reference(P, V, wp, wk, wv=None):
    """Single-head update written out with plain numpy."""
    d = P.shape[-1]
    s = (P @ wp.T) @ (V @ wk.T).T / np.sqrt(d)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    v = V if wv is None else V @ wv.T
    return P + a @ v


class TestGlobalContextAttend:
    @pytest.mark.parametrize("keep_v", [False, True])
    def test_matches_reference(self, keep_v):
        P, V, w = setup(0, keep_v=keep_v)
        out = global_context_attend(P, V, w).data
        wv = w.w_v.data if keep_v else None
        np.testing.assert_allclose(out, reference(P.data, V.data, w.w_p.data, w.w_k.data, wv), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]))
    def test_rows_sum_to_one(self, seed, heads):
        P, V, w = setup(seed, heads=heads, batch=(3,))
        for a in attention_map(P, V, w):
            assert a.shape == (3, 5, 7)
            np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-9)

    def test_zero_weights_add_context_mean(self):
        P, V, w = setup(1)
        w.w_p.data[:] = 0
        w.w_k.data[:] = 0
        out = global_context_attend(P, V, w).data
        np.testing.assert_allclose(out, P.data + V.data.mean(0), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_context_permutation_invariance(self, seed):
        P, V, w = setup(seed)
        perm = np.random.default_rng(seed + 1).permutation(V.shape[0])
        a = global_context_attend(P, V, w).data
        b = global_context_attend(P, Tensor(V.data[perm]), w).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_discarded_value_projection_equals_identity(self):
        P, V, w = setup(2)
        with_id = AttentionWeights(w.w_p, w.w_k, Tensor(np.eye(8)))
        np.testing.assert_allclose(global_context_attend(P, V, w).data,
                                   global_context_attend(P, V, with_id).data, atol=1e-12)

    @pytest.mark.parametrize("heads,keep_v", [(1, False), (2, True), (4, False)])
    def test_gradients(self, heads, keep_v):
        P, V, w = setup(3, heads=heads, keep_v=keep_v, batch=(2,))
        err = check_gradients(lambda: global_context_attend(P, V, w), [P, V, *w.tensors()])
        assert err < 1e-5

    def test_heads_split_channels(self):
        P, V, w = setup(4, d=6, heads=3)
        assert w.key_dim == 2
        assert len(attention_map(P, V, w)) == 3

    def test_init_bounds(self):
        w = init_attention(16, np.random.default_rng(0))
        assert np.abs(w.w_p.data).max() <= 0.25
        assert w.w_v is None

    def test_bad_head_count(self):
        with pytest.raises(ConfigurationError):
            init_attention(6, np.random.default_rng(0), num_heads=4)

    def test_dimension_mismatch(self):
        P, V, w = setup(5)
        with pytest.raises(DimensionError):
            global_context_attend(P, Tensor(np.zeros((4, 3))), w)
