import numpy as np
import pytest

from dign import fusion as fu
from dign import numerics as nm
from dign.errors import ConfigError, ContractError


def block(rng, dim=8, heads=2, d_ff=16):
    return fu.init_fusion_block(dim, heads, d_ff, rng)


def _block_oracle(q, kv, b):
    """Straight-line numpy re-implementation of the encoder block."""
    heads = b.heads
    dim = b.dim
    dh = dim // heads
    ctx = np.zeros((q.shape[0], dim))
    for h in range(heads):
        qh = q @ b.wq.data[h].T
        kh = kv @ b.wk.data[h].T
        vh = kv @ b.wv.data[h].T
        scores = qh @ kh.T / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        ctx[:, h * dh:(h + 1) * dh] = attn @ vh
    proj = ctx @ b.wo.data.T

    def ln(x, gain, bias):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-12) * gain + bias

    x1 = ln(q + proj, b.ln1_gain.data, b.ln1_bias.data)
    ff = np.maximum(x1 @ b.ffn_w1.data.T + b.ffn_b1.data, 0.0) @ b.ffn_w2.data.T + b.ffn_b2.data
    return ln(x1 + ff, b.ln2_gain.data, b.ln2_bias.data)


def test_single_key_attention_is_unit_weight():
    rng = np.random.default_rng(0)
    b = block(rng)
    q = nm.constant(rng.standard_normal((3, 8)))
    kv = nm.constant(rng.standard_normal((1, 8)))
    out, attn = fu.multihead_cross_attention(q, kv, b, return_weights=True)
    assert np.array_equal(attn.data, np.ones((2, 3, 1)))
    assert np.allclose(out.data, _block_oracle(q.data, kv.data, b), rtol=1e-10, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    b = block(rng)
    for _ in range(200):
        q = nm.constant(rng.standard_normal((int(rng.integers(1, 6)), 8)))
        kv = nm.constant(rng.standard_normal((int(rng.integers(1, 9)), 8)))
        _, attn = fu.multihead_cross_attention(q, kv, b, return_weights=True)
        assert np.allclose(attn.data.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
        assert (attn.data >= 0).all()


def test_single_head_matches_dense_oracle():
    rng = np.random.default_rng(2)
    b = block(rng, dim=6, heads=1, d_ff=12)
    q = nm.constant(rng.standard_normal((4, 6)))
    kv = nm.constant(rng.standard_normal((5, 6)))
    out = fu.multihead_cross_attention(q, kv, b)
    assert np.allclose(out.data, _block_oracle(q.data, kv.data, b), rtol=1e-10, atol=1e-12)


def test_multi_head_matches_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        b = block(rng, dim=8, heads=4, d_ff=16)
        q = nm.constant(rng.standard_normal((int(rng.integers(1, 7)), 8)))
        kv = nm.constant(rng.standard_normal((int(rng.integers(1, 9)), 8)))
        out = fu.multihead_cross_attention(q, kv, b)
        assert np.allclose(out.data, _block_oracle(q.data, kv.data, b), rtol=1e-9, atol=1e-11)


def test_key_permutation_invariance_exact():
    rng = np.random.default_rng(4)
    b = block(rng)
    for _ in range(300):
        q = nm.constant(rng.standard_normal((3, 8)))
        kv = rng.standard_normal((int(rng.integers(1, 12)), 8))
        perm = rng.permutation(kv.shape[0])
        out1 = fu.multihead_cross_attention(q, nm.constant(kv), b).data
        out2 = fu.multihead_cross_attention(q, nm.constant(np.ascontiguousarray(kv[perm])), b).data
        assert np.array_equal(out1, out2)


def test_empty_keys_error():
    rng = np.random.default_rng(5)
    b = block(rng)
    with pytest.raises(ContractError):
        fu.multihead_cross_attention(nm.constant(np.zeros((2, 8))),
                                     nm.constant(np.zeros((0, 8))), b)


def test_fuse_directions_not_symmetric():
    rng = np.random.default_rng(6)
    bt, bv = block(rng), block(rng)
    ht = nm.constant(rng.standard_normal((3, 8)))
    hv = nm.constant(rng.standard_normal((3, 8)))
    fused = fu.fuse(ht, hv, bt, bv)
    swapped = fu.fuse(hv, ht, bt, bv)
    assert not np.allclose(fused.text.data, swapped.visual.data)


def test_zero_inputs_zero_biases_give_zero_text():
    rng = np.random.default_rng(7)
    bt, bv = block(rng), block(rng)
    ht = nm.constant(np.zeros((3, 8)))
    hv = nm.constant(np.zeros((4, 8)))
    fused = fu.fuse(ht, hv, bt, bv)   # biases initialize to zero
    assert np.array_equal(fused.text.data, np.zeros((3, 8)))
    assert np.array_equal(fused.visual.data, np.zeros((4, 8)))


def test_fuse_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    bt = block(rng, dim=4, heads=2, d_ff=8)
    bv = block(rng, dim=4, heads=2, d_ff=8)
    ht = nm.param(rng.standard_normal((2, 4)) + 0.3)
    hv = nm.param(rng.standard_normal((3, 4)) + 0.3)
    probe_t = nm.constant(rng.standard_normal((2, 4)))
    probe_v = nm.constant(rng.standard_normal((3, 4)))

    def f():
        fused = fu.fuse(ht, hv, bt, bv)
        return nm.sum_all(fused.text * probe_t) + nm.sum_all(fused.visual * probe_v)

    params = ([("ht", ht), ("hv", hv)] + bt.named_parameters("bt")
              + bv.named_parameters("bv"))
    assert nm.finite_diff_check(f, params, h=1e-5) < 1e-5


def test_similarity_matrix_cases():
    a = nm.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
    b = nm.constant(np.array([[0.0, 1.0], [1.0, 0.0]]))
    s = fu.similarity_matrix(a, b)
    assert np.array_equal(s.data, np.array([[0.0, 1.0], [1.0, 0.0]]))
    gram = fu.similarity_matrix(a, a).data
    assert np.array_equal(gram, gram.T)


def test_similarity_matches_matmul_oracle():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((5, 4))
    s = fu.similarity_matrix(nm.constant(a), nm.constant(b)).data
    assert np.allclose(s, a @ b.T, rtol=1e-13, atol=1e-13)


def test_similarity_bilinear_scaling():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((5, 4))
    s1 = fu.similarity_matrix(nm.constant(2.5 * a), nm.constant(b)).data
    s0 = fu.similarity_matrix(nm.constant(a), nm.constant(b)).data
    assert np.allclose(s1, 2.5 * s0, rtol=1e-12, atol=1e-12)


def test_head_count_must_divide():
    with pytest.raises(ConfigError):
        fu.init_fusion_block(10, 4, 20, np.random.default_rng(0))
