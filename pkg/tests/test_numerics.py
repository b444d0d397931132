import math

import numpy as np
import pytest

from dign import numerics as nm
from dign.errors import ContractError, ShapeError


def test_matmul_identity():
    a = nm.constant([[1.0, 2.0], [3.0, 4.0]])
    out = nm.matmul(nm.constant(np.eye(2)), a)
    assert np.array_equal(out.data, a.data)


def test_matmul_hand_case():
    # 1*3 + 2*4 = 11
    out = nm.matmul(nm.constant([[1.0, 2.0]]), nm.constant([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_zero_annihilates():
    out = nm.matmul(nm.constant(np.zeros((2, 3))), nm.constant(np.arange(6.0).reshape(3, 2)))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_against_numpy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        b = rng.standard_normal((a.shape[1], int(rng.integers(1, 8))))
        out = nm.matmul(nm.constant(a), nm.constant(b))
        assert np.allclose(out.data, a @ b, rtol=1e-13, atol=1e-13)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nm.matmul(nm.constant(np.zeros((2, 3))), nm.constant(np.zeros((4, 2))))


def test_softmax_equal_logits():
    out = nm.softmax(nm.constant([0.0, 0.0]))
    assert np.array_equal(out.data, [0.5, 0.5])


def test_softmax_log3_case():
    out = nm.softmax(nm.constant([math.log(3.0), 0.0]))
    assert abs(out.data[0] - 0.75) < 1e-12
    assert abs(out.data[1] - 0.25) < 1e-12


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = rng.standard_normal(int(rng.integers(1, 9))) * 5
        c = float(rng.standard_normal()) * 10
        a = nm.softmax(nm.constant(v)).data
        b = nm.softmax(nm.constant(v + c)).data
        assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_softmax_simplex_property():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        v = rng.standard_normal(int(rng.integers(1, 12))) * float(rng.uniform(0.1, 50))
        out = nm.softmax(nm.constant(v)).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_empty_errors():
    with pytest.raises(ShapeError):
        nm.softmax(nm.constant(np.zeros(0)))


def test_relu_cases():
    out = nm.relu(nm.constant([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    allneg = nm.relu(nm.constant([-3.0, -0.5]))
    assert np.array_equal(allneg.data, np.zeros(2))


def test_relu_idempotent():
    rng = np.random.default_rng(3)
    v = rng.standard_normal(50)
    once = nm.relu(nm.constant(v)).data
    twice = nm.relu(nm.relu(nm.constant(v))).data
    assert np.array_equal(once, twice)


def test_l2_normalize_345():
    out = nm.l2_normalize(nm.constant([3.0, 4.0]))
    assert np.allclose(out.data, [0.6, 0.8], rtol=0, atol=1e-15)


def test_l2_normalize_zero_guard():
    out = nm.l2_normalize(nm.constant([0.0, 0.0]), eps=1e-12)
    assert np.array_equal(out.data, [0.0, 0.0])


def test_l2_normalize_unit_fixpoint():
    v = np.array([1.0, 0.0, 0.0])
    out = nm.l2_normalize(nm.constant(v))
    assert np.array_equal(out.data, v)


def test_l2_normalize_norm_property():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        v = rng.standard_normal(int(rng.integers(1, 10))) * float(rng.uniform(1e-3, 100))
        n = np.linalg.norm(nm.l2_normalize(nm.constant(v)).data)
        assert n == 0.0 or abs(n - 1.0) < 1e-9


def test_l2_normalize_eps_contract():
    with pytest.raises(ContractError):
        nm.l2_normalize(nm.constant([1.0]), eps=0.0)


def test_nonfinite_rejected():
    with pytest.raises(ContractError):
        nm.constant([1.0, float("inf")])
    with pytest.raises(ContractError):
        nm.constant([float("nan")])


def test_backward_quadratic():
    p = nm.param([1.0, -2.0, 3.0])
    loss = nm.sum_all(p * p) * 0.5
    grads = nm.backward(loss)
    assert np.array_equal(grads[p], p.data)


def test_backward_constant_loss_no_grads():
    loss = nm.constant(3.0)
    assert nm.backward(loss) == {}


def test_backward_requires_scalar():
    p = nm.param([1.0, 2.0])
    with pytest.raises(ContractError):
        nm.backward(p * 2.0)


def test_backward_accumulates_across_calls():
    p = nm.param([2.0])
    nm.backward(nm.sum_all(p * p))
    nm.backward(nm.sum_all(p * p))
    assert np.array_equal(p.grad, [8.0])
    nm.zero_grads([p])
    assert p.grad is None


def test_ops_deterministic_bitwise():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 7))
    b = rng.standard_normal((7, 3))
    r1 = nm.matmul(nm.constant(a), nm.constant(b)).data
    r2 = nm.matmul(nm.constant(a), nm.constant(b)).data
    assert np.array_equal(r1, r2)
    s1 = nm.softmax(nm.constant(a)).data
    s2 = nm.softmax(nm.constant(a)).data
    assert np.array_equal(s1, s2)


def test_finite_diff_quadratic_exact():
    rng = np.random.default_rng(6)
    p = nm.param(rng.standard_normal(6) + 2.0)

    def f():
        return nm.sum_all(p * p)

    assert nm.finite_diff_check(f, [("p", p)], h=1e-5) < 1e-9


def test_finite_diff_softmax_cross_entropy():
    rng = np.random.default_rng(7)
    w = nm.param(rng.standard_normal((3, 4)) + 0.5)
    x = nm.constant(rng.standard_normal(4))
    target = 1

    def f():
        logits = nm.einsum2("od,d->o", w, x) if False else nm.reshape(
            nm.matmul(w, nm.reshape(x, (4, 1))), (3,))
        lse = nm.logsumexp(logits)
        return lse - nm.sum_all(logits * nm.constant(np.eye(3)[target]))

    assert nm.finite_diff_check(f, [("w", w)], h=1e-5) < 1e-6


def test_finite_diff_relu_kink_exclusion():
    # one coordinate sits inside the 10h kink window and must be skipped
    h = 1e-5
    p = nm.param([1.0, 5e-5, -2.0])

    def f():
        return nm.sum_all(nm.relu(p))

    report = nm.finite_diff_report(f, [("p", p)], h=h)
    assert report.excluded == 1
    assert report.checked == 2
    assert report.max_rel_error < 1e-9


def test_einsum2_patterns_match_numpy():
    rng = np.random.default_rng(8)
    cases = [
        ("koi,ni->kno", (3, 5, 4), (7, 4)),
        ("hod,ad->hao", (2, 3, 6), (5, 6)),
        ("hod,bd->hbo", (2, 3, 6), (4, 6)),
        ("koe,kne->kno", (3, 5, 5), (3, 7, 5)),
        ("hao,hbo->hab", (2, 4, 3), (2, 6, 3)),
        ("ad,od->ao", (5, 6), (4, 6)),
        ("af,of->ao", (5, 8), (6, 8)),
        ("id,jd->ij", (3, 4), (5, 4)),
        ("ij,jk->ik", (3, 4), (4, 5)),
    ]
    for spec, sa, sb in cases:
        a = rng.standard_normal(sa)
        b = rng.standard_normal(sb)
        out = nm.einsum2(spec, nm.constant(a), nm.constant(b))
        assert np.array_equal(out.data, np.einsum(spec, a, b)), spec


def test_einsum2_gradients_finite_diff():
    rng = np.random.default_rng(9)
    cases = [
        ("koi,ni->kno", (2, 3, 4), (5, 4)),
        ("hod,ad->hao", (2, 3, 4), (5, 4)),
        ("koe,kne->kno", (2, 3, 3), (2, 5, 3)),
        ("hao,hbo->hab", (2, 4, 3), (2, 5, 3)),
        ("ad,od->ao", (4, 5), (3, 5)),
        ("ij,jk->ik", (3, 4), (4, 2)),
    ]
    for spec, sa, sb in cases:
        a = nm.param(rng.standard_normal(sa) + 0.3)
        b = nm.param(rng.standard_normal(sb) + 0.3)
        w = nm.constant(rng.standard_normal(np.einsum(spec, a.data, b.data).shape))

        def f():
            return nm.sum_all(nm.einsum2(spec, a, b) * w)

        assert nm.finite_diff_check(f, [("a", a), ("b", b)], h=1e-5) < 1e-6, spec


def test_einsum2_rejects_free_index():
    with pytest.raises(ShapeError):
        nm.einsum2("abz,bc->ac", nm.constant(np.zeros((2, 3, 4))), nm.constant(np.zeros((3, 5))))


def test_segment_sum_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        e = int(rng.integers(0, 20))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        seg = rng.integers(0, n, size=e)
        data = rng.standard_normal((k, e, d))
        plan = nm.make_segment_plan(seg, n)
        out = nm.segment_sum(nm.constant(data), plan).data
        expect = np.zeros((k, n, d))
        for j in range(e):
            expect[:, seg[j], :] += data[:, j, :]
        assert np.allclose(out, expect, rtol=1e-12, atol=1e-12)


def test_segment_sum_order_free():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 8))
        e = int(rng.integers(1, 24))
        seg = rng.integers(0, n, size=e)
        data = rng.standard_normal((2, e, 3))
        perm = rng.permutation(e)
        out1 = nm.segment_sum(nm.constant(data), nm.make_segment_plan(seg, n)).data
        out2 = nm.segment_sum(nm.constant(np.ascontiguousarray(data[:, perm, :])),
                              nm.make_segment_plan(seg[perm], n)).data
        assert np.array_equal(out1, out2)


def test_segment_sum_gradient():
    rng = np.random.default_rng(12)
    seg = np.array([0, 2, 0, 1])
    plan = nm.make_segment_plan(seg, 3)
    p = nm.param(rng.standard_normal((2, 4, 3)) + 0.5)
    w = nm.constant(rng.standard_normal((2, 3, 3)))

    def f():
        return nm.sum_all(nm.segment_sum(p, plan) * w)

    assert nm.finite_diff_check(f, [("p", p)], h=1e-5) < 1e-8


def test_attn_combine_matches_matmul():
    rng = np.random.default_rng(13)
    a = rng.random((2, 3, 6))
    v = rng.standard_normal((2, 6, 4))
    out = nm.attn_combine(nm.constant(a), nm.constant(v)).data
    assert np.allclose(out, np.matmul(a, v), rtol=1e-12, atol=1e-12)


def test_attn_combine_key_permutation_exact():
    rng = np.random.default_rng(14)
    for _ in range(200):
        b = int(rng.integers(1, 20))
        a = rng.random((2, 3, b))
        v = rng.standard_normal((2, b, 4))
        perm = rng.permutation(b)
        out1 = nm.attn_combine(nm.constant(a), nm.constant(v)).data
        out2 = nm.attn_combine(nm.constant(np.ascontiguousarray(a[:, :, perm])),
                               nm.constant(np.ascontiguousarray(v[:, perm, :]))).data
        assert np.array_equal(out1, out2)


def test_attn_combine_gradient():
    rng = np.random.default_rng(15)
    a = nm.param(rng.random((2, 3, 4)) + 0.2)
    v = nm.param(rng.standard_normal((2, 4, 5)) + 0.3)
    w = nm.constant(rng.standard_normal((2, 3, 5)))

    def f():
        return nm.sum_all(nm.attn_combine(a, v) * w)

    assert nm.finite_diff_check(f, [("a", a), ("v", v)], h=1e-5) < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(16)
    x = nm.param(rng.standard_normal((4, 6)) + 0.4)
    gain = nm.param(rng.uniform(0.5, 1.5, 6))
    bias = nm.param(rng.standard_normal(6) + 0.2)
    w = nm.constant(rng.standard_normal((4, 6)))

    def f():
        return nm.sum_all(nm.layer_norm(x, gain, bias, 1e-12) * w)

    err = nm.finite_diff_check(f, [("x", x), ("g", gain), ("b", bias)], h=1e-5)
    assert err < 1e-6


def test_logsumexp_matches_numpy():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((3, 7)) * 30
    out = nm.logsumexp(nm.constant(x)).data
    expect = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1)
    assert np.allclose(out, expect, rtol=1e-13, atol=1e-13)


def test_logsumexp_gradient():
    rng = np.random.default_rng(18)
    x = nm.param(rng.standard_normal((2, 5)) + 0.3)

    def f():
        return nm.sum_all(nm.logsumexp(x))

    assert nm.finite_diff_check(f, [("x", x)], h=1e-5) < 1e-6


def test_softmax_l2norm_gradients():
    rng = np.random.default_rng(19)
    x = nm.param(rng.standard_normal((3, 5)) + 0.3)
    w = nm.constant(rng.standard_normal((3, 5)))

    def f_soft():
        return nm.sum_all(nm.softmax(x) * w)

    def f_norm():
        return nm.sum_all(nm.l2_normalize(x) * w)

    assert nm.finite_diff_check(f_soft, [("x", x)], h=1e-5) < 1e-6
    assert nm.finite_diff_check(f_norm, [("x", x)], h=1e-5) < 1e-6


def test_take_concat_transpose_reshape_gradients():
    rng = np.random.default_rng(20)
    x = nm.param(rng.standard_normal((3, 4, 2)) + 0.3)
    idx = np.array([2, 0, 2, 1])
    w = nm.constant(rng.standard_normal((3, 4, 2)))

    def f():
        g = nm.take(x, idx, axis=1)                      # repeated gather
        h = nm.concat([g, g], axis=1)
        t = nm.transpose(h, (1, 0, 2))
        r = nm.reshape(t, (8, 6))
        back = nm.reshape(nm.transpose(nm.reshape(r, (8, 3, 2)), (1, 0, 2)), (3, 8, 2))
        return nm.sum_all(nm.take(back, np.arange(4), axis=1) * w)

    assert nm.finite_diff_check(f, [("x", x)], h=1e-5) < 1e-6


def test_dropout_deterministic_and_scaled():
    rng1 = np.random.default_rng(21)
    rng2 = np.random.default_rng(21)
    x = nm.constant(np.ones((100, 10)))
    a = nm.dropout(x, 0.5, rng1).data
    b = nm.dropout(x, 0.5, rng2).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert nm.dropout(x, 0.0, rng1) is x
