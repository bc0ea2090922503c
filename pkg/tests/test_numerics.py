import math

import numpy as np
import pytest

from layerforge import numerics as nm


def test_rng_streams_are_stable_and_disjoint():
    a = nm.rng(3, 1).standard_normal(8)
    b = nm.rng(3, 1).standard_normal(8)
    c = nm.rng(3, 2).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # extra stream components open distinct substreams
    d = nm.rng(3, 2, 0).standard_normal(8)
    assert not np.array_equal(c, d)


def test_softmax_rows_hand_cases():
    out = nm.softmax_rows(np.zeros((1, 3), np.float32))
    assert np.allclose(out, 1.0 / 3.0, atol=1e-7)
    out = nm.softmax_rows(np.array([[math.log(2.0), 0.0]], np.float64))
    assert np.allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)
    out = nm.softmax_rows(np.array([[1000.0, 0.0]], np.float32))
    assert np.isfinite(out).all()
    assert np.allclose(out, [[1.0, 0.0]], atol=1e-6)


def test_softmax_rows_sum_property():
    g = nm.rng(11, 100)
    for _ in range(50):
        m = (g.standard_normal((5, 7)) * g.integers(1, 60)).astype(np.float32)
        s = nm.softmax_rows(m).sum(axis=1)
        assert np.abs(s - 1.0).max() < 1e-6


def test_softmax_rows_preserves_dtype():
    out = nm.softmax_rows(np.zeros((2, 2), np.float32))
    assert out.dtype == np.float32


def test_minmax_norm_hand_cases():
    out = nm.minmax_norm(np.array([2.0, 4.0, 6.0]))
    assert np.allclose(out, [0.0, 0.5, 1.0])
    # degenerate constant input maps to zeros
    out = nm.minmax_norm(np.array([5.0, 5.0]))
    assert np.array_equal(out, [0.0, 0.0])
    out = nm.minmax_norm(np.array([0.0, 1.0]))
    assert np.array_equal(out, [0.0, 1.0])


def test_minmax_norm_idempotent():
    g = nm.rng(12, 100)
    for _ in range(20):
        m = g.standard_normal((4, 4)).astype(np.float32)
        once = nm.minmax_norm(m)
        assert np.abs(nm.minmax_norm(once) - once).max() < 1e-7


def test_resize_bilinear_identity_and_constant():
    g = nm.rng(13, 100)
    m = g.random((5, 7), dtype=np.float32)
    assert np.array_equal(nm.resize_bilinear(m, 5, 7), m)
    c = np.full((4, 4), 0.7, np.float32)
    out = nm.resize_bilinear(c, 2, 2)
    assert np.allclose(out, 0.7, atol=1e-7)
    # down then up keeps a constant image constant
    up = nm.resize_bilinear(nm.resize_bilinear(c, 2, 2), 4, 4)
    assert np.allclose(up, 0.7, atol=1e-7)


def test_resize_bilinear_align_corners_ramp():
    m = np.array([[0.0], [1.0]], np.float32)
    out = nm.resize_bilinear(m, 4, 1)
    assert np.allclose(out[:, 0], [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], atol=1e-6)


def test_attention_single_key_returns_value():
    g = nm.rng(14, 100)
    q = g.standard_normal((3, 4)).astype(np.float32)
    k = g.standard_normal((1, 4)).astype(np.float32)
    v = g.standard_normal((1, 4)).astype(np.float32)
    out = nm.attention(q, k, v)
    assert np.abs(out - v).max() < 1e-6


def test_attention_hard_mask_selects_column():
    g = nm.rng(15, 100)
    q = g.standard_normal((2, 4)).astype(np.float32)
    k = g.standard_normal((5, 4)).astype(np.float32)
    v = g.standard_normal((5, 4)).astype(np.float32)
    mask = np.full((2, 5), -np.inf, np.float32)
    mask[:, 3] = 0.0
    out = nm.attention(q, k, v, mask)
    assert np.abs(out - v[3]).max() < 1e-6


def test_attention_zero_mask_is_no_mask():
    g = nm.rng(16, 100)
    q = g.standard_normal((3, 4)).astype(np.float32)
    k = g.standard_normal((5, 4)).astype(np.float32)
    v = g.standard_normal((5, 4)).astype(np.float32)
    a = nm.attention(q, k, v)
    b = nm.attention(q, k, v, np.zeros((3, 5), np.float32))
    assert np.array_equal(a, b)


def test_attention_identity_2x2_hand_case():
    eye = np.eye(2, dtype=np.float64)
    out = nm.attention(eye, eye, eye)
    # logits row 0 = [1, 0]/sqrt(2); softmax gives the blend weights
    w = math.exp(1.0 / math.sqrt(2.0))
    p = w / (w + 1.0)
    want = np.array([[p, 1.0 - p], [1.0 - p, p]])
    assert np.abs(out - want).max() < 1e-12


def test_attention_fully_masked_row_raises():
    q = np.zeros((1, 2), np.float32)
    k = np.zeros((3, 2), np.float32)
    v = np.zeros((3, 2), np.float32)
    mask = np.full((1, 3), -np.inf, np.float32)
    with pytest.raises(nm.DegenerateMaskError):
        nm.attention(q, k, v, mask)


def test_grad_check_quadratic():
    def f(x):
        return float(x[0] ** 2)

    err = nm.grad_check(f, np.array([3.0]), np.array([6.0]))
    assert err < 1e-9


def test_grad_check_constant_function():
    def f(x):
        e = np.exp(x - x.max())
        return float((e / e.sum()).sum())

    err = nm.grad_check(f, np.array([0.3, -1.2, 0.7]), np.zeros(3))
    assert err < 1e-7


def test_grad_check_rejects_bad_eps_and_shapes():
    with pytest.raises(ValueError):
        nm.grad_check(lambda x: 0.0, np.zeros(2), np.zeros(2), eps=0.0)
    with pytest.raises(nm.ShapeError):
        nm.grad_check(lambda x: 0.0, np.zeros(2), np.zeros(3))


def test_grad_check_nonfinite_evaluation():
    def f(x):
        return float("nan")

    with pytest.raises(nm.EvaluationError):
        nm.grad_check(f, np.zeros(1), np.zeros(1))


def test_ltens_round_trip(tmp_path):
    g = nm.rng(17, 100)
    for shape in ((3,), (2, 5), (2, 3, 4)):
        arr = g.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.ltens"
        nm.save_ltens(path, arr)
        back = nm.load_ltens(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)


def test_ltens_rejects_corrupt_magic(tmp_path):
    path = tmp_path / "bad.ltens"
    path.write_bytes(b"NOTLTENSxxxx")
    with pytest.raises(ValueError):
        nm.load_ltens(path)
