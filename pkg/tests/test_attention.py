import numpy as np
import pytest

from layerforge import attention as at
from layerforge import autodiff as ad
from layerforge import numerics as nm
from layerforge.attention import (CrossAttnProj, GlobalContextMap,
                                  SelfAttnWeights, aggregate_global_maps,
                                  aggregate_maps_var, context_loss,
                                  context_loss_var, cross_attn_map, init_cal,
                                  inject_global, layer_shared_attention,
                                  layout_loss, layout_loss_var, lssa_mask,
                                  refine_context, refine_one_var)
from layerforge.numerics import ShapeError, rng


def _proj(seed, d, heads=2):
    g = rng(seed, 100)
    return CrossAttnProj(
        wq=(g.standard_normal((d, d)) * 0.5).astype(np.float32),
        wk=(g.standard_normal((d, d)) * 0.5).astype(np.float32),
        n_heads=heads)


def _weights(seed, d, heads=2):
    g = rng(seed, 100)
    w = lambda: (g.standard_normal((d, d)) * 0.3).astype(np.float32)
    return SelfAttnWeights(wq=w(), wk=w(), wv=w(), wo=w(), n_heads=heads)


# --- cross-attention maps ---------------------------------------------------

def test_cross_map_single_token_is_all_ones():
    z = rng(0, 100).standard_normal((6, 4)).astype(np.float32)
    emb = rng(1, 100).standard_normal((1, 4)).astype(np.float32)
    m = cross_attn_map(z, emb, _proj(2, 4)).map
    np.testing.assert_array_equal(m, np.ones((6, 1), np.float32))


def test_cross_map_zero_query_is_uniform():
    z = rng(3, 100).standard_normal((6, 4)).astype(np.float32)
    emb = rng(4, 100).standard_normal((5, 4)).astype(np.float32)
    proj = _proj(5, 4)
    proj.wq = np.zeros_like(proj.wq)
    m = cross_attn_map(z, emb, proj).map
    np.testing.assert_allclose(m, np.full((6, 5), 0.2), rtol=0, atol=1e-7)


def test_cross_map_matches_plain_softmax_single_head():
    d = 4
    z = rng(6, 100).standard_normal((3, d)).astype(np.float32)
    emb = rng(7, 100).standard_normal((2, d)).astype(np.float32)
    proj = _proj(8, d, heads=1)
    got = cross_attn_map(z, emb, proj).map
    logits = (z @ proj.wq) @ (emb @ proj.wk).T / np.sqrt(d)
    np.testing.assert_allclose(got, nm.softmax_rows(logits), rtol=0, atol=1e-6)


def test_cross_map_rows_sum_to_one():
    z = rng(9, 100).standard_normal((8, 6)).astype(np.float32)
    emb = rng(10, 100).standard_normal((5, 6)).astype(np.float32)
    m = cross_attn_map(z, emb, _proj(11, 6)).map
    np.testing.assert_allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-6)
    assert np.all(m >= 0)


def test_cross_map_dim_mismatch():
    z = rng(12, 100).standard_normal((4, 6)).astype(np.float32)
    emb = rng(13, 100).standard_normal((5, 4)).astype(np.float32)
    with pytest.raises(ShapeError):
        cross_attn_map(z, emb, _proj(14, 6))


# --- aggregation ------------------------------------------------------------

def test_aggregate_single_site_single_token_column():
    m = rng(15, 100).random((9, 4)).astype(np.float32)
    maps = [at.CrossAttnMap(m, site=0)]
    got = aggregate_global_maps(maps, [(2, 1)], h=3, w=3).maps[0]
    np.testing.assert_allclose(got.reshape(-1), nm.minmax_norm(m[:, 2]),
                               rtol=0, atol=1e-7)


def test_aggregate_duplicate_site_equals_single():
    m = rng(16, 100).random((9, 5)).astype(np.float32)
    one = aggregate_global_maps([at.CrossAttnMap(m, 0)], [(1, 3)], 3, 3)
    two = aggregate_global_maps([at.CrossAttnMap(m, 0), at.CrossAttnMap(m, 1)],
                                [(1, 3)], 3, 3)
    np.testing.assert_allclose(two.maps[0], one.maps[0], rtol=0, atol=1e-6)


def test_aggregate_hot_region_dominates():
    hw, s = 16, 6
    m = np.full((hw, s), 1e-3, dtype=np.float32)
    m[3:7, 2:4] = 1.0  # hot block over the span's tokens
    got = aggregate_global_maps([at.CrossAttnMap(m, 0)], [(2, 2)], 4, 4).maps[0]
    flat = got.reshape(-1)
    assert np.all(flat[3:7] > 0.99)
    assert np.all(flat[:3] < 0.01) and np.all(flat[7:] < 0.01)


def test_aggregate_empty_span_zero_map():
    m = rng(17, 100).random((9, 4)).astype(np.float32)
    got = aggregate_global_maps([at.CrossAttnMap(m, 0)], [(1, 2), (3, 0)], 3, 3)
    np.testing.assert_array_equal(got.maps[1], np.zeros((3, 3), np.float32))


def test_aggregate_scale_invariance():
    g = rng(18, 100)
    for _ in range(10):
        m = g.random((12, 5)).astype(np.float32)
        base = aggregate_maps_var([m], [(0, 3)])[0].data
        scaled = aggregate_maps_var([m * 7.25], [(0, 3)])[0].data
        np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-6)
        assert np.argmax(scaled) == np.argmax(base)


# --- context-aware refinement -----------------------------------------------

def test_refine_depth_zero_is_identity():
    maps = GlobalContextMap([rng(19, 100).random((3, 3)).astype(np.float32)], 0)
    z = rng(20, 100).standard_normal((9, 4)).astype(np.float32)
    params = init_cal(0, d=4, f_hidden=4, n_blocks=0)
    out = refine_context(maps, z, params)
    np.testing.assert_array_equal(out.maps[0], maps.maps[0])
    assert out.depth == 0


def test_refine_zero_init_head_is_identity():
    maps = GlobalContextMap([rng(21, 100).random((4, 4)).astype(np.float32)], 0)
    z = rng(22, 100).standard_normal((16, 6)).astype(np.float32)
    params = init_cal(1, d=6, f_hidden=8, n_blocks=2)
    out = refine_context(maps, z, params)
    np.testing.assert_array_equal(out.maps[0], maps.maps[0])
    assert out.depth == 2


def _ln_ref(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_refine_single_block_matches_reference():
    hw, d = 9, 4
    m = rng(23, 100).random(hw).astype(np.float32)
    z = rng(24, 100).standard_normal((hw, d)).astype(np.float32)
    params = init_cal(2, d=d, f_hidden=6, n_blocks=1, n_heads=2)
    blk = params.blocks[0]
    g = rng(25, 100)
    blk.wo = (g.standard_normal((d, d)) * 0.3).astype(np.float32)
    blk.w2 = (g.standard_normal((6, d)) * 0.3).astype(np.float32)
    params.w_out = (g.standard_normal((d, 1)) * 0.3).astype(np.float32)

    got = refine_one_var(m, z, params).data

    # straight-line reference with plain numpy
    h = m.reshape(hw, 1) @ params.w_in
    q_in = _ln_ref(h, blk.ln1_g, blk.ln1_b)
    kv = _ln_ref(z, blk.lnz_g, blk.lnz_b)
    q, k, v = q_in @ blk.wq, kv @ blk.wk, kv @ blk.wv
    heads = []
    for i in range(2):
        s = slice(i * 2, (i + 1) * 2)
        p = nm.softmax_rows(q[:, s] @ k[:, s].T / np.sqrt(2))
        heads.append(p @ v[:, s])
    h = h + np.concatenate(heads, axis=1) @ blk.wo
    f_in = _ln_ref(h, blk.ln2_g, blk.ln2_b)
    h = h + np.tanh(f_in @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
    want = np.clip(m.reshape(hw, 1) + h @ params.w_out, 0.0, 1.0).reshape(hw)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-5)


def test_refine_cal_block_gradients_match_fd():
    # unit-level check with a mixed tolerance: near-zero coordinates are
    # compared absolutely (central differences bottom out around 1e-12)
    hw, d = 4, 4
    m = rng(26, 100).random(hw).astype(np.float32)
    z = rng(27, 100).standard_normal((hw, d)).astype(np.float32)
    params = init_cal(3, d=d, f_hidden=4, n_blocks=1, n_heads=2)
    g = rng(28, 100)
    names = ["w_in", "w_out"]
    tensors = {"w_in": params.w_in, "w_out": params.w_out}
    for f in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
              "ln1_g", "ln1_b", "lnz_g", "lnz_b", "ln2_g", "ln2_b"):
        names.append(f)
        tensors[f] = getattr(params.blocks[0], f)
    # nudge the zero-init tensors so every branch carries signal
    for f in ("wo", "w2", "w_out"):
        tensors[f] += (g.standard_normal(tensors[f].shape) * 0.2).astype(np.float32)

    flat = np.concatenate([tensors[n].ravel() for n in names]).astype(np.float64)

    def rebuild(vec):
        p = init_cal(3, d=d, f_hidden=4, n_blocks=1, n_heads=2)
        pos = 0
        for n in names:
            ref = tensors[n]
            chunk = vec[pos: pos + ref.size].reshape(ref.shape)
            pos += ref.size
            if n in ("w_in", "w_out"):
                setattr(p, n, chunk)
            else:
                setattr(p.blocks[0], n, chunk)
        return p

    def loss_of(vec):
        p = rebuild(vec)
        out = refine_one_var(m.astype(np.float64), z.astype(np.float64), p)
        return ad.vsum(ad.mul(out, out))

    # rebuild() makes plain-array params, so wire Vars in to read gradients
    vars_by_name = {}
    pos = 0
    vvec = []
    for n in names:
        ref = tensors[n]
        v = ad.Var(flat[pos: pos + ref.size].reshape(ref.shape), requires_grad=True)
        vars_by_name[n] = v
        vvec.append(v)
        pos += ref.size
    p = init_cal(3, d=d, f_hidden=4, n_blocks=1, n_heads=2)
    p.w_in, p.w_out = vars_by_name["w_in"], vars_by_name["w_out"]
    for f in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
              "ln1_g", "ln1_b", "lnz_g", "lnz_b", "ln2_g", "ln2_b"):
        setattr(p.blocks[0], f, vars_by_name[f])
    out = refine_one_var(m.astype(np.float64), z.astype(np.float64), p)
    ad.vsum(ad.mul(out, out)).backward()
    analytic = np.concatenate([
        (v.grad if v.grad is not None else np.zeros_like(v.data)).ravel()
        for v in vvec])

    eps = 1e-5
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        fd = (float(loss_of(flat + e).data) - float(loss_of(flat - e).data)) / (2 * eps)
        assert abs(analytic[i] - fd) <= max(1e-7, 1e-5 * max(abs(analytic[i]), abs(fd))), \
            f"coord {i}: analytic {analytic[i]:.3e} fd {fd:.3e}"


# --- losses -----------------------------------------------------------------

def test_context_loss_zero_on_match():
    m = rng(29, 100).random((4, 4)).astype(np.float32)
    assert context_loss(GlobalContextMap([m], 0), [m.copy()]) == 0.0


def test_context_loss_sqrt_m_pixels():
    zero = np.zeros((4, 4), np.float32)
    alpha = np.zeros((4, 4), np.float32)
    alpha[1, 1:4] = 1.0  # m = 3 hot pixels
    got = context_loss(GlobalContextMap([zero], 0), [alpha])
    assert abs(got - np.sqrt(3.0)) < 1e-6


def test_context_loss_additivity():
    m = rng(30, 100).random((4, 4)).astype(np.float32)
    a = rng(31, 100).random((4, 4)).astype(np.float32)
    one = context_loss(GlobalContextMap([m], 0), [a])
    two = context_loss(GlobalContextMap([m, m.copy()], 0), [a, a.copy()])
    assert abs(two - 2 * one) < 1e-5


def test_context_loss_count_mismatch():
    m = rng(32, 100).random((4, 4)).astype(np.float32)
    with pytest.raises(ShapeError):
        context_loss(GlobalContextMap([m], 0), [m, m])


def test_layout_loss_zero_and_single_pixel():
    m = rng(33, 100).random((4, 4)).astype(np.float32)
    assert layout_loss(GlobalContextMap([m], 0), [m.copy()]) == 0.0
    bumped = m.copy()
    bumped[2, 3] += 0.25
    got = layout_loss(GlobalContextMap([m], 0), [bumped])
    assert abs(got - 0.25) < 1e-6


def test_layout_loss_permutation_invariant():
    g = rng(34, 100)
    gms = [g.random((3, 3)).astype(np.float32) for _ in range(3)]
    fms = [g.random((3, 3)).astype(np.float32) for _ in range(3)]
    a = layout_loss(GlobalContextMap(gms, 0), fms)
    perm = [2, 0, 1]
    b = layout_loss(GlobalContextMap([gms[i] for i in perm], 0),
                    [fms[i] for i in perm])
    assert abs(a - b) < 1e-6


def test_layout_loss_detaches_global_side():
    g = rng(35, 100)
    gm = ad.Var(g.random(9).astype(np.float64), requires_grad=True)
    fm = ad.Var(g.random(9).astype(np.float64), requires_grad=True)
    layout_loss_var([gm], [fm]).backward()
    assert gm.grad is None
    assert fm.grad is not None and np.any(fm.grad != 0)


def test_context_loss_var_gradient_direction():
    g = rng(36, 100)
    m = ad.Var(g.random(9).astype(np.float64), requires_grad=True)
    a = g.random(9)
    context_loss_var([m], [a]).backward()
    diff = m.data - a
    want = diff / np.linalg.norm(diff)
    np.testing.assert_allclose(m.grad, want, rtol=1e-10, atol=0)


# --- global injection -------------------------------------------------------

def test_inject_global_endpoints():
    g = rng(37, 100)
    z_fg = g.standard_normal((9, 4)).astype(np.float32)
    z_g = g.standard_normal((9, 4)).astype(np.float32)
    ones, zeros = np.ones(9, np.float32), np.zeros(9, np.float32)
    np.testing.assert_array_equal(inject_global(z_fg, z_g, ones, 900, 850), z_g)
    np.testing.assert_array_equal(inject_global(z_fg, z_g, zeros, 900, 850), z_fg)


def test_inject_global_half_blend():
    g = rng(38, 100)
    z_fg = g.standard_normal((9, 4)).astype(np.float32)
    z_g = g.standard_normal((9, 4)).astype(np.float32)
    half = np.full(9, 0.5, np.float32)
    got = inject_global(z_fg, z_g, half, 850, 850)
    np.testing.assert_allclose(got, (z_fg + z_g) / 2, rtol=0, atol=1e-7)


def test_inject_global_identity_below_threshold():
    g = rng(39, 100)
    z_fg = g.standard_normal((9, 4)).astype(np.float32)
    z_g = g.standard_normal((9, 4)).astype(np.float32)
    m = g.random(9).astype(np.float32)
    got = inject_global(z_fg, z_g, m, 849, 850)
    assert got is z_fg


# --- layer-shared self-attention --------------------------------------------

def test_lssa_single_layer_equals_plain():
    d = 6
    z = rng(40, 100).standard_normal((8, d)).astype(np.float32)
    w = _weights(41, d)
    got = layer_shared_attention([z], w)[0]
    plain, _ = at.mha(z, z, w.wq, w.wk, w.wv, w.wo, w.n_heads)
    np.testing.assert_array_equal(got, plain.data.astype(np.float32))


def test_lssa_two_identical_layers_match_plain():
    d = 6
    z = rng(42, 100).standard_normal((8, d)).astype(np.float32)
    w = _weights(43, d)
    outs = layer_shared_attention([z, z.copy()], w)
    plain, _ = at.mha(z, z, w.wq, w.wk, w.wv, w.wo, w.n_heads)
    for got in outs:
        np.testing.assert_allclose(got, plain.data, rtol=0, atol=1e-6)


def test_lssa_mask_layout():
    m = lssa_mask(3, 4, "global_only")
    assert m.shape == (1, 12)
    assert np.all(np.isneginf(m[0, :8])) and np.all(m[0, 8:] == 0)
    assert lssa_mask(2, 4, "none") is None
    with pytest.raises(ValueError):
        lssa_mask(2, 4, "sideways")


def test_lssa_global_only_ignores_other_segments():
    d, hw, n = 6, 5, 3
    g = rng(44, 100)
    w = _weights(45, d)
    layers = [g.standard_normal((hw, d)).astype(np.float32) for _ in range(n)]
    base = layer_shared_attention(layers, w, mask_mode="global_only")
    mask = lssa_mask(n, hw, "global_only")
    for trial in range(20):
        gt = rng(46, 101, trial)
        bent = [z + gt.standard_normal(z.shape).astype(np.float32)
                for z in layers[:-1]] + [layers[-1]]
        # queries held fixed: every layer's rows must be bit-stable in effect
        joint = np.concatenate(bent, axis=0)
        for i, z in enumerate(layers):
            out, _ = at.mha(z, joint, w.wq, w.wk, w.wv, w.wo, w.n_heads,
                            mask=mask)
            np.testing.assert_allclose(out.data, base[i], rtol=0, atol=1e-6)
        # whole-latent perturbation: the global layer's output is untouched
        got = layer_shared_attention(bent, w, mask_mode="global_only")
        np.testing.assert_allclose(got[-1], base[-1], rtol=0, atol=1e-6)


def test_lssa_prose_variant_masks_global_queries_only():
    d, hw = 6, 4
    g = rng(47, 100)
    w = _weights(48, d)
    layers = [g.standard_normal((hw, d)).astype(np.float32) for _ in range(3)]
    base = layer_shared_attention(layers, w, mask_mode="global_only_prose")
    bent = [layers[0] + 1.0] + [z.copy() for z in layers[1:]]
    got = layer_shared_attention(bent, w, mask_mode="global_only_prose")
    # global layer sees only global keys and its own (unchanged) query
    np.testing.assert_allclose(got[-1], base[-1], rtol=0, atol=1e-6)
    # a non-global layer is unmasked, so it must feel the change
    assert np.max(np.abs(got[1] - base[1])) > 1e-4


def test_lssa_empty_batch_rejected():
    with pytest.raises(ShapeError):
        layer_shared_attention([], _weights(49, 4))
