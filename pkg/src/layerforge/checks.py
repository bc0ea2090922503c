"""Named invariant suites behind `layerforge check`.

Each suite returns (name, passed, detail) triples. Functions reach sibling
modules through module attributes (harmonize.irh_blend, not a local
binding) so a deliberately injected fault in one implementation shows up
here by name.
"""

from __future__ import annotations

import numpy as np

from . import attention, diffusion, harmonize, layers, numerics, scenegen

Result = tuple[str, bool, str]


def _random_stack(g, k: int, size: int) -> layers.LayerStack:
    bg = layers.Layer(g.random((size, size, 3), dtype=np.float32),
                      np.ones((size, size), np.float32))
    fgs = [layers.Layer(g.random((size, size, 3), dtype=np.float32),
                        g.random((size, size), dtype=np.float32))
           for _ in range(k)]
    return layers.LayerStack(bg, fgs)


def suite_numerics() -> list[Result]:
    out = []
    g = numerics.rng(0, 100)
    m = g.standard_normal((40, 9)).astype(np.float32)
    rows = numerics.softmax_rows(m).sum(axis=1)
    out.append(("softmax rows sum to 1", bool(np.abs(rows - 1).max() < 1e-6),
                f"max dev {np.abs(rows - 1).max():.2e}"))
    n = numerics.minmax_norm(g.standard_normal((8, 8)))
    ok = 0.0 <= n.min() and n.max() <= 1.0 and n.max() == 1.0 and n.min() == 0.0
    const = numerics.minmax_norm(np.full((3, 3), 2.5, np.float32))
    ok = ok and (const == 0).all()
    out.append(("minmax_norm range and constant rule", bool(ok), ""))
    a = g.random((7, 5), dtype=np.float32)
    same = numerics.resize_bilinear(a, 7, 5)
    out.append(("resize same-size is exact", bool((same == a).all()), ""))
    up = numerics.resize_bilinear(a, 13, 9)
    corners = (up[0, 0] == a[0, 0] and up[-1, -1] == a[-1, -1]
               and up[0, -1] == a[0, -1] and up[-1, 0] == a[-1, 0])
    out.append(("resize keeps corners (align-corners)", bool(corners), ""))
    q = g.standard_normal((4, 6)).astype(np.float32)
    k = g.standard_normal((5, 6)).astype(np.float32)
    v = g.standard_normal((5, 6)).astype(np.float32)
    want = numerics.softmax_rows((q @ k.T / np.sqrt(np.float32(6)))) @ v
    got = numerics.attention(q, k, v)
    out.append(("attention matches softmax oracle",
                bool(np.abs(want - got).max() < 1e-6), ""))
    import tempfile, os
    with tempfile.TemporaryDirectory() as td:
        p = os.path.join(td, "x.ltens")
        t = g.standard_normal((3, 4, 2)).astype(np.float32)
        numerics.save_ltens(p, t)
        back = numerics.load_ltens(p)
        out.append(("LTENS round-trip exact",
                    bool(back.shape == t.shape and (back == t).all()), ""))
    return out


def suite_compositing() -> list[Result]:
    out = []
    g = numerics.rng(1, 101)
    worst = 0.0
    for i in range(200):
        stack = _random_stack(g, int(g.integers(0, 4)), int(g.integers(2, 17)))
        d = np.abs(layers.composite(stack)
                   - layers.composite_iterative(stack)).max()
        worst = max(worst, float(d))
    out.append(("composite equals iterative oracle", worst < 1e-6,
                f"max abs {worst:.2e} over 200 stacks"))
    bg_only = _random_stack(g, 0, 8)
    out.append(("empty stack returns background",
                bool((layers.composite(bg_only) == bg_only.background.color).all()),
                ""))
    stack = _random_stack(g, 2, 8)
    top = stack.foregrounds[-1]
    top.alpha[:] = 1.0
    img = layers.composite(stack)
    out.append(("opaque top layer wins everywhere",
                bool(np.abs(img - top.color).max() < 1e-6), ""))
    s1 = _random_stack(g, 2, 8)
    c0 = s1.foregrounds[0].color.copy()
    i0 = layers.composite(s1)
    s1.foregrounds[0].color = np.clip(c0 * 0.5, 0, 1)
    i1 = layers.composite(s1)
    s1.foregrounds[0].color = np.clip(c0 * 0.75, 0, 1)
    mid = layers.composite(s1)
    out.append(("composite affine in one layer's color",
                bool(np.abs((i0 + i1) / 2 - mid).max() < 1e-6), ""))
    alpha = (g.random((8, 8)) > 0.5).astype(np.float32)
    lat = g.standard_normal((4, 4, 3)).astype(np.float32)
    a2, l2 = layers.apply_edit(alpha, lat, [layers.EditOp("move", 0)])
    ok = (a2 == alpha).all() and (l2 == lat).all()
    a3, l3 = layers.apply_edit(alpha, lat, [layers.EditOp("flip_h", 0),
                                            layers.EditOp("flip_h", 0)])
    ok = ok and (a3 == alpha).all() and (l3 == lat).all()
    out.append(("edit identities (null move, double flip)", bool(ok), ""))
    return out


def suite_attention() -> list[Result]:
    out = []
    g = numerics.rng(2, 102)
    d, s, hw = 8, 6, 16
    proj = attention.CrossAttnProj((g.standard_normal((d, d)) / 3).astype(np.float32),
                                   (g.standard_normal((d, d)) / 3).astype(np.float32))
    z = g.standard_normal((hw, d)).astype(np.float32)
    emb = g.standard_normal((s, d)).astype(np.float32)
    cm = attention.cross_attn_map(z, emb, proj)
    out.append(("cross-attention map rows sum to 1",
                bool(np.abs(cm.map.sum(axis=1) - 1).max() < 1e-6), ""))
    zero_proj = attention.CrossAttnProj(np.zeros((d, d), np.float32), proj.wk)
    cm0 = attention.cross_attn_map(z, emb, zero_proj)
    out.append(("zero query projection gives uniform map",
                bool(np.abs(cm0.map - 1.0 / s).max() < 1e-6), ""))
    raw = attention.CrossAttnMap(g.random((hw, s), dtype=np.float32), 0)
    spans = [(1, 2), (3, 2)]
    m1 = attention.aggregate_global_maps([raw], spans, 4, 4)
    scaled = attention.CrossAttnMap(raw.map * 3.7, 0)
    m2 = attention.aggregate_global_maps([scaled], spans, 4, 4)
    dev = max(np.abs(a - b).max() for a, b in zip(m1.maps, m2.maps))
    out.append(("aggregation invariant to map rescaling", dev < 1e-6,
                f"max dev {dev:.2e}"))
    zf = g.standard_normal((hw, d)).astype(np.float32)
    zg = g.standard_normal((hw, d)).astype(np.float32)
    m = g.random(hw).astype(np.float32)
    low = attention.inject_global(zf, zg, m, t=100, t_g=850)
    hi1 = attention.inject_global(zf, zg, np.ones(hw, np.float32), 900, 850)
    out.append(("injection gates on the timestep",
                bool((low == zf).all() and np.abs(hi1 - zg).max() < 1e-6), ""))
    w = attention.SelfAttnWeights(*[(g.standard_normal((d, d)) / 3
                                     ).astype(np.float32) for _ in range(4)], 2)
    single = attention.layer_shared_attention([z], w)[0]
    plain, _ = attention.mha(z, z, w.wq, w.wk, w.wv, w.wo, 2)
    out.append(("single-layer LSSA is plain self-attention",
                bool(np.abs(single - plain.data).max() < 1e-7), ""))
    layers_in = [g.standard_normal((hw, d)).astype(np.float32) for _ in range(3)]
    base = attention.layer_shared_attention(layers_in, w, "global_only")
    mask = attention.lssa_mask(3, hw, "global_only")
    worst_kv = 0.0
    worst_glob = 0.0
    for trial in range(10):
        g2 = numerics.rng(3, 103, trial)
        pert = [g2.standard_normal((hw, d)).astype(np.float32)
                for _ in layers_in[:-1]] + [layers_in[-1]]
        # queries held fixed: masked columns must carry no signal at all
        joint = np.concatenate(pert, axis=0)
        for i, q in enumerate(layers_in):
            got_i, _ = attention.mha(q, joint, w.wq, w.wk, w.wv, w.wo,
                                     w.n_heads, mask=mask)
            worst_kv = max(worst_kv,
                           float(np.abs(got_i.data - base[i]).max()))
        # whole latents randomized: the global track must not move
        got = attention.layer_shared_attention(pert, w, "global_only")
        worst_glob = max(worst_glob, float(np.abs(got[-1] - base[-1]).max()))
    dev = max(worst_kv, worst_glob)
    out.append(("masked attention ignores non-global layers", dev < 1e-6,
                f"max dev {dev:.2e}"))
    cal = attention.init_cal(5, d, d, 2)
    m0 = attention.GlobalContextMap([g.random((4, 4), dtype=np.float32)], 0)
    ref = attention.refine_context(m0, z, cal)
    out.append(("zero-init refinement is the identity",
                bool((ref.maps[0] == m0.maps[0]).all() and ref.depth == 2), ""))
    return out


def _check_dims():
    return dict(h=4, w=4, d=8, s=6, f_hidden=8, n_blocks=1, n_heads=2,
                t_max=8, vocab_size=16, cal_blocks=1, max_layers=4)


def _check_example(params, seed: int) -> diffusion.TrainExample:
    g = numerics.rng(seed, 104)
    hw, d, s = params.hw, params.d, params.s
    seqs = []
    for content in ([4, 5], [6], [7]):
        ids = np.zeros(s, dtype=np.int64)
        ids[0] = 1
        ids[1:1 + len(content)] = content
        ids[1 + len(content)] = 2
        seqs.append(diffusion.TokenSeq(ids, len(content)))
    from .prompts import global_layout
    _, spans = global_layout(seqs, s)
    z0 = [g.standard_normal((hw, d)).astype(np.float32) for _ in range(4)]
    alphas = [g.random(hw).astype(np.float32) for _ in range(2)]
    return diffusion.TrainExample(z0, [None] * 4, seqs, spans[1:], alphas,
                                  ["", "", ""])


def suite_gradients() -> list[Result]:
    out = []
    dims = _check_dims()
    params = diffusion.init_denoiser(7, **dims)
    sched = diffusion.make_schedule(dims["t_max"], 1e-3, 5e-2, 4)
    gr = numerics.rng(7, 105)
    vec = diffusion.flatten_params(params)
    vec = vec + gr.standard_normal(vec.size) * 0.02  # nudge zero-inits off kinks
    ex = _check_example(params, 7)
    t, seed = 5, 99

    base = diffusion.unflatten_params(params, vec)
    # the layout term treats refined global maps as a constant target, so
    # the probe function has to hold them at their base-point values
    tgt = diffusion.layout_targets(base, ex, t, seed, sched)

    for li, name in ((0, "noise"), (1, "context"), (2, "layout")):
        def f(v, _li=li):
            p = diffusion.unflatten_params(params, v)
            ls = diffusion.combined_losses(p, ex, t, seed, sched,
                                           layout_target=tgt)
            return float(ls[_li].data)

        pv = diffusion.params_to_vars(base, dtype=np.float64)
        loss = diffusion.combined_losses(pv, ex, t, seed, sched,
                                         layout_target=tgt)[li]
        loss.backward()
        grads = []
        for _, v in diffusion.named_params(pv):
            grads.append((v.grad if v.grad is not None
                          else np.zeros_like(v.data)).ravel())
        analytic = np.concatenate(grads)
        err = numerics.grad_check(f, vec, analytic)
        out.append((f"{name} loss gradient vs finite differences", err < 1e-5,
                    f"rel err {err:.2e}"))
    return out


def suite_irh() -> list[Result]:
    out = []
    g = numerics.rng(4, 106)
    worst = 0.0
    for i in range(100):
        size = int(g.integers(2, 9))
        k = int(g.integers(0, 4))
        stack = _random_stack(g, k, size)
        want = layers.composite_iterative(stack)
        bg = stack.background.color[:, :, 0].reshape(-1, 1)
        fgs = [f.color[:, :, 0].reshape(-1, 1) for f in stack.foregrounds]
        alphas = [f.alpha[:, :, 0].reshape(-1) for f in stack.foregrounds]
        got = harmonize.irh_blend(bg, fgs, alphas).reshape(size, size)
        worst = max(worst, float(np.abs(got - want[:, :, 0]).max()))
    out.append(("irh_blend matches compositing oracle", worst < 1e-6,
                f"max abs {worst:.2e} over 100 cases"))
    hw, d = 16, 6
    bg = g.standard_normal((hw, d)).astype(np.float32)
    fg = g.standard_normal((hw, d)).astype(np.float32)
    zero = harmonize.irh_blend(bg, [fg], [np.zeros(hw, np.float32)])
    one = harmonize.irh_blend(bg, [fg], [np.ones(hw, np.float32)])
    out.append(("blend endpoints (alpha 0 -> bg, alpha 1 -> fg)",
                bool((zero == bg).all() and (one == fg).all()), ""))
    mask = (g.random(hw) > 0.5).astype(np.float32)
    fused = harmonize.irh_blend(bg, [fg], [mask])
    inside = mask.astype(bool)
    out.append(("binary alpha keeps foreground latent exactly",
                bool((fused[inside] == fg[inside]).all()), ""))
    plan = harmonize.HarmonizePlan([mask.reshape(4, 4)], [[]])
    ed = harmonize.irh_blend_edited(bg, [fg], plan, 4, 4)
    out.append(("empty edit plan blends identically",
                bool((ed == fused).all()), ""))
    # degenerate window: run_irh equals a plain continuation, bit for bit
    dims = _check_dims()
    params = diffusion.init_denoiser(11, **dims)
    sched = diffusion.make_schedule(dims["t_max"], 1e-3, 5e-2, 4)
    cond = g.standard_normal((dims["s"], dims["d"])).astype(np.float32)
    conds = [cond + 0.1 * i for i in range(4)]
    res = diffusion.sample_layers(params, sched, conds, [(1, 2), (3, 2)],
                                  seed=21, retain=(4, 4), inject=False)
    ret = harmonize.RetainedLatents(4, 4, dict(res.retained))
    plan2 = harmonize.HarmonizePlan(
        [g.random((dims["h"], dims["w"])).astype(np.float32) for _ in range(2)])
    irh = harmonize.run_irh(params, sched, ret, plan2, conds[-1])
    z = ret.get(4)[0].copy()
    taus = [t for t in diffusion.ddim_taus(sched) if t <= 4]
    for t_a, t_b in zip(taus[:-1], taus[1:]):
        eps, _ = diffusion.forward_batch(params, [z], t_a, [conds[-1]])
        z = np.asarray(diffusion.ddim_update(z, eps[0].data, t_a, t_b, sched),
                       dtype=np.float32)
    out.append(("degenerate window equals plain continuation",
                bool((irh.z0 == z).all()), ""))
    return out


def suite_pipeline() -> list[Result]:
    out = []
    worst = 0.0
    order_ok = True
    hash_ok = True
    for i in range(20):
        spec = scenegen.random_scene(400 + i, 2 + i % 3)
        scene = scenegen.make_scene(spec)
        stack, manifest = scenegen.decompose(scene.image, None, scene)
        recomp = layers.composite(stack)
        worst = max(worst, float(np.abs(recomp - scene.image).max()))
        depths = [scene.depths[j] for j in manifest.extraction_order]
        order_ok = order_ok and depths == sorted(depths)
        hash_ok = hash_ok and manifest.composite_hash == scenegen.image_hash(recomp)
    out.append(("render -> decompose -> recomposite is exact", worst == 0.0,
                f"max abs {worst:.2e} over 20 scenes"))
    out.append(("extraction follows ascending depth", order_ok, ""))
    out.append(("manifest hash matches recomposite", hash_ok, ""))
    spec = scenegen.random_scene(77, 3)
    scene = scenegen.make_scene(spec)
    ok = True
    words = {scenegen.SHAPE_WORD[s.kind] for s in scene.spec.shapes}
    for word in words:
        matches = [j for j, sh in enumerate(scene.spec.shapes)
                   if scenegen.SHAPE_WORD[sh.kind] == word
                   and scenegen.visible_mask(scene, j).any()]
        if not matches:
            continue
        front = min(matches, key=lambda j: scene.depths[j])
        box = scenegen.detect(scene.image, word, scene)
        bm = box.as_mask(scene.spec.canvas)
        vis = scenegen.visible_mask(scene, front)
        ok = ok and bool((~vis | bm).all())
    out.append(("detection box covers all visible pixels", ok, ""))
    return out


SUITES = {
    "numerics": suite_numerics,
    "compositing": suite_compositing,
    "attention": suite_attention,
    "gradients": suite_gradients,
    "irh": suite_irh,
    "pipeline": suite_pipeline,
}


def run_suites(which: str = "all") -> list[tuple[str, str, bool, str]]:
    """Returns (suite, check name, passed, detail) rows."""
    names = list(SUITES) if which == "all" else [which]
    rows = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; have "
                             f"{sorted(SUITES)} or 'all'")
        for check, ok, detail in SUITES[name]():
            rows.append((name, check, bool(ok), detail))
    return rows
