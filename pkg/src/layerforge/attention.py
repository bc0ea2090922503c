"""Context-aware cross-attention and layer-shared self-attention.

Two mechanisms live here. The cross-attention side turns the global
sequence's attention maps into per-foreground spatial context maps:
extract softmax maps at designated sites, sum each foreground's token
columns, min-max normalize, then refine through N small attention blocks
that read the summed latent features. The self-attention side runs every
layer's query against keys/values built from the concatenation of all
layers, so content can flow between layers; an additive mask variant
restricts keys to the global segment for inversion.

All cores are written over the autodiff ops, so they accept numpy arrays
or Var nodes alike; numpy wrappers unwrap for the sampling path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_var
from .numerics import ShapeError, rng


@dataclass
class CrossAttnMap:
    map: np.ndarray  # hw x S, rows sum to 1
    site: int


@dataclass
class GlobalContextMap:
    maps: list[np.ndarray]  # one h x w map per foreground, values in [0,1]
    depth: int


@dataclass
class CrossAttnProj:
    wq: np.ndarray  # D x D
    wk: np.ndarray  # D x D
    n_heads: int = 2


@dataclass
class SelfAttnWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int = 2


@dataclass
class CALBlock:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    lnz_g: np.ndarray
    lnz_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # zero at init: block starts as identity
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray  # zero at init
    b2: np.ndarray


@dataclass
class ContextAwareLayerParams:
    w_in: np.ndarray  # 1 x D map embedding
    blocks: list[CALBlock] = field(default_factory=list)
    w_out: np.ndarray = None  # D x 1, zero at init
    n_heads: int = 2

    @property
    def depth(self) -> int:
        return len(self.blocks)


def init_cal(seed: int, d: int, f_hidden: int, n_blocks: int,
             n_heads: int = 2) -> ContextAwareLayerParams:
    g = rng(seed, 11)
    s = 1.0 / np.sqrt(d)

    def w(*shape):
        return (g.standard_normal(shape) * s).astype(np.float32)

    blocks = []
    for _ in range(n_blocks):
        blocks.append(CALBlock(
            ln1_g=np.ones(d, np.float32), ln1_b=np.zeros(d, np.float32),
            lnz_g=np.ones(d, np.float32), lnz_b=np.zeros(d, np.float32),
            wq=w(d, d), wk=w(d, d), wv=w(d, d),
            wo=np.zeros((d, d), np.float32),
            ln2_g=np.ones(d, np.float32), ln2_b=np.zeros(d, np.float32),
            w1=w(d, f_hidden), b1=np.zeros(f_hidden, np.float32),
            w2=np.zeros((f_hidden, d), np.float32),
            b2=np.zeros(d, np.float32)))
    return ContextAwareLayerParams(
        w_in=w(1, d), blocks=blocks,
        w_out=np.zeros((d, 1), np.float32), n_heads=n_heads)


def layer_norm(x, g, b, eps: float = 1e-5):
    """Row-wise layer norm as an autodiff composition."""
    x = as_var(x)
    mu = ad.vmean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.vmean(ad.mul(xc, xc), axis=-1, keepdims=True)
    xn = ad.div(xc, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(xn, g), b)


def mha(q_in, kv_in, wq, wk, wv, wo, n_heads: int, mask=None,
        want_maps: bool = False):
    """Multi-head attention; q_in Lq x D against kv_in Lk x D.

    Returns (out, maps) where maps is the per-head softmax list (empty
    unless requested). Heads split the model dim into contiguous slices.
    """
    q = ad.matmul(q_in, wq)
    k = ad.matmul(kv_in, wk)
    v = ad.matmul(kv_in, wv)
    d = q.data.shape[1]
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / float(np.sqrt(dh))
    outs, maps = [], []
    for h in range(n_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = ad.take(q, cols), ad.take(k, cols), ad.take(v, cols)
        logits = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
        if mask is not None:
            logits = ad.add(logits, mask)
        probs = ad.softmax_rows(logits)
        if want_maps:
            maps.append(probs)
        outs.append(ad.matmul(probs, vh))
    out = ad.matmul(ad.concat(outs, axis=1), wo)
    return out, maps


def head_mean(maps: list) -> Var:
    """Average per-head attention maps into one hw x S map."""
    total = maps[0]
    for m in maps[1:]:
        total = ad.add(total, m)
    return ad.mul(total, 1.0 / len(maps))


def cross_attn_map(z, global_emb, proj: CrossAttnProj, site: int = 0) -> CrossAttnMap:
    """Softmax(Q K^T / sqrt(d)) averaged over heads; Q from the latent,
    K from the global text embedding."""
    z = as_var(z)
    emb = as_var(global_emb)
    if z.data.shape[1] != proj.wq.shape[0]:
        raise ShapeError(f"latent dim {z.data.shape[1]} vs wq {proj.wq.shape}")
    if emb.data.shape[1] != proj.wk.shape[0]:
        raise ShapeError(f"embed dim {emb.data.shape[1]} vs wk {proj.wk.shape}")
    q = ad.matmul(z, proj.wq)
    k = ad.matmul(emb, proj.wk)
    d = q.data.shape[1]
    dh = d // proj.n_heads
    scale = 1.0 / float(np.sqrt(dh))
    maps = []
    for h in range(proj.n_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh = ad.take(q, cols), ad.take(k, cols)
        maps.append(ad.softmax_rows(
            ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)))
    return CrossAttnMap(head_mean(maps).data.astype(np.float32), site)


def aggregate_maps_var(site_maps: list, spans: list[tuple[int, int]]) -> list[Var]:
    """Depth-0 context maps as flat hw vectors: per foreground, sum the
    span's token columns across sites, then min-max normalize."""
    total = as_var(site_maps[0])
    for m in site_maps[1:]:
        total = ad.add(total, as_var(m))
    out = []
    for start, length in spans:
        if length == 0:
            hw = total.data.shape[0]
            dt = total.data.dtype
            out.append(as_var(np.zeros(hw, dtype=dt)))
            continue
        cols = ad.take(total, (slice(None), slice(start, start + length)))
        out.append(ad.minmax_norm(ad.vsum(cols, axis=1)))
    return out


def aggregate_global_maps(maps: list[CrossAttnMap], spans: list[tuple[int, int]],
                          h: int, w: int) -> GlobalContextMap:
    flat = aggregate_maps_var([m.map for m in maps], spans)
    return GlobalContextMap([v.data.reshape(h, w).astype(np.float32) for v in flat],
                            depth=0)


def refine_one_var(m_flat, z_sum, params: ContextAwareLayerParams) -> Var:
    """One foreground map through N context-aware blocks.

    The map enters as an hw x 1 column embedded to model dim; each block is
    pre-norm residual MHA (K,V from the summed latent) then FFN; a
    zero-initialized head turns the hidden state into a delta on the map,
    clamped back to [0,1]. With zero-init heads the whole stack is the
    identity on the map.
    """
    m_flat = as_var(m_flat)
    hw = m_flat.data.shape[0]
    m_col = ad.reshape(m_flat, (hw, 1))
    if not params.blocks:
        return ad.reshape(m_col, (hw,))
    h = ad.matmul(m_col, params.w_in)
    z_sum = as_var(z_sum)
    for blk in params.blocks:
        q_in = layer_norm(h, blk.ln1_g, blk.ln1_b)
        kv_in = layer_norm(z_sum, blk.lnz_g, blk.lnz_b)
        att, _ = mha(q_in, kv_in, blk.wq, blk.wk, blk.wv, blk.wo,
                     params.n_heads)
        h = ad.add(h, att)
        f_in = layer_norm(h, blk.ln2_g, blk.ln2_b)
        f = ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(f_in, blk.w1), blk.b1)),
                             blk.w2), blk.b2)
        h = ad.add(h, f)
    delta = ad.matmul(h, params.w_out)
    refined = ad.clamp(ad.add(m_col, delta), 0.0, 1.0)
    return ad.reshape(refined, (hw,))


def refine_context(map0: GlobalContextMap, z_sum,
                   params: ContextAwareLayerParams) -> GlobalContextMap:
    out = []
    for m in map0.maps:
        h, w = m.shape
        v = refine_one_var(m.reshape(-1), z_sum, params)
        out.append(v.data.reshape(h, w).astype(np.float32))
    return GlobalContextMap(out, depth=params.depth)


def context_loss_var(map_vars: list, alphas: list) -> Var:
    """Sum over foregrounds of the L2 norm between the resized alpha and
    the refined map (both flat hw vectors)."""
    if len(map_vars) != len(alphas):
        raise ShapeError(f"{len(map_vars)} maps vs {len(alphas)} alphas")
    total = None
    for m, a in zip(map_vars, alphas):
        term = ad.l2_norm(ad.sub(as_var(a), as_var(m)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return as_var(np.float32(0.0))
    return total


def context_loss(maps: GlobalContextMap, alphas: list[np.ndarray]) -> float:
    flat_m = [m.reshape(-1) for m in maps.maps]
    flat_a = [np.asarray(a).reshape(-1) for a in alphas]
    for m, a in zip(flat_m, flat_a):
        if m.shape != a.shape:
            raise ShapeError(f"map {m.shape} vs alpha {a.shape}")
    return float(context_loss_var(flat_m, flat_a).data)


def layout_loss_var(global_maps: list, fg_maps: list) -> Var:
    """Sum over foregrounds of L2 between the global context map (detached
    supervision target) and the foreground layer's own map."""
    if len(global_maps) != len(fg_maps):
        raise ShapeError(f"{len(global_maps)} global vs {len(fg_maps)} fg maps")
    total = None
    for gm, fm in zip(global_maps, fg_maps):
        gm = as_var(gm).detach()
        term = ad.l2_norm(ad.sub(gm, as_var(fm)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return as_var(np.float32(0.0))
    return total


def layout_loss(global_maps: GlobalContextMap, fg_maps: list[np.ndarray]) -> float:
    flat_g = [m.reshape(-1) for m in global_maps.maps]
    flat_f = [np.asarray(m).reshape(-1) for m in fg_maps]
    for g_, f_ in zip(flat_g, flat_f):
        if g_.shape != f_.shape:
            raise ShapeError(f"global {g_.shape} vs fg {f_.shape}")
    return float(layout_loss_var(flat_g, flat_f).data)


def inject_global(z_fg: np.ndarray, z_global: np.ndarray, m: np.ndarray,
                  t: int, t_g: int) -> np.ndarray:
    """Blend global content into a foreground latent through its context
    map for the early (high-t) portion of sampling; identity below t_g."""
    if t < t_g:
        return z_fg
    m = np.asarray(m).reshape(-1, 1)
    if m.shape[0] != z_fg.shape[0]:
        raise ShapeError(f"map {m.shape[0]} vs latent rows {z_fg.shape[0]}")
    return (z_global * m + z_fg * (1.0 - m)).astype(z_fg.dtype)


MASK_MODES = ("none", "global_only", "global_only_prose")


def lssa_mask(n_layers: int, hw: int, mask_mode: str, dtype=np.float32) -> np.ndarray | None:
    """Additive logit mask for layer-shared attention.

    global_only: every query may attend only to the global segment's key
    columns (the last hw). global_only_prose: same column rule but applied
    to the global layer's own queries only, leaving other layers unmasked.
    """
    if mask_mode == "none":
        return None
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    n_tot = n_layers * hw
    row = np.full(n_tot, -np.inf, dtype=dtype)
    row[(n_layers - 1) * hw:] = 0.0
    return row[None, :]


def layer_shared_attention_var(layer_list: list, weights: SelfAttnWeights,
                               mask_mode: str = "none") -> list:
    """Joint-KV self-attention: keys/values come from the concatenation of
    all layers (global last), each layer keeps its own query rows."""
    if not layer_list:
        raise ShapeError("empty layer batch")
    vs = [as_var(z) for z in layer_list]
    hw = vs[0].data.shape[0]
    joint = vs[0] if len(vs) == 1 else ad.concat(vs, axis=0)
    mask = lssa_mask(len(vs), hw, mask_mode, dtype=vs[0].data.dtype)
    outs = []
    for i, z in enumerate(vs):
        m = mask
        if mask_mode == "global_only_prose" and i != len(vs) - 1:
            m = None
        out, _ = mha(z, joint, weights.wq, weights.wk, weights.wv, weights.wo,
                     weights.n_heads, mask=m)
        outs.append(out)
    return outs


def layer_shared_attention(layers: np.ndarray | list, weights: SelfAttnWeights,
                           mask_mode: str = "none") -> np.ndarray:
    arrs = [np.asarray(z) for z in layers]
    outs = layer_shared_attention_var(arrs, weights, mask_mode)
    return np.stack([o.data.astype(arrs[0].dtype) for o in outs])
