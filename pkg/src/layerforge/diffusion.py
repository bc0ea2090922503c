"""Toy latent diffusion stack.

A linear-beta schedule, a small transformer-style denoiser over flattened
hw x D latents, deterministic DDIM sampling and inversion, and the training
loop combining the noise, context and layout losses. The denoiser's
self-attention is layer-shared: each layer in a batch queries keys/values
built from every layer's hidden state, so a single-layer batch reduces to
plain self-attention. Cross-attention conditions each layer on its own text
embedding and exposes softmax maps at one designated block for the context
machinery.

Parameters live in plain dataclasses holding numpy arrays; the training
path swaps the arrays for autodiff Vars (the forward code is written over
autodiff ops, which accept both).
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_var
from .attention import (ContextAwareLayerParams, CrossAttnProj, SelfAttnWeights,
                        aggregate_maps_var, head_mean, init_cal, inject_global,
                        layer_norm, lssa_mask, mha, refine_one_var,
                        context_loss_var, layout_loss_var)
from .layers import LayerStack, composite
from .numerics import (EvaluationError, ShapeError, load_ltens, resize_bilinear,
                       rng, save_ltens)
from .prompts import (PromptTables, TokenSeq, Vocab, assemble_global,
                      embed_layer, tokenize)


# ------------------------------------------------------------------
# schedule

@dataclass
class NoiseSchedule:
    t_max: int
    beta_start: float
    beta_end: float
    ddim_steps: int
    alpha_bar: np.ndarray  # length t_max+1, float64, alpha_bar[0] = 1

    def coef(self, t: int) -> tuple[float, float]:
        """(sqrt(abar_t), sqrt(1 - abar_t)) as python floats so float32
        latents stay float32."""
        if not 0 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")
        ab = float(self.alpha_bar[t])
        return math.sqrt(ab), math.sqrt(1.0 - ab)


def make_schedule(t_max: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 2e-2, ddim_steps: int = 50) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if not (alpha_bar[1:] < alpha_bar[:-1]).all():
        raise ValueError("alpha_bar must decrease strictly")
    if not 0.0 < alpha_bar[-1] < 1.0:
        raise ValueError("alpha_bar[T] must lie in (0,1)")
    return NoiseSchedule(t_max, beta_start, beta_end, ddim_steps, alpha_bar)


def ddim_taus(sched: NoiseSchedule, steps: int | None = None) -> list[int]:
    """Descending timesteps T ... 0 (steps+1 values, endpoints included)."""
    steps = steps or sched.ddim_steps
    if not 1 <= steps <= sched.t_max:
        raise ValueError(f"ddim steps {steps} outside [1, {sched.t_max}]")
    taus = np.unique(np.rint(np.linspace(0, sched.t_max, steps + 1)).astype(int))
    return [int(t) for t in taus[::-1]]


# ------------------------------------------------------------------
# parameters

@dataclass
class CrossWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class DenoiserBlock:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    attn: SelfAttnWeights
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    cross: CrossWeights
    ln3_g: np.ndarray
    ln3_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class DenoiserParams:
    h: int
    w: int
    d: int
    s: int
    n_heads: int
    map_block: int
    max_layers: int
    w_in: np.ndarray
    b_in: np.ndarray
    time_table: np.ndarray  # (t_max+1) x D
    pos_table: np.ndarray  # hw x D
    blocks: list[DenoiserBlock]
    w_out: np.ndarray
    b_out: np.ndarray
    w_alpha: np.ndarray  # D x 1
    b_alpha: np.ndarray  # (1,)
    cal: ContextAwareLayerParams
    token_table: np.ndarray  # V x D
    assign_table: np.ndarray  # (max_layers+1) x D, zero at init
    codec_w: np.ndarray  # 3 x D, orthonormal rows, frozen

    @property
    def hw(self) -> int:
        return self.h * self.w

    def tables(self) -> PromptTables:
        return PromptTables(_data(self.token_table), _data(self.assign_table))


# assign-table rows: background 0, foregrounds 1..max_layers-1, global last
ASSIGN_BG = 0
def assign_fg(j: int) -> int:
    return 1 + j
def assign_global(max_layers: int) -> int:
    return max_layers


def _data(x):
    return x.data if isinstance(x, Var) else x


def init_denoiser(seed: int, *, h: int = 16, w: int = 16, d: int = 32,
                  s: int = 16, f_hidden: int | None = None, n_blocks: int = 2,
                  n_heads: int = 2, t_max: int = 1000, vocab_size: int = 64,
                  cal_blocks: int = 1, max_layers: int = 4,
                  map_block: int = 0) -> DenoiserParams:
    if d % n_heads:
        raise ShapeError(f"d={d} not divisible by heads={n_heads}")
    f_hidden = f_hidden or 2 * d
    g = rng(seed, 2)
    sc = 1.0 / math.sqrt(d)

    def mat(*shape):
        return (g.standard_normal(shape) * sc).astype(np.float32)

    def ones(n):
        return np.ones(n, np.float32)

    def zeros(*shape):
        return np.zeros(shape, np.float32)

    blocks = []
    for _ in range(n_blocks):
        blocks.append(DenoiserBlock(
            ln1_g=ones(d), ln1_b=zeros(d),
            attn=SelfAttnWeights(mat(d, d), mat(d, d), mat(d, d), mat(d, d),
                                 n_heads),
            ln2_g=ones(d), ln2_b=zeros(d),
            cross=CrossWeights(mat(d, d), mat(d, d), mat(d, d), mat(d, d)),
            ln3_g=ones(d), ln3_b=zeros(d),
            w1=mat(d, f_hidden), b1=zeros(f_hidden),
            w2=mat(f_hidden, d), b2=zeros(d)))
    q_codec, _ = np.linalg.qr(rng(seed, 6).standard_normal((d, 3)))
    return DenoiserParams(
        h=h, w=w, d=d, s=s, n_heads=n_heads, map_block=map_block,
        max_layers=max_layers,
        w_in=mat(d, d), b_in=zeros(d),
        time_table=(g.standard_normal((t_max + 1, d)) * 0.1).astype(np.float32),
        pos_table=(g.standard_normal((h * w, d)) * 0.1).astype(np.float32),
        blocks=blocks,
        w_out=mat(d, d), b_out=zeros(d),
        w_alpha=zeros(d, 1), b_alpha=zeros(1),
        cal=init_cal(seed, d, f_hidden, cal_blocks, n_heads),
        token_table=(rng(seed, 7).standard_normal((vocab_size, d)) * 0.2
                     ).astype(np.float32),
        assign_table=zeros(max_layers + 1, d),
        codec_w=q_codec.T.astype(np.float32))


def named_params(params: DenoiserParams) -> list[tuple[str, object]]:
    """Trainable leaves in a fixed order; codec is frozen and excluded."""
    out = [("w_in", params.w_in), ("b_in", params.b_in),
           ("time_table", params.time_table), ("pos_table", params.pos_table)]
    for bi, blk in enumerate(params.blocks):
        p = f"blocks.{bi}."
        out += [(p + "ln1_g", blk.ln1_g), (p + "ln1_b", blk.ln1_b),
                (p + "attn.wq", blk.attn.wq), (p + "attn.wk", blk.attn.wk),
                (p + "attn.wv", blk.attn.wv), (p + "attn.wo", blk.attn.wo),
                (p + "ln2_g", blk.ln2_g), (p + "ln2_b", blk.ln2_b),
                (p + "cross.wq", blk.cross.wq), (p + "cross.wk", blk.cross.wk),
                (p + "cross.wv", blk.cross.wv), (p + "cross.wo", blk.cross.wo),
                (p + "ln3_g", blk.ln3_g), (p + "ln3_b", blk.ln3_b),
                (p + "w1", blk.w1), (p + "b1", blk.b1),
                (p + "w2", blk.w2), (p + "b2", blk.b2)]
    out += [("w_out", params.w_out), ("b_out", params.b_out),
            ("w_alpha", params.w_alpha), ("b_alpha", params.b_alpha)]
    cal = params.cal
    out.append(("cal.w_in", cal.w_in))
    for bi, blk in enumerate(cal.blocks):
        p = f"cal.blocks.{bi}."
        out += [(p + "ln1_g", blk.ln1_g), (p + "ln1_b", blk.ln1_b),
                (p + "lnz_g", blk.lnz_g), (p + "lnz_b", blk.lnz_b),
                (p + "wq", blk.wq), (p + "wk", blk.wk), (p + "wv", blk.wv),
                (p + "wo", blk.wo),
                (p + "ln2_g", blk.ln2_g), (p + "ln2_b", blk.ln2_b),
                (p + "w1", blk.w1), (p + "b1", blk.b1),
                (p + "w2", blk.w2), (p + "b2", blk.b2)]
    out += [("cal.w_out", cal.w_out),
            ("token_table", params.token_table),
            ("assign_table", params.assign_table)]
    return out


def _set_by_name(params: DenoiserParams, name: str, value) -> None:
    obj = params
    parts = name.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], value)


def params_to_vars(params: DenoiserParams, dtype=np.float32) -> DenoiserParams:
    """Copy with every trainable leaf replaced by a tracked Var."""
    p = copy.deepcopy(params)
    for name, arr in named_params(p):
        _set_by_name(p, name, Var(np.asarray(arr, dtype=dtype),
                                  requires_grad=True))
    return p


def flatten_params(params: DenoiserParams, dtype=np.float64) -> np.ndarray:
    return np.concatenate([np.asarray(_data(a), dtype=dtype).ravel()
                           for _, a in named_params(params)])


def unflatten_params(params: DenoiserParams, vec: np.ndarray,
                     dtype=np.float64) -> DenoiserParams:
    p = copy.deepcopy(params)
    pos = 0
    for name, arr in named_params(p):
        a = _data(arr)
        n = a.size
        _set_by_name(p, name, vec[pos:pos + n].astype(dtype).reshape(a.shape))
        pos += n
    if pos != vec.size:
        raise ShapeError(f"vector length {vec.size} != param count {pos}")
    return p


def param_count(params: DenoiserParams) -> int:
    return sum(_data(a).size for _, a in named_params(params))


# ------------------------------------------------------------------
# forward pass

def forward_batch(params: DenoiserParams, z_list: list, t: int, conds: list,
                  *, mask_mode: str = "none", want_maps: bool = False):
    """Predict noise for a batch of layer latents at a shared timestep.

    z_list: per-layer hw x D (global last by convention); conds: matching
    S x D text embeddings. Returns (eps_list, map_list) where map_list has
    each layer's head-averaged cross-attention map from the designated
    block (None unless requested).
    """
    if len(z_list) != len(conds):
        raise ShapeError(f"{len(z_list)} latents vs {len(conds)} conditionings")
    n = len(z_list)
    hw = _data(z_list[0]).shape[0]
    time_row = ad.take(as_var(params.time_table), t)
    hs = []
    for z in z_list:
        h = ad.add(ad.add(ad.matmul(as_var(z), params.w_in), params.b_in),
                   ad.add(time_row, params.pos_table))
        hs.append(h)
    maps = [None] * n
    for bi, blk in enumerate(params.blocks):
        # layer-shared self-attention: joint keys/values over all layers
        q_ins = [layer_norm(h, blk.ln1_g, blk.ln1_b) for h in hs]
        joint = q_ins[0] if n == 1 else ad.concat(q_ins, axis=0)
        mask = lssa_mask(n, hw, mask_mode,
                         dtype=_data(z_list[0]).dtype) if mask_mode != "none" else None
        for i in range(n):
            m = mask
            if mask_mode == "global_only_prose" and i != n - 1:
                m = None
            att, _ = mha(q_ins[i], joint, blk.attn.wq, blk.attn.wk,
                         blk.attn.wv, blk.attn.wo, params.n_heads, mask=m)
            hs[i] = ad.add(hs[i], att)
        # per-layer cross-attention on its own conditioning
        for i in range(n):
            c_in = layer_norm(hs[i], blk.ln2_g, blk.ln2_b)
            grab = want_maps and bi == params.map_block
            att, head_maps = mha(c_in, as_var(conds[i]), blk.cross.wq,
                                 blk.cross.wk, blk.cross.wv, blk.cross.wo,
                                 params.n_heads, want_maps=grab)
            if grab:
                maps[i] = head_mean(head_maps)
            hs[i] = ad.add(hs[i], att)
        for i in range(n):
            f_in = layer_norm(hs[i], blk.ln3_g, blk.ln3_b)
            f = ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(f_in, blk.w1),
                                                blk.b1)), blk.w2), blk.b2)
            hs[i] = ad.add(hs[i], f)
    eps = [ad.add(ad.matmul(h, params.w_out), params.b_out) for h in hs]
    return eps, maps


# ------------------------------------------------------------------
# noising, DDIM

def q_sample(z0: np.ndarray, t: int, noise: np.ndarray,
             sched: NoiseSchedule) -> np.ndarray:
    a, b = sched.coef(t)
    return a * z0 + b * noise


def ddim_update(z_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule):
    """One deterministic DDIM move t -> t_next (either direction)."""
    a_t, b_t = sched.coef(t)
    a_n, b_n = sched.coef(t_next)
    if isinstance(z_t, Var) or isinstance(eps_hat, Var):
        z_t, eps_hat = as_var(z_t), as_var(eps_hat)
        z0_hat = ad.mul(ad.sub(z_t, ad.mul(eps_hat, b_t)), 1.0 / a_t)
        return ad.add(ad.mul(z0_hat, a_n), ad.mul(eps_hat, b_n))
    z0_hat = (z_t - b_t * eps_hat) / a_t
    return a_n * z0_hat + b_n * eps_hat


def ddim_step(params: DenoiserParams, sched: NoiseSchedule, z_list: list,
              t: int, t_next: int, conds: list, *, mask_mode: str = "none",
              inject_maps: list | None = None, t_g: int = 0,
              want_maps: bool = False):
    """One sampling step for a layer batch, with optional latent-level
    global injection. inject_maps: per-foreground flat hw maps; foregrounds
    sit at indices 1..n-2 (background first, global last)."""
    if t_next > t:
        raise ValueError(f"sampling expects t_next <= t, got {t}->{t_next}")
    z_in = [np.asarray(_data(z)) for z in z_list]
    n = len(z_in)
    if inject_maps is not None and n >= 3 and t >= t_g:
        z_g = z_in[-1]
        for j in range(n - 2):
            z_in[1 + j] = inject_global(z_in[1 + j], z_g, inject_maps[j], t, t_g)
    if t_next == t:
        return list(z_in), [None] * n
    eps, maps = forward_batch(params, z_in, t, conds, mask_mode=mask_mode,
                              want_maps=want_maps)
    z_next = [np.asarray(ddim_update(z_in[i], eps[i].data, t, t_next, sched),
                         dtype=z_in[i].dtype) for i in range(n)]
    return z_next, maps


@dataclass
class SampleResult:
    z0_list: list  # final per-layer latents, global last
    trajectory: list  # list over steps of per-layer latents (post-step)
    retained: dict  # t -> list of per-layer latents inside the window
    last_maps: list  # final refined per-foreground flat maps


def _refined_global_maps(params: DenoiserParams, site_map, z_global,
                         fg_spans: list) -> list[np.ndarray]:
    """Aggregate + refine the global layer's cross-attention map into
    per-foreground context maps (flat hw, numpy)."""
    if not fg_spans:
        return []
    raw = aggregate_maps_var([_data(site_map)], fg_spans)
    out = []
    for m in raw:
        out.append(refine_one_var(m.data, _data(z_global), params.cal)
                   .data.astype(np.float32))
    return out


def sample_layers(params: DenoiserParams, sched: NoiseSchedule, conds: list,
                  fg_spans: list, seed: int, *, steps: int | None = None,
                  t_g: int = 0, inject: bool = True, retain: tuple | None = None,
                  mask_mode: str = "none", init_latents: list | None = None,
                  collect: bool = False) -> SampleResult:
    """Layered DDIM sampling. conds: per-layer embeddings, global last
    (a single entry means plain single-image sampling). fg_spans: each
    foreground's (start, len) inside the global sequence. retain: (t_lo,
    t_hi) window; latents at steps inside it are stored for harmonization.
    """
    n = len(conds)
    hw, d = params.hw, params.d
    if init_latents is None:
        z = [rng(seed, 3, i).standard_normal((hw, d)).astype(np.float32)
             for i in range(n)]
    else:
        z = [np.asarray(zi, dtype=np.float32).copy() for zi in init_latents]
    taus = ddim_taus(sched, steps)
    retained: dict[int, list] = {}
    trajectory: list = []

    def keep(t, zs):
        if retain is not None and retain[0] <= t <= retain[1]:
            retained[t] = [zi.copy() for zi in zs]

    keep(taus[0], z)
    maps_prev = None
    for t_hi, t_lo in zip(taus[:-1], taus[1:]):
        inj = maps_prev if (inject and t_hi >= t_g) else None
        z, site_maps = ddim_step(params, sched, z, t_hi, t_lo, conds,
                                 mask_mode=mask_mode, inject_maps=inj,
                                 t_g=t_g, want_maps=n >= 2)
        if n >= 2 and site_maps[-1] is not None:
            maps_prev = _refined_global_maps(params, site_maps[-1], z[-1],
                                             fg_spans)
        keep(t_lo, z)
        if collect:
            trajectory.append([zi.copy() for zi in z])
    return SampleResult(z, trajectory, retained, maps_prev or [])


def sample_plain(params: DenoiserParams, sched: NoiseSchedule, cond,
                 seed: int, *, steps: int | None = None,
                 init_latent: np.ndarray | None = None, collect: bool = False):
    """Plain single-image DDIM sampling (the non-layered baseline)."""
    hw, d = params.hw, params.d
    if init_latent is None:
        z = rng(seed, 3, 0).standard_normal((hw, d)).astype(np.float32)
    else:
        z = np.asarray(init_latent, dtype=np.float32).copy()
    taus = ddim_taus(sched, steps)
    trajectory = []
    for t_hi, t_lo in zip(taus[:-1], taus[1:]):
        eps, _ = forward_batch(params, [z], t_hi, [cond])
        z = np.asarray(ddim_update(z, eps[0].data, t_hi, t_lo, sched),
                       dtype=np.float32)
        if collect:
            trajectory.append(z.copy())
    return z, trajectory


def ddim_invert(params: DenoiserParams, sched: NoiseSchedule, z0: np.ndarray,
                cond, *, steps: int | None = None) -> list[np.ndarray]:
    """Reversed DDIM recursion 0 -> T; the noise estimate at the lower
    step drives each move up. Returns the ascending trajectory, z0 first."""
    taus = ddim_taus(sched, steps)[::-1]  # ascending, 0 ... T
    z = np.asarray(z0, dtype=np.float32).copy()
    traj = [z.copy()]
    for t_lo, t_hi in zip(taus[:-1], taus[1:]):
        eps, _ = forward_batch(params, [z], t_lo, [cond])
        z = np.asarray(ddim_update(z, eps[0].data, t_lo, t_hi, sched),
                       dtype=np.float32)
        traj.append(z.copy())
    return traj


# ------------------------------------------------------------------
# alpha head, latent codec

def decode_alpha(params: DenoiserParams, z0: np.ndarray,
                 out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Per-cell opacity from a clean layer latent, in [0,1]; optionally
    resized to a pixel grid."""
    w = _data(params.w_alpha)
    b = _data(params.b_alpha)
    logits = np.asarray(_data(z0)) @ w + b
    a = 1.0 / (1.0 + np.exp(-logits[:, 0]))
    a = a.reshape(params.h, params.w).astype(np.float32)
    if out_hw is not None:
        a = resize_bilinear(a, out_hw[0], out_hw[1])
    return a


def encode_image(params: DenoiserParams, img: np.ndarray) -> np.ndarray:
    """Pixel image -> hw x D latent: bilinear resize to the latent grid,
    center to [-1,1], project through the frozen orthonormal codec."""
    img = np.asarray(img, dtype=np.float32)
    small = resize_bilinear(img, params.h, params.w)
    flat = (small.reshape(-1, 3) - 0.5) * 2.0
    return (flat @ _data(params.codec_w)).astype(np.float32)


def decode_image(params: DenoiserParams, z: np.ndarray,
                 out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Latent -> pixel image (inverse of encode_image up to the resize)."""
    flat = np.asarray(_data(z), dtype=np.float32) @ _data(params.codec_w).T
    img = (flat / 2.0 + 0.5).reshape(params.h, params.w, 3)
    img = np.clip(img, 0.0, 1.0)
    if out_hw is not None:
        img = resize_bilinear(img, out_hw[0], out_hw[1])
    return img.astype(np.float32)


def gray_fill(layer_color: np.ndarray, layer_alpha: np.ndarray) -> np.ndarray:
    """Flatten a transparent layer onto mid-gray for encoding."""
    a = layer_alpha if layer_alpha.ndim == 3 else layer_alpha[:, :, None]
    return (a * layer_color + (1.0 - a) * 0.5).astype(np.float32)


# ------------------------------------------------------------------
# training examples

@dataclass
class TrainExample:
    z0: list  # per-layer clean latents, global last
    conds: list  # matching S x D embeddings (numpy)
    seqs: list  # per-layer TokenSeq (background first, no global)
    fg_spans: list  # per-foreground (start, len) in the global sequence
    alphas: list  # per-foreground flat hw alphas on the latent grid
    prompts: list


def embed_stack_prompts(params: DenoiserParams, prompts: list[str],
                        vocab: Vocab):
    """Tokenize + embed per-layer prompts (background first) and assemble
    the global conditioning. Returns (conds incl global, seqs, fg_spans)."""
    tables = params.tables()
    seqs = [tokenize(p, vocab, params.s) for p in prompts]
    embs = []
    for li, seq in enumerate(seqs):
        idx = ASSIGN_BG if li == 0 else assign_fg(li - 1)
        embs.append(embed_layer(seq, idx, tables))
    global_emb, spans = assemble_global(embs, seqs, tables, params.s)
    conds = [e.matrix for e in embs] + [global_emb.matrix]
    return conds, seqs, spans[1:]


def encode_stack(params: DenoiserParams, stack: LayerStack,
                 vocab: Vocab) -> TrainExample:
    """Turn a ground-truth stack into latents + conditioning for training.
    Foreground layers are encoded gray-filled; the global slot holds the
    encoded composite."""
    zs = [encode_image(params, stack.background.color)]
    alphas = []
    for fg in stack.foregrounds:
        zs.append(encode_image(params, gray_fill(fg.color, fg.alpha)))
        a = resize_bilinear(fg.alpha[:, :, 0], params.h, params.w)
        alphas.append(a.reshape(-1).astype(np.float32))
    zs.append(encode_image(params, composite(stack)))
    prompts = list(stack.prompts)
    if len(prompts) != 1 + len(stack.foregrounds):
        raise ShapeError("stack prompts must cover background + foregrounds")
    conds, seqs, fg_spans = embed_stack_prompts(params, prompts, vocab)
    if len(stack.foregrounds) + 1 >= params.max_layers + 1:
        raise ShapeError("stack exceeds max_layers")
    return TrainExample(zs, conds, seqs, fg_spans, alphas, prompts)


# ------------------------------------------------------------------
# losses

def noise_loss(params: DenoiserParams, z0_list: list, t: int, conds: list,
               seed: int, *, forward_fn=forward_batch, sched: NoiseSchedule):
    """Mean squared error between drawn and predicted noise, one seeded
    Monte-Carlo draw per layer. Returns an autodiff scalar."""
    a, b = sched.coef(t)
    z_t, eps_true = [], []
    for i, z0 in enumerate(z0_list):
        z0d = np.asarray(_data(z0))
        noise = rng(seed, 5, i).standard_normal(z0d.shape).astype(z0d.dtype)
        eps_true.append(noise)
        z_t.append(a * z0d + b * noise)
    eps_hat, _ = forward_fn(params, z_t, t, conds)
    total = None
    count = 0
    for e_hat, e in zip(eps_hat, eps_true):
        diff = ad.sub(e_hat, e)
        sq = ad.vsum(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
        count += e.size
    return ad.mul(total, 1.0 / count)


def _conds_from_tables(params: DenoiserParams, ex: TrainExample) -> list:
    """Rebuild conditioning through the (possibly Var) embedding tables so
    gradients reach them. Mirrors embed_stack_prompts row for row."""
    tok = as_var(params.token_table)
    asn = as_var(params.assign_table)
    s = params.s
    conds = []
    interiors = []
    for li, seq in enumerate(ex.seqs):
        idx = ASSIGN_BG if li == 0 else assign_fg(li - 1)
        rows = ad.take(tok, seq.ids)
        if seq.content_len:
            a_row = ad.reshape(ad.take(asn, idx), (1, params.d))
            head = ad.take(rows, (slice(0, 1), slice(None)))
            mid = ad.add(ad.take(rows, (slice(1, 1 + seq.content_len),
                                        slice(None))), a_row)
            tail = ad.take(rows, (slice(1 + seq.content_len, s), slice(None)))
            conds.append(ad.concat([head, mid, tail], axis=0))
            interiors.append(mid)
        else:
            conds.append(rows)
    n_content = sum(sq.content_len for sq in ex.seqs)
    from .prompts import EOS, PAD, SOS
    g_assign = ad.reshape(ad.take(asn, assign_global(params.max_layers)),
                          (1, params.d))
    sos_row = ad.add(ad.reshape(ad.take(tok, SOS), (1, params.d)), g_assign)
    eos_row = ad.add(ad.reshape(ad.take(tok, EOS), (1, params.d)), g_assign)
    parts = [sos_row] + interiors + [eos_row]
    if s - 2 - n_content > 0:
        pad_rows = ad.take(tok, [PAD] * (s - 2 - n_content))
        parts.append(ad.add(pad_rows, g_assign))
    conds.append(ad.concat(parts, axis=0))
    return conds


def combined_losses(params: DenoiserParams, ex: TrainExample, t: int,
                    seed: int, sched: NoiseSchedule, layout_target=None):
    """(L_noise, L_context, L_layout) as autodiff scalars from one forward
    of the full layer batch at timestep t.

    layout_target substitutes fixed arrays for the refined global maps in
    the layout term. The layout gradient deliberately stops at those maps,
    so a finite-difference probe must hold them constant to measure the
    same function the backward pass differentiates."""
    conds = _conds_from_tables(params, ex)
    a, b = sched.coef(t)
    z_t, eps_true = [], []
    for i, z0 in enumerate(ex.z0):
        z0d = np.asarray(_data(z0))
        noise = rng(seed, 5, i).standard_normal(z0d.shape).astype(z0d.dtype)
        eps_true.append(noise)
        z_t.append(a * z0d + b * noise)
    eps_hat, maps = forward_batch(params, z_t, t, conds, want_maps=True)
    total = None
    count = 0
    for e_hat, e in zip(eps_hat, eps_true):
        diff = ad.sub(e_hat, e)
        sq = ad.vsum(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
        count += e.size
    l_noise = ad.mul(total, 1.0 / count)
    n_fg = len(ex.alphas)
    zero = as_var(np.asarray(0.0, dtype=_data(ex.z0[0]).dtype))
    if n_fg == 0:
        return l_noise, zero, zero
    raw_global = aggregate_maps_var([maps[-1]], ex.fg_spans)
    refined = [refine_one_var(m, z_t[-1], params.cal) for m in raw_global]
    l_context = context_loss_var(refined, ex.alphas)
    fg_maps = []
    for j in range(n_fg):
        seq = ex.seqs[1 + j]
        own = aggregate_maps_var([maps[1 + j]], [(1, seq.content_len)])
        fg_maps.append(own[0])
    targets = refined if layout_target is None else layout_target
    l_layout = layout_loss_var(targets, fg_maps)
    return l_noise, l_context, l_layout


def layout_targets(params: DenoiserParams, ex: TrainExample, t: int,
                   seed: int, sched: NoiseSchedule) -> list[np.ndarray]:
    """Refined global maps as plain arrays, for probing the layout loss as
    a function of the foreground branch alone."""
    conds = _conds_from_tables(params, ex)
    a, b = sched.coef(t)
    z_t = []
    for i, z0 in enumerate(ex.z0):
        z0d = np.asarray(_data(z0))
        noise = rng(seed, 5, i).standard_normal(z0d.shape).astype(z0d.dtype)
        z_t.append(a * z0d + b * noise)
    _, maps = forward_batch(params, z_t, t, conds, want_maps=True)
    raw = aggregate_maps_var([maps[-1]], ex.fg_spans)
    return [_data(refine_one_var(m, z_t[-1], params.cal)).copy() for m in raw]


# ------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 2e-4  # paper-rate 2e-6 scaled x100 for the toy net
    lambda_noise: float = 1.0
    lambda_context: float = 1.0
    lambda_layout: float = 1.0
    train_kv_only: bool = False  # restrict updates to cross-attn K/V rows
    alpha_lr: float = 0.05
    train_alpha: bool = True


def _trainable(name: str, cfg: TrainConfig) -> bool:
    if not cfg.train_kv_only:
        return True
    return name.endswith("cross.wk") or name.endswith("cross.wv")


def train_step(params: DenoiserParams, examples: list[TrainExample],
               step_idx: int, seed: int, sched: NoiseSchedule,
               cfg: TrainConfig) -> dict:
    """One SGD step on L = ln*Ln + lc*Lc + ll*Ll over a single example
    chosen round-robin; optionally one L1 step on the alpha head. Updates
    params in place; returns the logged losses."""
    ex = examples[step_idx % len(examples)]
    g = rng(seed, 4, step_idx)
    t = int(g.integers(1, sched.t_max + 1))
    noise_seed = int(g.integers(0, 2 ** 62))
    pv = params_to_vars(params)
    l_n, l_c, l_l = combined_losses(pv, ex, t, noise_seed, sched)
    loss = ad.add(ad.add(ad.mul(l_n, cfg.lambda_noise),
                         ad.mul(l_c, cfg.lambda_context)),
                  ad.mul(l_l, cfg.lambda_layout))
    if not np.isfinite(loss.data):
        raise EvaluationError(
            f"non-finite loss at step {step_idx}: noise={float(l_n.data)} "
            f"context={float(l_c.data)} layout={float(l_l.data)} t={t}")
    loss.backward()
    updates = dict(named_params(pv))
    for name, arr in named_params(params):
        v = updates[name]
        if v.grad is None or not _trainable(name, cfg):
            continue
        if not np.isfinite(v.grad).all():
            raise EvaluationError(f"non-finite gradient in {name} at step {step_idx}")
        arr -= (cfg.lr * v.grad).astype(arr.dtype)
    log = {"step": step_idx, "t": t, "noise": float(l_n.data),
           "context": float(l_c.data), "layout": float(l_l.data),
           "total": float(loss.data)}
    if cfg.train_alpha and ex.alphas:
        log["alpha"] = train_alpha_step(params, ex, cfg.alpha_lr)
    return log


def train_alpha_step(params: DenoiserParams, ex: TrainExample,
                     lr: float) -> float:
    """One L1 step on the alpha head alone, against ground-truth alphas on
    the latent grid. Kept outside the main loss so the Eq-style triple
    stays pure."""
    w = Var(params.w_alpha, requires_grad=True)
    b = Var(params.b_alpha, requires_grad=True)
    total = None
    count = 0
    for j, a_true in enumerate(ex.alphas):
        z = np.asarray(_data(ex.z0[1 + j]))
        pred = ad.sigmoid(ad.add(ad.matmul(as_var(z), w),
                                 ad.reshape(b, (1, 1))))
        diff = ad.absval(ad.sub(ad.reshape(pred, (z.shape[0],)), a_true))
        s = ad.vsum(diff)
        total = s if total is None else ad.add(total, s)
        count += a_true.size
    loss = ad.mul(total, 1.0 / count)
    loss.backward()
    params.w_alpha -= (lr * w.grad).astype(np.float32)
    params.b_alpha -= (lr * b.grad).astype(np.float32)
    return float(loss.data)


def train_loop(params: DenoiserParams, examples: list[TrainExample],
               steps: int, seed: int, sched: NoiseSchedule, cfg: TrainConfig,
               start_step: int = 0) -> list[dict]:
    logs = []
    for i in range(start_step, start_step + steps):
        logs.append(train_step(params, examples, i, seed, sched, cfg))
    return logs


# ------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: DenoiserParams, sched: NoiseSchedule, out_dir: str,
                    *, step: int, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    tensors = dict(named_params(params))
    tensors["codec_w"] = params.codec_w
    for name, arr in tensors.items():
        save_ltens(os.path.join(out_dir, name.replace(".", "__") + ".ltens"),
                   np.asarray(_data(arr), dtype=np.float32))
    header = {
        "step": step, "seed": seed,
        "dims": {"h": params.h, "w": params.w, "d": params.d, "s": params.s,
                 "n_heads": params.n_heads, "map_block": params.map_block,
                 "max_layers": params.max_layers,
                 "n_blocks": len(params.blocks),
                 "f_hidden": int(params.blocks[0].w1.shape[1]),
                 "cal_blocks": len(params.cal.blocks),
                 "vocab_size": int(_data(params.token_table).shape[0]),
                 "t_max": int(_data(params.time_table).shape[0]) - 1},
        "schedule": {"t_max": sched.t_max, "beta_start": sched.beta_start,
                     "beta_end": sched.beta_end, "ddim_steps": sched.ddim_steps},
    }
    with open(os.path.join(out_dir, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2)


def load_checkpoint(ckpt_dir: str) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    with open(os.path.join(ckpt_dir, "header.json")) as fh:
        header = json.load(fh)
    dims = header["dims"]
    params = init_denoiser(header["seed"], h=dims["h"], w=dims["w"], d=dims["d"],
                           s=dims["s"], f_hidden=dims["f_hidden"],
                           n_blocks=dims["n_blocks"], n_heads=dims["n_heads"],
                           t_max=dims["t_max"], vocab_size=dims["vocab_size"],
                           cal_blocks=dims["cal_blocks"],
                           max_layers=dims["max_layers"],
                           map_block=dims["map_block"])
    for name, arr in named_params(params):
        path = os.path.join(ckpt_dir, name.replace(".", "__") + ".ltens")
        loaded = load_ltens(path)
        if loaded.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint {loaded.shape} vs {arr.shape}")
        _set_by_name(params, name, loaded)
    params.codec_w = load_ltens(os.path.join(ckpt_dir, "codec_w.ltens"))
    s = header["schedule"]
    sched = make_schedule(s["t_max"], s["beta_start"], s["beta_end"],
                          s["ddim_steps"])
    return params, sched, header
