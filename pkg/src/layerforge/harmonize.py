"""Information-retained harmonization.

Pass 1 (the layered sampler) stores every layer's latent at each step
inside a window [t_lo, t_hi] on the T -> 0 axis. Pass 2 restarts the
background track from the stored latent at the window start and re-denoises
to 0; at each step still inside the window the running latent is fused with
the stored foreground latents through their alpha maps - the same algebra
as image compositing, applied in latent space - so foreground content
survives while the surround is re-synthesized. Edits transform stored
foreground latents and alphas before fusion.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from .layers import EditOp, apply_edit
from .numerics import ShapeError, load_ltens, save_ltens


class StoreIncompleteError(RuntimeError):
    """A step needed by the re-denoising pass is missing from the store."""


@dataclass
class RetainedLatents:
    t_hi: int  # window start on the T->0 axis (fusion begins here)
    t_lo: int  # window end; t_lo <= t_hi
    store: dict = field(default_factory=dict)  # t -> list of per-layer latents

    def __post_init__(self):
        if not 0 <= self.t_lo <= self.t_hi:
            raise ValueError(f"bad window [{self.t_lo}, {self.t_hi}]")

    def add(self, t: int, layer_latents: list) -> None:
        self.store[t] = [np.asarray(z, dtype=np.float32).copy()
                         for z in layer_latents]

    def get(self, t: int) -> list:
        if t not in self.store:
            raise StoreIncompleteError(f"no retained latents for step {t}")
        return self.store[t]

    def steps(self) -> list[int]:
        return sorted(self.store)

    def n_layers(self) -> int:
        if not self.store:
            raise StoreIncompleteError("empty store")
        return len(next(iter(self.store.values())))

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for t, zs in self.store.items():
            save_ltens(os.path.join(out_dir, f"step_{t}.ltens"), np.stack(zs))
        with open(os.path.join(out_dir, "window.json"), "w") as fh:
            json.dump({"t_hi": self.t_hi, "t_lo": self.t_lo,
                       "steps": self.steps()}, fh)

    @classmethod
    def load(cls, in_dir: str) -> "RetainedLatents":
        with open(os.path.join(in_dir, "window.json")) as fh:
            meta = json.load(fh)
        out = cls(meta["t_hi"], meta["t_lo"])
        for t in meta["steps"]:
            arr = load_ltens(os.path.join(in_dir, f"step_{t}.ltens"))
            out.store[int(t)] = [arr[i] for i in range(arr.shape[0])]
        return out


@dataclass
class HarmonizePlan:
    alphas: list  # per-foreground h x w maps on the latent grid, in [0,1]
    edits: list = field(default_factory=list)  # per-foreground list[EditOp]

    def __post_init__(self):
        if not self.edits:
            self.edits = [[] for _ in self.alphas]
        if len(self.edits) != len(self.alphas):
            raise ShapeError(f"{len(self.edits)} edit lists vs "
                             f"{len(self.alphas)} alphas")
        for a in self.alphas:
            a = np.asarray(a)
            if a.min() < 0 or a.max() > 1:
                raise ValueError("plan alphas outside [0,1]")

    def has_edits(self) -> bool:
        return any(self.edits)


def irh_blend(bg: np.ndarray, fgs: list, alphas: list) -> np.ndarray:
    """Latent-level layer fusion: bg takes the full suffix transmittance,
    each foreground is weighted by its alpha times the transmittance of
    everything in front of it. Alphas broadcast over the channel dim."""
    if len(fgs) != len(alphas):
        raise ShapeError(f"{len(fgs)} foregrounds vs {len(alphas)} alphas")
    bg = np.asarray(bg)
    out = np.zeros_like(bg)
    n = len(fgs)
    cols = [np.asarray(a, dtype=bg.dtype).reshape(-1, 1) for a in alphas]
    for a in cols:
        if a.shape[0] != bg.shape[0]:
            raise ShapeError(f"alpha rows {a.shape[0]} vs latent {bg.shape[0]}")
    trans = np.ones_like(bg[:, :1])
    weights = [None] * n
    for i in range(n - 1, -1, -1):
        weights[i] = cols[i] * trans
        trans = trans * (1.0 - cols[i])
    out = bg * trans
    for i in range(n):
        out = out + np.asarray(fgs[i]) * weights[i]
    return out.astype(bg.dtype)


def irh_blend_edited(bg: np.ndarray, fgs: list, plan: HarmonizePlan,
                     h: int, w: int) -> np.ndarray:
    """Fusion with per-foreground edits applied to both the stored latent
    and its alpha on the latent grid."""
    if len(fgs) != len(plan.alphas):
        raise ShapeError(f"{len(fgs)} foregrounds vs {len(plan.alphas)} alphas")
    ed_fgs, ed_alphas = [], []
    for j, z in enumerate(fgs):
        a = np.asarray(plan.alphas[j], dtype=np.float32).reshape(h, w)
        zg = np.asarray(z, dtype=np.float32).reshape(h, w, -1)
        a2, z2 = apply_edit(a, zg, plan.edits[j])
        ed_alphas.append(a2.reshape(-1))
        ed_fgs.append(z2.reshape(zg.shape[0] * zg.shape[1], -1))
    return irh_blend(bg, ed_fgs, ed_alphas)


@dataclass
class IRHResult:
    z0: np.ndarray
    image: np.ndarray
    report: dict
    trajectory: list


def run_irh(params: df.DenoiserParams, sched: df.NoiseSchedule,
            retained: RetainedLatents, plan: HarmonizePlan, cond_global,
            *, steps: int | None = None, ref_bg_z0: np.ndarray | None = None,
            collect: bool = False) -> IRHResult:
    """Re-denoise from the window start, fusing stored foregrounds at every
    step still inside the window (fusion covers (t_lo, t_hi]; an empty
    window degenerates to plain continuation of the background track).
    The running track is denoised with the plain model on the global
    conditioning. ref_bg_z0, when given, anchors the background-change norm
    in the report."""
    t_hi, t_lo = retained.t_hi, retained.t_lo
    taus = [t for t in df.ddim_taus(sched, steps) if t <= t_hi]
    if not taus or taus[0] != t_hi:
        raise ValueError(f"window start {t_hi} is not a sampler step")
    z = retained.get(t_hi)[0].copy()
    trajectory = [z.copy()]

    def fuse(z_run, t):
        stored = retained.get(t)
        fgs = stored[1:-1]
        if not fgs:
            return z_run
        if plan.has_edits():
            return irh_blend_edited(z_run, fgs, plan, params.h, params.w)
        flat = [np.asarray(a, dtype=np.float32).reshape(-1)
                for a in plan.alphas]
        return irh_blend(z_run, fgs, flat)

    for t_a, t_b in zip(taus[:-1], taus[1:]):
        if t_lo < t_a <= t_hi:
            z = fuse(z, t_a)
        eps, _ = df.forward_batch(params, [z], t_a, [cond_global])
        z = np.asarray(df.ddim_update(z, eps[0].data, t_a, t_b, sched),
                       dtype=np.float32)
        if collect:
            trajectory.append(z.copy())
    image = df.decode_image(params, z)
    report = {"window": [t_lo, t_hi],
              "edits": [[op.kind for op in ops] for ops in plan.edits],
              "background_change_norm": None}
    if ref_bg_z0 is not None:
        trans = np.ones((params.hw, 1), dtype=np.float32)
        for a in plan.alphas:
            trans *= 1.0 - np.asarray(a, dtype=np.float32).reshape(-1, 1)
        diff = (z - np.asarray(ref_bg_z0, dtype=np.float32)) * trans
        report["background_change_norm"] = float(np.sqrt((diff ** 2).sum()))
    return IRHResult(z, image, report, trajectory)
