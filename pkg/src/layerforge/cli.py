"""Command-line surface.

Subcommands: make-data, train, generate, decompose, edit, check. Every
command stages its outputs in a temp directory next to the target and
renames on success, so a failed run leaves nothing half-written. Exit
codes: 0 ok, 1 usage, 2 validation (bad config/inputs), 3 runtime.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import shutil
import sys
from contextlib import contextmanager

import numpy as np

from . import checks as checks_mod
from . import diffusion as df
from . import harmonize as hz
from . import scenegen
from .config import RunConfig, load_config
from .layers import EditOp, Layer, LayerStack, composite, load_ppm, save_pgm, save_ppm
from .numerics import EvaluationError, save_ltens, load_ltens
from .prompts import TruncationError, Vocab


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LAYERFORGE_THREADS", "1")))
    except ValueError:
        return 1


@contextmanager
def atomic_dir(final: str):
    """Stage into <final>.tmp<pid> and rename into place on success."""
    final = os.path.abspath(final)
    tmp = final + f".tmp{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if os.path.exists(final):
        shutil.rmtree(final)
    os.replace(tmp, final)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_prompts(path: str) -> tuple[str, list[str]]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or "background" not in data:
        raise ValueError("prompts file wants {\"background\": ..., "
                         "\"foregrounds\": [...]}")
    fgs = data.get("foregrounds", [])
    if not isinstance(fgs, list) or not all(isinstance(p, str) for p in fgs):
        raise ValueError("foregrounds must be a list of strings")
    return data["background"], fgs


def _check_ckpt_dims(params: df.DenoiserParams, cfg: RunConfig) -> None:
    for name in ("h", "w", "d", "s"):
        if getattr(params, name) != getattr(cfg, name):
            raise ValueError(
                f"checkpoint {name}={getattr(params, name)} conflicts with "
                f"config {name}={getattr(cfg, name)}")


# ------------------------------------------------------------------
# commands

def cmd_make_data(args) -> int:
    cfg = _load_cfg(args)
    with atomic_dir(args.out) as tmp:
        paths = scenegen.make_dataset(tmp, args.count, args.layers, cfg.seed,
                                      threads=_threads())
    print(f"wrote {len(paths)} scenes under {args.out}")
    return 0


def _load_examples(params: df.DenoiserParams, data_dir: str,
                   vocab: Vocab) -> list[df.TrainExample]:
    from .layers import load_stack
    manifests = sorted(glob.glob(os.path.join(data_dir, "scene_*",
                                              "manifest.json")))
    if not manifests:
        raise ValueError(f"no scene_*/manifest.json under {data_dir}")
    return [df.encode_stack(params, load_stack(m), vocab) for m in manifests]


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    sched = df.make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end,
                             cfg.ddim_steps)
    vocab = Vocab.default()
    start_step = 0
    if args.resume:
        params, sched, header = df.load_checkpoint(args.resume)
        start_step = header["step"]
        seed = header["seed"]
    else:
        params = df.init_denoiser(cfg.seed, h=cfg.h, w=cfg.w, d=cfg.d, s=cfg.s,
                                  f_hidden=cfg.f_hidden, n_blocks=cfg.n_blocks,
                                  n_heads=cfg.n_heads, t_max=cfg.t_max,
                                  vocab_size=len(vocab),
                                  cal_blocks=cfg.cal_blocks,
                                  max_layers=cfg.max_layers,
                                  map_block=cfg.map_block)
        seed = cfg.seed
    examples = _load_examples(params, args.data, vocab)
    tcfg = df.TrainConfig(lr=cfg.lr, lambda_noise=cfg.lambda_noise,
                          lambda_context=cfg.lambda_context,
                          lambda_layout=cfg.lambda_layout,
                          train_kv_only=cfg.train_kv_only,
                          alpha_lr=cfg.alpha_lr, train_alpha=cfg.train_alpha)
    logs = df.train_loop(params, examples, args.steps, seed, sched, tcfg,
                         start_step=start_step)
    with atomic_dir(args.out) as tmp:
        df.save_checkpoint(params, sched, tmp, step=start_step + args.steps,
                           seed=seed)
        with open(os.path.join(tmp, "train_log.json"), "w") as fh:
            json.dump(logs, fh, indent=1)
        cfg.save(os.path.join(tmp, "config.json"))
    if logs:
        print(f"trained {args.steps} steps, final total loss "
              f"{logs[-1]['total']:.5f}")
    else:
        print("trained 0 steps (checkpoint equals initialization)")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    params, sched, _ = df.load_checkpoint(args.ckpt)
    _check_ckpt_dims(params, cfg)
    vocab = Vocab.default()
    bg_prompt, fg_prompts = _load_prompts(args.prompts)
    prompts = [bg_prompt] + fg_prompts
    conds, seqs, fg_spans = df.embed_stack_prompts(params, prompts, vocab)
    n_fg = len(fg_prompts)
    with atomic_dir(args.out) as tmp:
        if n_fg == 0:
            res = df.sample_layers(params, sched, [conds[-1]], [], cfg.seed,
                                   steps=cfg.ddim_steps, inject=False,
                                   mask_mode=cfg.mask_mode)
            img = df.decode_image(params, res.z0_list[0],
                                  (cfg.canvas, cfg.canvas))
            save_ppm(os.path.join(tmp, "global.ppm"), img)
            save_ppm(os.path.join(tmp, "composite.ppm"), img)
            report = {"layers": 1, "harmonized": False}
        else:
            res = df.sample_layers(params, sched, conds, fg_spans, cfg.seed,
                                   steps=cfg.ddim_steps, t_g=cfg.t_g,
                                   inject=cfg.inject,
                                   retain=(cfg.t_h_prime, cfg.t_h),
                                   mask_mode=cfg.mask_mode)
            z_bg, z_fgs, z_glob = (res.z0_list[0], res.z0_list[1:-1],
                                   res.z0_list[-1])
            canvas = (cfg.canvas, cfg.canvas)
            bg_img = df.decode_image(params, z_bg, canvas)
            save_ppm(os.path.join(tmp, "bg.ppm"), bg_img)
            layers_out = [Layer(bg_img, np.ones(canvas, np.float32))]
            alphas_latent = []
            for j, zf in enumerate(z_fgs, start=1):
                a_lat = df.decode_alpha(params, zf)
                alphas_latent.append(a_lat)
                a_pix = df.decode_alpha(params, zf, canvas)
                img = df.decode_image(params, zf, canvas)
                save_ppm(os.path.join(tmp, f"fg{j}.ppm"), img)
                save_pgm(os.path.join(tmp, f"fg{j}_alpha.pgm"), a_pix)
                layers_out.append(Layer(img, a_pix))
            save_ppm(os.path.join(tmp, "global.ppm"),
                     df.decode_image(params, z_glob, canvas))
            save_ppm(os.path.join(tmp, "composite.ppm"),
                     composite(LayerStack(layers_out[0], layers_out[1:])))
            for j, m in enumerate(res.last_maps, start=1):
                save_pgm(os.path.join(tmp, f"context_map_{j}.pgm"),
                         m.reshape(params.h, params.w))
            ret = hz.RetainedLatents(cfg.t_h, cfg.t_h_prime,
                                     dict(res.retained))
            ret.save(os.path.join(tmp, "retained"))
            plan = hz.HarmonizePlan(list(alphas_latent))
            irh = hz.run_irh(params, sched, ret, plan, conds[-1],
                             steps=cfg.ddim_steps, ref_bg_z0=z_bg)
            save_ppm(os.path.join(tmp, "harmonized.ppm"),
                     df.resize_bilinear(irh.image, cfg.canvas, cfg.canvas))
            irh_dir = os.path.join(tmp, "irh")
            os.makedirs(irh_dir)
            save_ltens(os.path.join(irh_dir, "alphas.ltens"),
                       np.stack(alphas_latent))
            save_ltens(os.path.join(irh_dir, "cond_global.ltens"), conds[-1])
            save_ltens(os.path.join(irh_dir, "ref_bg_z0.ltens"), z_bg)
            report = {"layers": 1 + n_fg + 1, "harmonized": True,
                      "irh": irh.report}
        cfg.save(os.path.join(tmp, "config.json"))
        with open(os.path.join(tmp, "prompts.json"), "w") as fh:
            json.dump({"background": bg_prompt, "foregrounds": fg_prompts}, fh)
        with open(os.path.join(tmp, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    print(f"generated run in {args.out}")
    return 0


def cmd_decompose(args) -> int:
    cfg = _load_cfg(args)
    params, sched, _ = df.load_checkpoint(args.ckpt)
    _check_ckpt_dims(params, cfg)
    vocab = Vocab.default()
    bg_prompt, fg_prompts = _load_prompts(args.prompts)
    image = load_ppm(args.image)
    prompts = [bg_prompt] + fg_prompts
    conds, seqs, fg_spans = df.embed_stack_prompts(params, prompts, vocab)
    mask_mode = args.mask_mode or cfg.mask_mode
    z0 = df.encode_image(params, image)
    traj = df.ddim_invert(params, sched, z0, conds[-1], steps=cfg.ddim_steps)
    z_t = traj[-1]
    init = [z_t.copy() for _ in conds]
    res = df.sample_layers(params, sched, conds, fg_spans, cfg.seed,
                           steps=cfg.ddim_steps, t_g=cfg.t_g,
                           inject=cfg.inject, mask_mode=mask_mode,
                           init_latents=init)
    canvas = image.shape[:2]
    with atomic_dir(args.out) as tmp:
        save_ppm(os.path.join(tmp, "bg.ppm"),
                 df.decode_image(params, res.z0_list[0], canvas))
        for j, zf in enumerate(res.z0_list[1:-1], start=1):
            save_ppm(os.path.join(tmp, f"fg{j}.ppm"),
                     df.decode_image(params, zf, canvas))
            save_pgm(os.path.join(tmp, f"fg{j}_alpha.pgm"),
                     df.decode_alpha(params, zf, canvas))
        recon = df.decode_image(params, res.z0_list[-1], canvas)
        save_ppm(os.path.join(tmp, "global_recon.ppm"), recon)
        err = float(np.abs(df.decode_image(params, z0, canvas) - recon).max())
        with open(os.path.join(tmp, "report.json"), "w") as fh:
            json.dump({"mask_mode": mask_mode,
                       "global_recon_err": err}, fh, indent=2)
        cfg.save(os.path.join(tmp, "config.json"))
    print(f"decomposed into {args.out}")
    return 0


def _parse_edits(path: str, n_fg: int) -> list[list[EditOp]]:
    with open(path) as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise ValueError("edits file must hold a JSON list")
    plan: list[list[EditOp]] = [[] for _ in range(n_fg)]
    for it in items:
        target = it.get("target")
        if not isinstance(target, int) or not 0 <= target < n_fg:
            raise ValueError(f"edit target {target!r} outside 0..{n_fg - 1}")
        plan[target].append(EditOp(
            kind=it.get("op", ""), target=target,
            dx=int(it.get("dx", 0)), dy=int(it.get("dy", 0)),
            sx=float(it.get("sx", 1.0)), sy=float(it.get("sy", 1.0))))
    return plan


def cmd_edit(args) -> int:
    cfg = _load_cfg(args)
    params, sched, _ = df.load_checkpoint(args.ckpt)
    _check_ckpt_dims(params, cfg)
    run_dir = args.run
    ret = hz.RetainedLatents.load(os.path.join(run_dir, "retained"))
    alphas = load_ltens(os.path.join(run_dir, "irh", "alphas.ltens"))
    cond_global = load_ltens(os.path.join(run_dir, "irh", "cond_global.ltens"))
    ref_bg = load_ltens(os.path.join(run_dir, "irh", "ref_bg_z0.ltens"))
    n_fg = alphas.shape[0]
    edits = _parse_edits(args.edits, n_fg)
    plan = hz.HarmonizePlan([alphas[i] for i in range(n_fg)], edits)
    out = args.out or os.path.join(run_dir, "edited")
    irh = hz.run_irh(params, sched, ret, plan, cond_global,
                     steps=cfg.ddim_steps, ref_bg_z0=ref_bg)
    with atomic_dir(out) as tmp:
        save_ppm(os.path.join(tmp, "harmonized.ppm"),
                 df.resize_bilinear(irh.image, cfg.canvas, cfg.canvas))
        with open(os.path.join(tmp, "report.json"), "w") as fh:
            json.dump(irh.report, fh, indent=2)
    print(f"harmonized edit in {out}")
    return 0


def cmd_check(args) -> int:
    rows = checks_mod.run_suites(args.suite)
    failed = 0
    for suite, name, ok, detail in rows:
        tag = "ok  " if ok else "FAIL"
        line = f"{tag} [{suite}] {name}"
        if detail:
            line += f" ({detail})"
        print(line)
        failed += 0 if ok else 1
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 3


# ------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="layerforge",
               description="Toy multi-layer image generation stack")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", help="generate a synthetic scene dataset")
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--layers", type=int, default=3, choices=(1, 2, 3, 4))
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--config", default=None)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_make_data)

    t = sub.add_parser("train", help="train the toy denoiser")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="sample layers from prompts")
    g.add_argument("--config", default=None)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--prompts", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    dc = sub.add_parser("decompose", help="invert an image into layers")
    dc.add_argument("--config", default=None)
    dc.add_argument("--ckpt", required=True)
    dc.add_argument("--image", required=True)
    dc.add_argument("--prompts", required=True)
    dc.add_argument("--mask-mode", default=None,
                    choices=("none", "global_only", "global_only_prose"))
    dc.add_argument("--seed", type=int, default=None)
    dc.add_argument("--out", required=True)
    dc.set_defaults(fn=cmd_decompose)

    e = sub.add_parser("edit", help="re-harmonize a run with edits")
    e.add_argument("--config", default=None)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--run", required=True)
    e.add_argument("--edits", required=True)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_edit)

    c = sub.add_parser("check", help="run invariant suites")
    c.add_argument("--suite", default="all",
                   choices=sorted(checks_mod.SUITES) + ["all"])
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ValueError, TruncationError, KeyError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (EvaluationError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
