"""Synthetic layered scenes and the image-to-layer pipeline.

Scenes are a few flat-colored shapes (binary alpha, distinct depths) over a
solid or gradient background, rasterized deterministically from a seed. The
ground truth keeps each shape's full amodal mask, so occlusion is purely a
compositing effect and the decomposition pipeline can be verified exactly:
detect the front-most object, match its box to an entity mask, take its
alpha and color, inpaint the hole, repeat. All perception steps are oracles
fed by the scene record; a jitter knob and a lossy mean-fill inpainter
exist only to probe downstream robustness.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, LayerStack, composite, save_pgm, save_ppm
from .numerics import rng
from .prompts import Vocab


class NotFoundError(LookupError):
    """Detection found no visible object for the word."""


class NoMatchError(LookupError):
    """No candidate mask overlaps the detection box."""


class SpecError(ValueError):
    """Scene spec references words outside the prompt vocabulary."""


COLOR_RGB = {
    "red": (0.85, 0.15, 0.15), "green": (0.15, 0.65, 0.2),
    "blue": (0.18, 0.3, 0.85), "yellow": (0.9, 0.85, 0.2),
    "cyan": (0.2, 0.8, 0.8), "magenta": (0.8, 0.2, 0.75),
    "orange": (0.95, 0.55, 0.1), "purple": (0.5, 0.25, 0.7),
    "pink": (0.95, 0.6, 0.7), "brown": (0.5, 0.33, 0.18),
    "white": (0.95, 0.95, 0.95), "black": (0.08, 0.08, 0.08),
    "gray": (0.5, 0.5, 0.5), "olive": (0.45, 0.48, 0.15),
    "teal": (0.1, 0.45, 0.45), "navy": (0.1, 0.12, 0.4),
}

SHAPE_WORD = {"rect": "box", "circle": "circle", "triangle": "triangle"}


@dataclass
class ShapeSpec:
    kind: str  # rect | circle | triangle
    color: str  # word from COLOR_RGB
    cx: float
    cy: float
    sx: float  # radius for circle, full width otherwise
    sy: float
    depth: float  # smaller = nearer


@dataclass
class SceneSpec:
    background: dict  # {"mode": "solid"|"gradient", "color": word[, "color2"]}
    shapes: list[ShapeSpec]
    seed: int
    canvas: int = 32

    def __post_init__(self):
        depths = [s.depth for s in self.shapes]
        if len(set(depths)) != len(depths):
            raise SpecError("shape depths must be distinct")


@dataclass
class Scene:
    """Rendered scene plus every oracle the pipeline pretends to infer."""
    spec: SceneSpec
    image: np.ndarray
    stack: LayerStack
    prompts: list[str]
    masks: list[np.ndarray]  # amodal bool HxW per shape, spec order
    depths: list[float]


def _shape_mask(shape: ShapeSpec, canvas: int) -> np.ndarray:
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    px = xs + 0.5
    py = ys + 0.5
    if shape.kind == "circle":
        return ((px - shape.cx) ** 2 + (py - shape.cy) ** 2
                <= shape.sx ** 2)
    if shape.kind == "rect":
        return ((np.abs(px - shape.cx) <= shape.sx / 2)
                & (np.abs(py - shape.cy) <= shape.sy / 2))
    if shape.kind == "triangle":
        # isoceles, apex up
        x0, y0 = shape.cx, shape.cy - shape.sy / 2
        x1, y1 = shape.cx - shape.sx / 2, shape.cy + shape.sy / 2
        x2, y2 = shape.cx + shape.sx / 2, shape.cy + shape.sy / 2

        def half(ax, ay, bx, by):
            return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

        d0, d1, d2 = half(x0, y0, x1, y1), half(x1, y1, x2, y2), half(x2, y2, x0, y0)
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    raise SpecError(f"unknown shape kind {shape.kind!r}")


def _background_image(bg: dict, canvas: int) -> np.ndarray:
    c1 = np.array(COLOR_RGB[bg["color"]], dtype=np.float32)
    if bg["mode"] == "solid":
        return np.broadcast_to(c1, (canvas, canvas, 3)).copy()
    if bg["mode"] == "gradient":
        c2 = np.array(COLOR_RGB[bg["color2"]], dtype=np.float32)
        ramp = np.linspace(0.0, 1.0, canvas, dtype=np.float32)[:, None, None]
        rows = (c1 * (1 - ramp) + c2 * ramp).astype(np.float32)
        return np.broadcast_to(rows, (canvas, canvas, 3)).copy()
    raise SpecError(f"unknown background mode {bg['mode']!r}")


def _bg_prompt(bg: dict) -> str:
    if bg["mode"] == "solid":
        return f"plain {bg['color']} background"
    return f"{bg['color']} {bg['color2']} gradient background"


def _shape_prompt(shape: ShapeSpec) -> str:
    return f"a {shape.color} {SHAPE_WORD[shape.kind]}"


def make_scene(spec: SceneSpec) -> Scene:
    """Rasterize a spec into the full oracle record. The returned image is
    the exact composite of the ground-truth stack."""
    vocab = Vocab.default()
    canvas = spec.canvas
    prompts = [_bg_prompt(spec.background)] + [_shape_prompt(s) for s in spec.shapes]
    for p in prompts:
        for word in p.split():
            if word not in vocab.ids:
                raise SpecError(f"prompt word {word!r} not in vocabulary")
    bg_img = _background_image(spec.background, canvas)
    bg = Layer(bg_img, np.ones((canvas, canvas), np.float32))
    masks = [_shape_mask(s, canvas) for s in spec.shapes]
    # stack wants back-to-front: sort shapes by descending depth
    order = sorted(range(len(spec.shapes)),
                   key=lambda i: -spec.shapes[i].depth)
    fgs, fg_prompts = [], []
    for i in order:
        s = spec.shapes[i]
        color = np.broadcast_to(np.array(COLOR_RGB[s.color], np.float32),
                                (canvas, canvas, 3)).copy()
        fgs.append(Layer(color, masks[i].astype(np.float32)))
        fg_prompts.append(_shape_prompt(s))
    stack = LayerStack(bg, fgs, [prompts[0]] + fg_prompts)
    image = composite(stack)
    return Scene(spec, image, stack, stack.prompts, masks,
                 [s.depth for s in spec.shapes])


def render_scene(spec: SceneSpec):
    scene = make_scene(spec)
    return scene.image, scene.stack, scene.prompts


def visible_mask(scene: Scene, idx: int,
                 exclude: set | None = None) -> np.ndarray:
    """Amodal mask minus everything strictly nearer (ignoring excluded)."""
    exclude = exclude or set()
    vis = scene.masks[idx].copy()
    d = scene.depths[idx]
    for j, m in enumerate(scene.masks):
        if j == idx or j in exclude:
            continue
        if scene.depths[j] < d:
            vis &= ~m
    return vis


@dataclass
class DetectionBox:
    x0: int
    y0: int
    x1: int
    y1: int
    label: str
    score: float = 1.0

    def as_mask(self, canvas: int) -> np.ndarray:
        m = np.zeros((canvas, canvas), bool)
        m[self.y0:self.y1 + 1, self.x0:self.x1 + 1] = True
        return m


def detect(image: np.ndarray, word: str, scene: Scene, *,
           exclude: set | None = None, jitter: int = 0,
           jitter_seed: int = 0) -> DetectionBox:
    """Tight box over the named shape's visible pixels; the front-most
    shape wins when several match the word."""
    word = word.lower()
    exclude = exclude or set()
    cands = [i for i, s in enumerate(scene.spec.shapes)
             if i not in exclude and word in (s.color, SHAPE_WORD[s.kind])]
    cands.sort(key=lambda i: scene.depths[i])
    for i in cands:
        vis = visible_mask(scene, i, exclude)
        if not vis.any():
            continue
        ys, xs = np.nonzero(vis)
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        if jitter:
            g = rng(jitter_seed, 13, i)
            c = scene.spec.canvas - 1
            jx0, jy0, jx1, jy1 = g.integers(-jitter, jitter + 1, size=4)
            x0 = int(np.clip(x0 + jx0, 0, c))
            y0 = int(np.clip(y0 + jy0, 0, c))
            x1 = int(np.clip(x1 + jx1, x0, c))
            y1 = int(np.clip(y1 + jy1, y0, c))
        return DetectionBox(x0, y0, x1, y1, word)
    raise NotFoundError(f"no visible shape matches {word!r}")


def depth_map(image: np.ndarray, scene: Scene,
              exclude: set | None = None) -> np.ndarray:
    """Per-pixel depth of the nearest covering shape; background is 1.0."""
    exclude = exclude or set()
    canvas = scene.spec.canvas
    dm = np.ones((canvas, canvas), dtype=np.float32)
    for i, m in enumerate(scene.masks):
        if i in exclude:
            continue
        dm[m] = np.minimum(dm[m], np.float32(scene.depths[i]))
    return dm


def match_iou(box: DetectionBox, masks: list[np.ndarray]) -> tuple[int, float]:
    """Best candidate by IoU against the box treated as a mask; ties go to
    the lower index."""
    if not masks:
        raise NoMatchError("no candidate masks")
    canvas = masks[0].shape[0]
    bm = box.as_mask(canvas)
    best_i, best = -1, 0.0
    for i, m in enumerate(masks):
        inter = float((bm & m).sum())
        union = float((bm | m).sum())
        iou = inter / union if union else 0.0
        if iou > best:
            best_i, best = i, iou
    if best_i < 0:
        raise NoMatchError("all candidate IoUs are zero")
    return best_i, best


@dataclass
class Manifest:
    width: int
    height: int
    layers: list  # dicts: color_path, alpha_path, prompt, z_order, provenance
    composite_hash: str
    extraction_order: list = field(default_factory=list)
    truncated: bool = False
    seed: int | None = None


def image_hash(img: np.ndarray) -> str:
    u8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    return hashlib.sha256(u8.tobytes()).hexdigest()


def decompose(image: np.ndarray, prompts: list[str] | None, scene: Scene, *,
              k_max: int = 4, lossy_inpaint: bool = False,
              jitter: int = 0) -> tuple[LayerStack, Manifest]:
    """Front-to-back extraction: depth picks the forefront shape, detection
    boxes it, IoU matching binds it to an entity mask, the oracle supplies
    its amodal alpha and color, and inpainting (oracle re-render, or lossy
    mean fill) removes it from the working image."""
    canvas = scene.spec.canvas
    extracted: list[int] = []
    fg_layers: list[Layer] = []
    fg_prompts: list[str] = []
    current = image.copy()
    truncated = False
    while True:
        remaining = [i for i in range(len(scene.spec.shapes))
                     if i not in extracted
                     and visible_mask(scene, i, set(extracted)).any()]
        if not remaining:
            break
        if len(fg_layers) >= k_max - 1:
            truncated = True
            break
        front = min(remaining, key=lambda i: scene.depths[i])
        word = SHAPE_WORD[scene.spec.shapes[front].kind]
        box = detect(current, word, scene, exclude=set(extracted),
                     jitter=jitter, jitter_seed=scene.spec.seed)
        cand_masks = [visible_mask(scene, i, set(extracted))
                      for i in remaining]
        mi, _ = match_iou(box, cand_masks)
        idx = remaining[mi]
        shape = scene.spec.shapes[idx]
        color = np.broadcast_to(np.array(COLOR_RGB[shape.color], np.float32),
                                (canvas, canvas, 3)).copy()
        alpha = scene.masks[idx].astype(np.float32)
        fg_layers.append(Layer(color, alpha))
        fg_prompts.append(_shape_prompt(shape))
        extracted.append(idx)
        if lossy_inpaint:
            hole = visible_mask(scene, idx, set(extracted[:-1]))
            fill = current[~hole].reshape(-1, 3).mean(axis=0)
            current[hole] = fill
        else:
            rest = SceneSpec(scene.spec.background,
                             [s for i, s in enumerate(scene.spec.shapes)
                              if i not in extracted],
                             scene.spec.seed, canvas)
            current = make_scene(rest).image
    bg = Layer(current if not fg_layers else
               _background_image(scene.spec.background, canvas),
               np.ones((canvas, canvas), np.float32))
    # back-to-front stack: reverse the front-to-back extraction
    stack = LayerStack(bg, fg_layers[::-1],
                       [_bg_prompt(scene.spec.background)] + fg_prompts[::-1])
    entries = []
    for z, prompt in enumerate(stack.prompts):
        entries.append({"color_path": "bg.ppm" if z == 0 else f"fg{z}.ppm",
                        "alpha_path": None if z == 0 else f"fg{z}_alpha.pgm",
                        "prompt": prompt, "z_order": z,
                        "provenance": "oracle"})
    manifest = Manifest(canvas, canvas, entries,
                        image_hash(composite(stack)),
                        extraction_order=extracted, truncated=truncated,
                        seed=scene.spec.seed)
    return stack, manifest


# ------------------------------------------------------------------
# random scenes and dataset layout

def random_scene(seed: int, n_layers: int, canvas: int = 32) -> SceneSpec:
    """n_layers counts the background: 1 gives an empty scene, 4 gives
    three shapes."""
    if not 1 <= n_layers <= 4:
        raise SpecError(f"n_layers must be 1..4, got {n_layers}")
    g = rng(seed, 9)
    colors = sorted(COLOR_RGB)
    mode = "solid" if g.random() < 0.5 else "gradient"
    bg = {"mode": mode, "color": colors[g.integers(len(colors))]}
    if mode == "gradient":
        bg["color2"] = colors[g.integers(len(colors))]
    n_fg = n_layers - 1
    depths = g.permutation(np.linspace(0.2, 0.8, max(n_fg, 1)))[:n_fg]
    shapes = []
    for j in range(n_fg):
        kind = ("rect", "circle", "triangle")[g.integers(3)]
        color = colors[g.integers(len(colors))]
        cx = float(g.uniform(canvas * 0.25, canvas * 0.75))
        cy = float(g.uniform(canvas * 0.25, canvas * 0.75))
        if kind == "circle":
            sx = sy = float(g.uniform(canvas * 0.1, canvas * 0.22))
        else:
            sx = float(g.uniform(canvas * 0.18, canvas * 0.45))
            sy = float(g.uniform(canvas * 0.18, canvas * 0.45))
        shapes.append(ShapeSpec(kind, color, cx, cy, sx, sy, float(depths[j])))
    return SceneSpec(bg, shapes, seed, canvas)


def save_scene(scene: Scene, out_dir: str) -> str:
    """scene_<seed>/ layout: per-layer PPM/PGM, composite, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    stack = scene.stack
    entries = []
    for z, layer in enumerate(stack.all_layers()):
        color_path = "bg.ppm" if z == 0 else f"fg{z}.ppm"
        save_ppm(os.path.join(out_dir, color_path), layer.color)
        alpha_path = None
        if z > 0:
            alpha_path = f"fg{z}_alpha.pgm"
            save_pgm(os.path.join(out_dir, alpha_path), layer.alpha)
        entries.append({"color_path": color_path, "alpha_path": alpha_path,
                        "prompt": stack.prompts[z], "z_order": z,
                        "provenance": "oracle"})
    save_ppm(os.path.join(out_dir, "composite.ppm"), scene.image)
    manifest = {"width": scene.spec.canvas, "height": scene.spec.canvas,
                "seed": scene.spec.seed, "layers": entries,
                "composite_hash": image_hash(scene.image)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def make_dataset(out_root: str, count: int, n_layers: int, seed: int,
                 threads: int = 1) -> list[str]:
    os.makedirs(out_root, exist_ok=True)

    def build(i: int) -> str:
        scene_seed = seed + i
        scene = make_scene(random_scene(scene_seed, n_layers))
        return save_scene(scene, os.path.join(out_root, f"scene_{scene_seed}"))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(build, range(count)))
    return [build(i) for i in range(count)]
