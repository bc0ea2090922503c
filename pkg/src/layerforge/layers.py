"""Layer data model and compositing algebra.

A scene is an ordered stack: one opaque background plus k-1 translucent
foregrounds, back to front. The composite of a stack is

    I = sum_i alpha_i * c_i * prod_{f>i} (1 - alpha_f)

with the background carried as alpha == 1 so a single formula covers every
layer. Geometric edits (move / flip / resize) transform a layer's alpha map
and its latent with the same parameters on their respective grids.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, as_f32, resize_bilinear


@dataclass
class Layer:
    color: np.ndarray  # H x W x 3 in [0,1]
    alpha: np.ndarray  # H x W x 1 in [0,1]

    def __post_init__(self):
        self.color = as_f32(self.color)
        a = as_f32(self.alpha)
        if a.ndim == 2:
            a = a[:, :, None]
        self.alpha = a
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ShapeError(f"color must be HxWx3, got {self.color.shape}")
        if self.alpha.shape != self.color.shape[:2] + (1,):
            raise ShapeError(
                f"alpha {self.alpha.shape} does not match color {self.color.shape}")
        if self.color.min() < 0 or self.color.max() > 1:
            raise ValueError("color values outside [0,1]")
        if self.alpha.min() < 0 or self.alpha.max() > 1:
            raise ValueError("alpha values outside [0,1]")


@dataclass
class LayerStack:
    background: Layer
    foregrounds: list[Layer] = field(default_factory=list)
    prompts: list[str] = field(default_factory=list)  # background first, then fgs

    def __post_init__(self):
        if not np.all(self.background.alpha == 1.0):
            raise ValueError("background alpha must be 1 everywhere")
        hw = self.background.color.shape[:2]
        for f in self.foregrounds:
            if f.color.shape[:2] != hw:
                raise ShapeError("all layers must share HxW")

    @property
    def size(self) -> tuple[int, int]:
        return self.background.color.shape[:2]

    def all_layers(self) -> list[Layer]:
        return [self.background] + list(self.foregrounds)


@dataclass
class EditOp:
    kind: str  # move | flip_h | flip_v | resize
    target: int  # foreground index, 0-based into stack.foregrounds
    dx: int = 0
    dy: int = 0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self):
        if self.kind not in ("move", "flip_h", "flip_v", "resize"):
            raise ValueError(f"unknown edit kind {self.kind!r}")
        if self.kind == "resize" and (self.sx <= 0 or self.sy <= 0):
            raise ValueError("resize factors must be positive")


def composite(stack: LayerStack) -> np.ndarray:
    """Closed-form composite: per-layer weights via suffix transmittance."""
    layers = stack.all_layers()
    alphas = np.stack([l.alpha for l in layers])  # n x H x W x 1
    colors = np.stack([l.color for l in layers])  # n x H x W x 3
    # trans[i] = prod over f > i of (1 - alpha_f)
    one_minus = 1.0 - alphas
    trans = np.ones_like(alphas)
    np.cumprod(one_minus[::-1], axis=0, out=trans[::-1])
    trans = np.concatenate([trans[1:], np.ones_like(trans[:1])], axis=0)
    out = (alphas * colors * trans).sum(axis=0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def composite_iterative(stack: LayerStack) -> np.ndarray:
    """Brute-force oracle: paint front layers over the running image."""
    out = stack.background.color.copy()
    for fg in stack.foregrounds:
        out = fg.alpha * fg.color + (1.0 - fg.alpha) * out
    return out.astype(np.float32)


def _move_2d(m: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift by integer pixels; vacated cells become 0."""
    out = np.zeros_like(m)
    h, w = m.shape[:2]
    ys = slice(max(0, dy), min(h, h + dy))
    yd = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, dx), min(w, w + dx))
    xd = slice(max(0, -dx), min(w, w - dx))
    # note sign: out[y+dy, x+dx] = m[y, x]
    out[ys, xs] = m[yd, xd]
    return out


def _resize_into(m: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Rescale content about the canvas origin, keeping the canvas size.

    The scaled content is bilinearly resampled onto a sx*W x sy*H grid and
    pasted at the origin; shrink leaves zeros beyond the content, grow crops.
    """
    h, w = m.shape[:2]
    h2 = max(1, int(round(h * sy)))
    w2 = max(1, int(round(w * sx)))
    scaled = resize_bilinear(m, h2, w2)
    out = np.zeros_like(m)
    ch, cw = min(h, h2), min(w, w2)
    out[:ch, :cw] = scaled[:ch, :cw]
    return out


def apply_edit(layer_alpha: np.ndarray, layer_latent: np.ndarray,
               ops: list[EditOp]) -> tuple[np.ndarray, np.ndarray]:
    """Apply ops left to right to an alpha map (pixel grid) and a latent
    (latent grid). Move offsets are given in pixels and rounded to the
    nearest latent cell for the latent."""
    alpha = np.asarray(layer_alpha)
    squeeze = alpha.ndim == 3
    if squeeze:
        alpha = alpha[:, :, 0]
    latent = np.asarray(layer_latent)
    if latent.ndim != 3:
        raise ShapeError(f"latent must be h x w x D, got {latent.shape}")
    ph, pw = alpha.shape
    lh, lw = latent.shape[:2]
    for op in ops:
        if op.kind == "move":
            alpha = _move_2d(alpha, op.dx, op.dy)
            ldx = int(round(op.dx * lw / pw))
            ldy = int(round(op.dy * lh / ph))
            latent = _move_2d(latent, ldx, ldy)
        elif op.kind == "flip_h":
            alpha = alpha[:, ::-1].copy()
            latent = latent[:, ::-1].copy()
        elif op.kind == "flip_v":
            alpha = alpha[::-1, :].copy()
            latent = latent[::-1, :].copy()
        elif op.kind == "resize":
            alpha = _resize_into(alpha, op.sx, op.sy)
            latent = _resize_into(latent, op.sx, op.sy)
    alpha = np.clip(alpha, 0.0, 1.0)
    if squeeze:
        alpha = alpha[:, :, None]
    return alpha.astype(np.float32), latent.astype(np.float32)


# ------------------------------------------------------------------
# image and stack persistence

def save_ppm(path: str, img: np.ndarray) -> None:
    """Write an HxWx3 float image in [0,1] as binary PPM (P6, 8-bit)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM wants HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM supported")
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return (raw.reshape(h, w, 3).astype(np.float32)) / 255.0


def save_pgm(path: str, m: np.ndarray) -> None:
    """Write an HxW (or HxWx1) float map in [0,1] as binary PGM (P5, 8-bit)."""
    m = np.asarray(m)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ShapeError(f"PGM wants HxW, got {m.shape}")
    h, w = m.shape
    data = np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a P5 PGM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PGM supported")
        raw = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return raw.reshape(h, w).astype(np.float32) / 255.0


def save_stack(stack: LayerStack, out_dir: str) -> str:
    """Write layers as PPM/PGM files plus a JSON manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    h, w = stack.size
    entries = []
    prompts = stack.prompts or [""] * (1 + len(stack.foregrounds))
    for z, layer in enumerate(stack.all_layers()):
        name = "bg" if z == 0 else f"fg{z}"
        color_path = f"{name}.ppm"
        save_ppm(os.path.join(out_dir, color_path), layer.color)
        entry = {"color_path": color_path, "alpha_path": None,
                 "prompt": prompts[z] if z < len(prompts) else "",
                 "z_order": z}
        if z > 0:
            alpha_path = f"{name}_alpha.pgm"
            save_pgm(os.path.join(out_dir, alpha_path), layer.alpha)
            entry["alpha_path"] = alpha_path
        entries.append(entry)
    manifest = {"width": w, "height": h, "layers": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_stack(manifest_path: str) -> LayerStack:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(manifest_path)
    h, w = manifest["height"], manifest["width"]
    layers, prompts = [], []
    for entry in sorted(manifest["layers"], key=lambda e: e["z_order"]):
        color = load_ppm(os.path.join(base, entry["color_path"]))
        if entry.get("alpha_path"):
            alpha = load_pgm(os.path.join(base, entry["alpha_path"]))
        else:
            alpha = np.ones((h, w), dtype=np.float32)
        layers.append(Layer(color, alpha))
        prompts.append(entry.get("prompt", ""))
    return LayerStack(layers[0], layers[1:], prompts)
