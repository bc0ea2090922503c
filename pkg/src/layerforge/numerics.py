"""Minimal deterministic tensor core.

Everything downstream (compositing, attention, diffusion, harmonization)
computes on plain float32 numpy arrays in row-major order. This module owns
the handful of primitives those modules share: stable row softmax, min-max
normalization, align-corners bilinear resize, masked scaled-dot-product
attention, a 64-bit central-difference gradient checker, the seeded
counter-based RNG, and the LTENS dump format.
"""

from __future__ import annotations

import struct

import numpy as np

F32 = np.float32
F64 = np.float64

NEG_INF = float("-inf")


class ShapeError(ValueError):
    """Operands have the wrong rank or mismatched dimensions."""


class DegenerateMaskError(ValueError):
    """An attention query row has every key masked out."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for `seed`, split by an optional stream path.

    Distinct stream tuples under the same seed give independent streams, so
    modules can derive private generators without coordinating.
    """
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, stabilized by max subtraction.

    Rows may contain -inf entries (masked logits); a row that is -inf
    everywhere raises DegenerateMaskError.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D array, got shape {m.shape}")
    row_max = np.max(m, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DegenerateMaskError("softmax row with every entry masked to -inf")
    e = np.exp(m - row_max)
    return (e / np.sum(e, axis=1, keepdims=True)).astype(m.dtype, copy=False)


def minmax_norm(m: np.ndarray) -> np.ndarray:
    """Rescale to [0,1] so min maps to 0 and max to 1.

    A constant input returns all zeros: a featureless map should carry no
    signal rather than NaN.
    """
    m = np.asarray(m)
    lo = m.min()
    hi = m.max()
    span = hi - lo
    if span == 0:
        return np.zeros_like(m)
    return ((m - lo) / span).astype(m.dtype, copy=False)


def _sample_positions(n_src: int, n_dst: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners placement: endpoints land exactly on endpoints
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst, dtype=dtype)
    else:
        pos = np.arange(n_dst, dtype=dtype) * ((n_src - 1) / (n_dst - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = (pos - i0).astype(dtype)
    return i0, i1, frac


def resize_bilinear(m: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Bilinear resize of an H×W (or H×W×C) array under the align-corners
    convention. Same-size resize returns the input bit-exactly."""
    m = np.asarray(m)
    if m.ndim not in (2, 3):
        raise ShapeError(f"resize_bilinear expects H×W or H×W×C, got shape {m.shape}")
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"target size must be >= 1, got {h2}×{w2}")
    h, w = m.shape[0], m.shape[1]
    if (h2, w2) == (h, w):
        return m.copy()
    r0, r1, rf = _sample_positions(h, h2, m.dtype)
    c0, c1, cf = _sample_positions(w, w2, m.dtype)
    if m.ndim == 3:
        rf = rf[:, None, None]
        cf = cf[None, :, None]
    else:
        rf = rf[:, None]
        cf = cf[None, :]
    top = m[np.ix_(r0, c0)] * (1 - cf) + m[np.ix_(r0, c1)] * cf
    bot = m[np.ix_(r1, c0)] * (1 - cf) + m[np.ix_(r1, c1)] * cf
    return (top * (1 - rf) + bot * rf).astype(m.dtype, copy=False)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
              mask: np.ndarray | None = None) -> np.ndarray:
    """softmax((q kᵀ + mask) / √d) · v with additive {0, -inf} mask.

    Raises DegenerateMaskError for any query row whose keys are all masked.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q/k inner dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k/v row counts differ: {k.shape} vs {v.shape}")
    d = q.shape[1]
    logits = q @ k.T
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
        logits = logits + mask
    w = softmax_rows(logits / np.asarray(np.sqrt(d), dtype=logits.dtype))
    return w @ v


def grad_check(f, params: np.ndarray, analytic: np.ndarray, eps: float = 1e-4) -> float:
    """Max relative error between `analytic` and central differences of `f`.

    `f` maps a flat float64 parameter vector to a scalar; both orders of
    the comparison run in 64-bit so the result measures method error, not
    float32 noise. Relative error per coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=F64).ravel()
    analytic = np.asarray(analytic, dtype=F64).ravel()
    if params.shape != analytic.shape:
        raise ShapeError(f"params {params.shape} vs analytic {analytic.shape}")
    worst = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + eps
        hi = float(f(bumped))
        bumped[i] = params[i] - eps
        lo = float(f(bumped))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}")
        fd = (hi - lo) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(fd), 1e-12)
        worst = max(worst, abs(analytic[i] - fd) / denom)
    return worst


# --- LTENS dump format -----------------------------------------------------
#
# magic "LTENS1", u32 LE rank, rank x u32 LE dims, row-major f32 LE payload.

_LTENS_MAGIC = b"LTENS1"


def save_ltens(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=F32)
    with open(path, "wb") as fh:
        fh.write(_LTENS_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_ltens(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != _LTENS_MAGIC:
        raise ValueError(f"{path}: not an LTENS file")
    (rank,) = struct.unpack_from("<I", blob, 6)
    dims = struct.unpack_from(f"<{rank}I", blob, 10)
    offset = 10 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
    if data.size != n:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(dims).astype(F32)
