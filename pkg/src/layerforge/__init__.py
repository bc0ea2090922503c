"""layerforge: a toy-scale multi-layer image generation stack.

Everything runs on numpy. The package covers the full loop: synthetic
scene construction, per-layer prompt embedding, a small transformer
denoiser with layer-shared self-attention and context-aware
cross-attention refinement, DDIM sampling and inversion over transparent
layer stacks, latent-level harmonization of edited layers, and the
compositing algebra that ties image space and latent space together.
"""

from .layers import Layer, LayerStack, EditOp, composite, composite_iterative
from .config import RunConfig, load_config
from .numerics import rng, save_ltens, load_ltens

__version__ = "0.1.0"

__all__ = [
    "Layer",
    "LayerStack",
    "EditOp",
    "composite",
    "composite_iterative",
    "RunConfig",
    "load_config",
    "rng",
    "save_ltens",
    "load_ltens",
    "__version__",
]
