"""Conditional diffusion for synthesizing semantic change detection data.

Layouts are integer class maps with a palette; prompts describe class ratios;
a text-to-layout denoiser and a layout-to-image denoiser turn sparse labels
into multi-temporal image and layout sequences.
"""

from .codec import ClassDistribution, ClassPalette, PaletteEntry, compute_class_ratios
from .errors import ChangeDiffError

__all__ = ["ChangeDiffError", "ClassDistribution", "ClassPalette", "PaletteEntry", "compute_class_ratios"]
__version__ = "0.1.0"
