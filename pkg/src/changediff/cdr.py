"""Class distribution refinement: attention-map supervision toward layout ratios and masks.

Per supervised layer the loss is ``ratio term + spatial term``.  The ratio term
compares how much of each class mask the combined (name x ratio) attention
covers with the class ratio in the prompt; the spatial term is the squared
error between the class-name attention and the downsampled class mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .codec import ClassDistribution, ClassPalette
from .errors import AlignmentError, ConfigError, RegistryError
from .model import AttentionStack
from .prompts import TextPrompt

RATIO_MODES = ("hard", "soft")


@dataclass
class ClassAttentionView:
    names: list[str]
    sizes: list[tuple[int, int]]
    a_class: list[torch.Tensor]  # per layer, (J, H_m, W_m)
    a_ratio: list[torch.Tensor]

    @property
    def a_com(self) -> list[torch.Tensor]:
        return [c * r for c, r in zip(self.a_class, self.a_ratio)]


@dataclass
class GroundTruthMaskPyramid:
    names: list[str]
    full: torch.Tensor  # (J, H, W) in {0, 1}
    levels: list[torch.Tensor]  # per layer, (J, H_m, W_m) in {0, 1}


def extract_class_views(attn: AttentionStack, prompt: TextPrompt, batch_index: int = 0) -> ClassAttentionView:
    """Average attention columns over each phrase's name and ratio tokens."""
    a_class, a_ratio, sizes = [], [], []
    for rec in attn:
        amap = rec.map[batch_index] if rec.map.ndim == 3 else rec.map
        n_tokens = amap.shape[-1]
        h, w = rec.size
        cls_cols, rat_cols = [], []
        for span in prompt.spans:
            for lo, hi in (span.name_tokens, span.ratio_tokens):
                if not 0 <= lo < hi <= n_tokens:
                    raise RegistryError(f"token span {lo}:{hi} of {span.class_name!r} outside {n_tokens} tokens")
            cls_cols.append(amap[:, slice(*span.name_tokens)].mean(dim=1))
            rat_cols.append(amap[:, slice(*span.ratio_tokens)].mean(dim=1))
        a_class.append(torch.stack(cls_cols).reshape(-1, h, w))
        a_ratio.append(torch.stack(rat_cols).reshape(-1, h, w))
        sizes.append((h, w))
    return ClassAttentionView(prompt.class_names, sizes, a_class, a_ratio)


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of stacked binary masks followed by a 0.5 threshold."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask.clone()
    resized = F.interpolate(mask[None].to(torch.float64), size=size, mode="bilinear", align_corners=False)[0]
    return (resized >= 0.5).to(mask.dtype)


def build_mask_pyramid(layout: np.ndarray, palette: ClassPalette, names: list[str],
                       sizes: list[tuple[int, int]], dtype=torch.float64) -> GroundTruthMaskPyramid:
    layout = torch.as_tensor(np.asarray(layout, dtype=np.int64))
    full = torch.stack([(layout == palette.id_of(n)).to(dtype) for n in names])
    return GroundTruthMaskPyramid(list(names), full, [downsample_mask(full, s) for s in sizes])


def _aligned_ratios(view: ClassAttentionView, target: ClassDistribution, gt: GroundTruthMaskPyramid):
    if sorted(view.names) != sorted(target.names) or list(gt.names) != list(view.names):
        raise AlignmentError(f"class sets differ: view {view.names}, target {target.names}, masks {gt.names}")
    if len(gt.levels) != len(view.a_class):
        raise AlignmentError("mask pyramid and attention view have different layer counts")
    ratios = target.as_dict()
    return [ratios[n] for n in view.names]


def ratio_loss(view: ClassAttentionView, target: ClassDistribution, gt: GroundTruthMaskPyramid,
               mode: str = "soft", tau: float = 0.5, temperature: float = 0.05,
               masked: bool = True) -> torch.Tensor:
    """Per-layer mean absolute gap between activated-area fraction and class ratio.

    A cell counts as activated when the combined map exceeds ``tau`` times its
    maximum.  ``hard`` counts with an indicator; ``soft`` replaces it with a
    logistic of the max-normalized map so that gradients exist.  With
    ``masked`` the count is restricted to the class's ground-truth mask.
    """
    if mode not in RATIO_MODES:
        raise ConfigError(f"ratio loss mode must be one of {RATIO_MODES}")
    r = _aligned_ratios(view, target, gt)
    out = []
    for com, mask in zip(view.a_com, gt.levels):
        j, h, w = com.shape
        peak = com.flatten(1).amax(dim=1)[:, None, None]
        if mode == "hard":
            active = (com > tau * peak).to(com.dtype)
        else:
            active = torch.sigmoid((com / peak.clamp_min(1e-30) - tau) / temperature)
        if masked:
            active = active * mask.to(com.dtype)
        support = active.flatten(1).sum(dim=1) / (h * w)
        target_r = torch.tensor(r, dtype=com.dtype)
        out.append((support - target_r).abs().mean())
    return torch.stack(out)


def spatial_loss(view: ClassAttentionView, gt: GroundTruthMaskPyramid) -> torch.Tensor:
    if list(gt.names) != list(view.names) or len(gt.levels) != len(view.a_class):
        raise AlignmentError(f"class sets differ: view {view.names}, masks {gt.names}")
    return torch.stack([((a - m.to(a.dtype)) ** 2).mean() for a, m in zip(view.a_class, gt.levels)])


def cdr_per_layer(view, target, gt, mode="soft", tau=0.5, temperature=0.05, masked=True,
                  ratio_weight=1.0, spatial_weight=1.0):
    """Return ``(per-layer CDR, per-layer ratio term, per-layer spatial term)``."""
    rat = ratio_loss(view, target, gt, mode, tau, temperature, masked)
    spa = spatial_loss(view, gt)
    return ratio_weight * rat + spatial_weight * spa, rat, spa


def total_loss(l_ldm, per_layer_cdr, lambda_cdr: float = 1.0):
    """Denoising loss plus ``lambda_cdr`` times the CDR summed over layers."""
    if len(per_layer_cdr) == 0:
        if lambda_cdr != 0:
            raise ConfigError("CDR is enabled but no supervised layers were given")
        return l_ldm
    if isinstance(per_layer_cdr, torch.Tensor):
        summed = per_layer_cdr.sum()
    else:
        summed = sum(per_layer_cdr)
    return l_ldm + lambda_cdr * summed
