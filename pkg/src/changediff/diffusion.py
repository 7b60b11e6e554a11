"""Noise schedule, forward process, training objective and samplers."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .codec import ClassPalette, PaletteEntry
from .errors import ConfigError, ShapeError
from .model import Denoiser, DenoiserConfig, TextEncoder

CHECKPOINT_FORMAT = "changediff-checkpoint"
CHECKPOINT_VERSION = 1
SAMPLER_MODES = ("deterministic", "ancestral")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; index 0 of the extended arrays is the clean state."""

    T: int
    beta_start: float
    beta_end: float

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        betas = torch.linspace(self.beta_start, self.beta_end, self.T, dtype=torch.float64)
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "_ab", torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars]))

    def alpha_bar(self, t) -> torch.Tensor:
        """Cumulative product at step ``t`` (0..T); ``alpha_bar(0) == 1``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise ConfigError(f"step index outside 0..{self.T}")
        return self._ab[t]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(int(T), float(beta_start), float(beta_end))


def scaled_betas(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                 reference_T: int = 1000) -> tuple[float, float]:
    """Stretch a schedule tuned for ``reference_T`` steps to ``T`` steps.

    Multiplying both endpoints by ``reference_T / T`` keeps the terminal
    alpha-bar near its reference value, so short chains still end in noise.
    """
    k = reference_T / int(T)
    return beta_start * k, min(beta_end * k, 0.999)


def _expand(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if z0.shape != noise.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and noise {tuple(noise.shape)} differ in shape")
    ab = schedule.alpha_bar(t)
    return _expand(ab.sqrt(), z0) * z0 + _expand((1.0 - ab).sqrt(), z0) * noise


def predict_x0(z_t, t, eps, schedule):
    ab = schedule.alpha_bar(t)
    return (z_t - _expand((1.0 - ab).sqrt(), z_t) * eps) / _expand(ab.sqrt(), z_t)


def gaussian_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed) % 2**64)
    return torch.randn(tuple(shape), generator=g, dtype=torch.float64).to(dtype)


class IdentityAutoencoder:
    """Latent codec slot; the desk-scale model diffuses directly in pixel space."""

    def encode(self, x):
        return x

    def decode(self, z):
        return z


def colormaps_to_tensor(maps, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) uint8 -> (B, 3, H, W) in [-1, 1]."""
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous().to(dtype)


def tensor_to_colormaps(x: torch.Tensor) -> np.ndarray:
    arr = ((x.detach().to(torch.float64).clamp(-1, 1) + 1.0) * 127.5).round()
    return arr.permute(0, 2, 3, 1).numpy().astype(np.uint8)


def ldm_loss(model, z0: torch.Tensor, text, rng_seed: int, schedule: NoiseSchedule, condition=None,
             reduction: str = "mean"):
    """Noise-prediction MSE for one draw of ``(t, eps)`` per batch element.

    ``text`` is the ``(embeddings, mask)`` pair from the text encoder.  Returns
    ``(loss, attention stack, t, eps)``.
    """
    emb, mask = text
    g = torch.Generator().manual_seed(int(rng_seed) % 2**64)
    b = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=g)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64).to(z0.dtype)
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred, attn = model(z_t, t, emb, mask, condition)
    err = (eps - pred) ** 2
    loss = err.mean() if reduction == "mean" else err.flatten(1).mean(1)
    return loss, attn, t, eps


@torch.no_grad()
def sample(model, text, initial_noise: torch.Tensor, schedule: NoiseSchedule, condition=None,
           mode: str = "deterministic", seed: int = 0, clip: bool = True) -> torch.Tensor:
    """Run the full reverse chain from ``initial_noise``.

    ``deterministic`` takes noise-free steps (each step re-predicts the clean
    sample and moves to the previous marginal along the predicted noise), so
    the result depends only on the weights, the text and the initial noise.
    ``ancestral`` uses the DDPM posterior with per-step noise from ``seed``.
    """
    if mode not in SAMPLER_MODES:
        raise ConfigError(f"sampler mode must be one of {SAMPLER_MODES}, got {mode!r}")
    emb, mask = text
    z = initial_noise
    g = torch.Generator().manual_seed(int(seed) % 2**64)
    for t in range(schedule.T, 0, -1):
        eps, _ = model(z, torch.full((z.shape[0],), t), emb, mask, condition)
        x0 = predict_x0(z, t, eps, schedule)
        if clip:
            x0 = x0.clamp(-1.0, 1.0)
        ab_t = schedule.alpha_bar(t)
        ab_prev = schedule.alpha_bar(t - 1)
        if mode == "deterministic":
            eps_hat = (z - ab_t.sqrt().to(z.dtype) * x0) / (1.0 - ab_t).sqrt().to(z.dtype)
            z = ab_prev.sqrt().to(z.dtype) * x0 + (1.0 - ab_prev).sqrt().to(z.dtype) * eps_hat
        else:
            beta = schedule.betas[t - 1]
            c0 = ab_prev.sqrt() * beta / (1.0 - ab_t)
            ct = schedule.alphas[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)
            z = c0.to(z.dtype) * x0 + ct.to(z.dtype) * z
            if t > 1:
                var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
                z = z + var.sqrt().to(z.dtype) * torch.randn(z.shape, generator=g, dtype=torch.float64).to(z.dtype)
    return z


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, palette: ClassPalette,
                    extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "schedule": schedule.to_dict(),
        "tokenizer_id": model.text_encoder.tokenizer_id,
        "vocab": list(model.text_encoder.vocab),
        "palette": {
            "entries": [[e.class_id, e.name, list(e.color)] for e in palette.entries],
            "unlabeled_id": palette.unlabeled_id,
            "unlabeled_color": list(palette.unlabeled_color),
        },
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(model, schedule, palette, extra)``."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a changediff checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = DenoiserConfig.from_dict(payload["config"])
    p = payload["palette"]
    palette = ClassPalette(tuple(PaletteEntry(i, n, tuple(c)) for i, n, c in p["entries"]),
                           p["unlabeled_id"], tuple(p["unlabeled_color"]))
    text = TextEncoder(payload["vocab"], cfg.text_dim, cfg.context_length, phrase_mixing=cfg.phrase_mixing)
    model = Denoiser(cfg, text)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = make_schedule(**payload["schedule"])
    return model, schedule, palette, payload["extra"]
