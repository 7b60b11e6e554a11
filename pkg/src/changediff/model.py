"""Desk-scale conditional denoiser with recorded cross-attention.

The network is a small encoder/decoder with skip connections, residual blocks
and text cross-attention at selected resolutions.  Built with
``side_network=True`` it grows a trainable copy of its encoder that reads a
color map and feeds the decoder skips through zero-initialized 1x1 convs, so
a fresh side branch leaves the output untouched.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import ClassPalette
from .errors import ConfigError, ContextOverflowError, ModeError, ShapeError
from .prompts import TOKENIZER_ID, PREFIX, TextPrompt, tokenize


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 3
    attention_resolutions: tuple[int, ...] = (16, 8)
    heads: int = 2
    text_dim: int = 64
    latent_geometry: tuple[int, int, int] = (3, 32, 32)
    context_length: int = 77
    side_network: bool = False
    phrase_mixing: bool = True
    pooled_text: bool = True

    def __post_init__(self):
        self.attention_resolutions = tuple(sorted(set(int(r) for r in self.attention_resolutions), reverse=True))
        self.latent_geometry = tuple(int(v) for v in self.latent_geometry)
        for name in ("base_channels", "depth", "heads", "text_dim", "context_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        c, h, w = self.latent_geometry
        if min(c, h, w) < 1:
            raise ConfigError(f"invalid latent geometry {self.latent_geometry}")
        if h % 2 ** (self.depth - 1) or w % 2 ** (self.depth - 1):
            raise ConfigError(f"latent size {h}x{w} not divisible by 2^{self.depth - 1}")
        unknown = set(self.attention_resolutions) - set(self.resolutions)
        if unknown:
            raise ConfigError(f"attention resolutions {sorted(unknown)} not produced by depth {self.depth}")
        if not self.attention_resolutions:
            raise ConfigError("at least one cross-attention resolution is required")
        if self.base_channels % self.heads:
            raise ConfigError("base_channels must be divisible by heads")

    @property
    def resolutions(self) -> list[int]:
        return [self.latent_geometry[1] // 2 ** i for i in range(self.depth)]

    def channels(self, level: int) -> int:
        return self.base_channels * (level + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_resolutions"] = list(self.attention_resolutions)
        d["latent_geometry"] = list(self.latent_geometry)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


# --- text side ---------------------------------------------------------------

RATIO_LITERALS = [f"{i // 100}.{i % 100:02d}" for i in range(101)]
PAD = "<pad>"


def build_vocabulary(palette: ClassPalette) -> list[str]:
    words = [t.text for t in tokenize(PREFIX)] + ["(", ")", ":"] + RATIO_LITERALS
    for name in palette.names:
        words += [t.text for t in tokenize(name)]
    vocab = [PAD]
    for w in words:
        if w not in vocab:
            vocab.append(w)
    return vocab


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TextEncoder(nn.Module):
    """Trainable token table plus fixed sinusoidal positions.

    Rows for ratio literals start from random Fourier features of the numeric
    value so that nearby ratios begin with nearby embeddings.  With
    ``phrase_mixing`` every token inside a ``( name : ratio )`` group also gets
    a learned function of the group's mean row, which lets a ratio token know
    its class while prompts that differ in one group still differ only in that
    group's rows.  The mixing layer is zero-initialized.  Any module with the
    same ``encode_batch`` signature can replace this one.
    """

    def __init__(self, vocab: list[str], dim: int, context_length: int, seed: int = 0,
                 phrase_mixing: bool = False):
        super().__init__()
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.dim = dim
        self.context_length = context_length
        self.tokenizer_id = TOKENIZER_ID
        self.embedding = nn.Embedding(len(vocab), dim)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.embedding.weight.normal_(0.0, 1.0, generator=g)
            w = torch.randn(dim, generator=g) * 3.0
            b = torch.rand(dim, generator=g) * 2 * math.pi
            for lit in RATIO_LITERALS:
                if lit in self.index:
                    v = float(lit)
                    self.embedding.weight[self.index[lit]] = math.sqrt(2.0) * torch.cos(w * v + b)
        self.register_buffer("positions", sinusoidal(torch.arange(context_length), dim).float(), persistent=False)
        self.phrase_mixing = phrase_mixing
        if phrase_mixing:
            self.mix = nn.Sequential(nn.Linear(2 * dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))
            nn.init.zeros_(self.mix[2].weight)
            nn.init.zeros_(self.mix[2].bias)

    def token_ids(self, prompt: TextPrompt | str) -> list[int]:
        text = prompt.text if isinstance(prompt, TextPrompt) else prompt
        ids = []
        for tok in tokenize(text):
            word = tok.text
            if word not in self.index and _is_number(word):
                word = f"{min(max(float(word), 0.0), 1.0):.2f}"
            if word not in self.index:
                raise KeyError(f"token {tok.text!r} is not in the vocabulary")
            ids.append(self.index[word])
        if len(ids) > self.context_length:
            raise ContextOverflowError(f"prompt has {len(ids)} tokens, context length is {self.context_length}")
        return ids

    def encode_batch(self, prompts) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(embeddings (B, L, D), mask (B, L))`` padded to the longest prompt."""
        ids = [self.token_ids(p) for p in prompts]
        length = max(len(i) for i in ids)
        table = torch.zeros(len(ids), length, dtype=torch.long)
        mask = torch.zeros(len(ids), length, dtype=torch.bool)
        for row, seq in enumerate(ids):
            table[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[row, :len(seq)] = True
        tok = self.embedding(table)
        if self.phrase_mixing:
            groups = torch.zeros(len(ids), length, length, dtype=tok.dtype)
            for row, seq in enumerate(ids):
                for lo, hi in self._groups(seq):
                    groups[row, lo:hi, lo:hi] = 1.0 / (hi - lo)
            context = groups @ tok
            tok = tok + self.mix(torch.cat([tok, context], dim=-1)) * (groups.sum(-1, keepdim=True) > 0)
        emb = tok + self.positions[:length].to(tok.dtype)
        return emb * mask[..., None], mask

    def _groups(self, seq):
        open_id, close_id = self.index["("], self.index[")"]
        start = None
        for i, t in enumerate(seq):
            if t == open_id:
                start = i
            elif t == close_id and start is not None:
                yield start, i + 1
                start = None

    def encode(self, prompt) -> torch.Tensor:
        return self.encode_batch([prompt])[0][0]


def _is_number(word: str) -> bool:
    try:
        float(word)
    except ValueError:
        return False
    return True


# --- attention records ---------------------------------------------------------

@dataclass
class AttentionRecord:
    layer_id: int
    size: tuple[int, int]
    map: torch.Tensor  # (B, H*W, L), rows sum to 1 over unmasked tokens


@dataclass
class AttentionStack:
    records: list[AttentionRecord] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def select(self, max_size: int) -> "AttentionStack":
        return AttentionStack([r for r in self.records if max(r.size) <= max_size])


# --- building blocks -----------------------------------------------------------

def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Residual text cross-attention; also returns head-averaged probabilities ``(B, HW, L)``."""

    def __init__(self, ch: int, text_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(text_dim, ch, bias=False)
        self.v = nn.Linear(text_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, text, mask):
        b, c, h, w = x.shape
        d = c // self.heads

        def split(t):
            return t.reshape(b, t.shape[1], self.heads, d).transpose(1, 2)

        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, C)
        k, v = self.k(text), self.v(text)

        scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(d)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        out = (probs @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        out = self.out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out, probs.mean(dim=1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    return sinusoidal(t.reshape(-1), dim)


class Encoder(nn.Module):
    """Downsampling half of the network; also instantiated as the side branch."""

    def __init__(self, cfg: DenoiserConfig, temb: int):
        super().__init__()
        c_in = cfg.latent_geometry[0]
        self.cfg = cfg
        self.inp = nn.Conv2d(c_in, cfg.channels(0), 3, padding=1)
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = cfg.channels(0)
        for i, r in enumerate(cfg.resolutions):
            ch = cfg.channels(i)
            self.res.append(ResBlock(prev, ch, temb))
            self.attn.append(CrossAttention(ch, cfg.text_dim, cfg.heads) if r in cfg.attention_resolutions else nn.Identity())
            self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < cfg.depth - 1 else nn.Identity())
            prev = ch
        ch = cfg.channels(cfg.depth - 1)
        self.mid1 = ResBlock(ch, ch, temb)
        lowest = cfg.resolutions[-1]
        self.mid_attn = CrossAttention(ch, cfg.text_dim, cfg.heads) if lowest in cfg.attention_resolutions else nn.Identity()
        self.mid2 = ResBlock(ch, ch, temb)

    def forward(self, x, temb, text, mask, hint=None, records=None):
        h = self.inp(x)
        if hint is not None:
            h = h + hint
        skips = []
        for res, attn, down in zip(self.res, self.attn, self.down):
            h = res(h, temb)
            if isinstance(attn, CrossAttention):
                h, p = attn(h, text, mask)
                if records is not None:
                    records.append((tuple(h.shape[-2:]), p))
            skips.append(h)
            h = down(h)
        h = self.mid1(h, temb)
        if isinstance(self.mid_attn, CrossAttention):
            h, p = self.mid_attn(h, text, mask)
            if records is not None:
                records.append((tuple(h.shape[-2:]), p))
        h = self.mid2(h, temb)
        return h, skips


class SideNetwork(nn.Module):
    def __init__(self, encoder: Encoder, cfg: DenoiserConfig):
        super().__init__()
        ch0 = cfg.channels(0)
        self.encoder = copy.deepcopy(encoder)
        self.hint = nn.Sequential(
            nn.Conv2d(3, ch0, 3, padding=1), nn.SiLU(),
            nn.Conv2d(ch0, ch0, 3, padding=1), nn.SiLU(),
            zero_module(nn.Conv2d(ch0, ch0, 1)),
        )
        self.skip_proj = nn.ModuleList(zero_module(nn.Conv2d(cfg.channels(i), cfg.channels(i), 1))
                                       for i in range(cfg.depth))
        ch = cfg.channels(cfg.depth - 1)
        self.mid_proj = zero_module(nn.Conv2d(ch, ch, 1))

    def forward(self, x, temb, text, mask, condition):
        h, skips = self.encoder(x, temb, text, mask, hint=self.hint(condition))
        return self.mid_proj(h), [p(s) for p, s in zip(self.skip_proj, skips)]


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, text_encoder: TextEncoder):
        super().__init__()
        if text_encoder.dim != cfg.text_dim:
            raise ConfigError("text encoder width does not match text_dim")
        self.cfg = cfg
        self.text_encoder = text_encoder
        ch0 = cfg.channels(0)
        self.temb_dim = 4 * ch0
        self.time_mlp = nn.Sequential(nn.Linear(ch0, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        # masked mean of the prompt rows, added to the step embedding of every residual block
        self.text_pool = nn.Linear(cfg.text_dim, self.temb_dim) if cfg.pooled_text else None
        self.encoder = Encoder(cfg, self.temb_dim)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.up = nn.ModuleList()
        prev = cfg.channels(cfg.depth - 1)
        for i in reversed(range(cfg.depth)):
            ch = cfg.channels(i)
            self.up_res.append(ResBlock(prev + ch, ch, self.temb_dim))
            r = cfg.resolutions[i]
            self.up_attn.append(CrossAttention(ch, cfg.text_dim, cfg.heads) if r in cfg.attention_resolutions else nn.Identity())
            self.up.append(nn.Conv2d(ch, ch, 3, padding=1) if i > 0 else nn.Identity())
            prev = ch
        self.out_norm = nn.GroupNorm(_groups(ch0), ch0)
        self.out = nn.Conv2d(ch0, cfg.latent_geometry[0], 3, padding=1)
        self.side = SideNetwork(self.encoder, cfg) if cfg.side_network else None

    def forward(self, z_t, t, text, mask, condition=None):
        """Predict the noise in ``z_t``; returns ``(eps, AttentionStack)``."""
        if z_t.ndim != 4 or tuple(z_t.shape[1:]) != self.cfg.latent_geometry:
            raise ShapeError(f"expected latents of shape (B, {self.cfg.latent_geometry}), got {tuple(z_t.shape)}")
        if condition is not None and self.side is None:
            raise ModeError("conditioning supplied to a model built without a side network")
        b = z_t.shape[0]
        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1).expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.channels(0)).to(z_t.dtype))
        if self.text_pool is not None:
            weights = mask.to(text.dtype)[..., None]
            temb = temb + self.text_pool((text * weights).sum(1) / weights.sum(1).clamp_min(1.0))
        raw = []
        h, skips = self.encoder(z_t, temb, text, mask, records=raw)
        if condition is not None:
            if tuple(condition.shape[-2:]) != tuple(z_t.shape[-2:]):
                raise ShapeError("condition map size does not match the latent size")
            mid_res, skip_res = self.side(z_t, temb, text, mask, condition.to(z_t.dtype))
            h = h + mid_res
            skips = [s + r for s, r in zip(skips, skip_res)]
        for res, attn, up, skip in zip(self.up_res, self.up_attn, self.up, reversed(skips)):
            h = res(torch.cat([h, skip], dim=1), temb)
            if isinstance(attn, CrossAttention):
                h, p = attn(h, text, mask)
                raw.append((tuple(h.shape[-2:]), p))
            if isinstance(up, nn.Conv2d):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        eps = self.out(F.silu(self.out_norm(h)))
        stack = AttentionStack([AttentionRecord(i, size, p) for i, (size, p) in enumerate(raw)])
        return eps, stack

    def encode_text(self, prompts):
        return self.text_encoder.encode_batch(prompts)


def build_denoiser(cfg: DenoiserConfig, palette: ClassPalette, seed: int = 0) -> Denoiser:
    # module initializers draw from torch's global generator; keep that contained
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        text = TextEncoder(build_vocabulary(palette), cfg.text_dim, cfg.context_length, seed=seed,
                           phrase_mixing=cfg.phrase_mixing)
        return Denoiser(cfg, text)
