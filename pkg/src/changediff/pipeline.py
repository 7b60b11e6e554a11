"""Training and generation: layout completion, event chains, image synthesis, dataset output."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .cdr import build_mask_pyramid, cdr_per_layer, extract_class_views, total_loss
from .codec import (
    ClassDistribution,
    ClassPalette,
    check_layout,
    colormap_to_layout,
    compute_class_ratios,
    layout_to_colormap,
    save_colormap,
    save_layout,
)
from .diffusion import (
    NoiseSchedule,
    colormaps_to_tensor,
    gaussian_noise,
    ldm_loss,
    scaled_betas,
    load_checkpoint,
    make_schedule,
    sample,
    save_checkpoint,
    tensor_to_colormaps,
)
from .errors import DataError, EventInapplicableError, ManifestConflictError, ModeError
from .model import Denoiser, DenoiserConfig, build_denoiser
from .prompts import EventSpec, TextPrompt, amplify_ratios, apply_event, build_prompt, parse_prompt
from .seeds import derive_seed, rng as make_rng

log = logging.getLogger(__name__)

MANIFEST_HEADER = "changediff-manifest v1"


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 2e-4
    T: int = 50
    beta_start: float | None = None  # None: scaled from (1e-4, 0.02) at 1000 steps
    beta_end: float | None = None
    lambda_cdr: float = 1.0
    tau: float = 0.5
    temperature: float = 0.05
    ratio_weight: float = 1.0
    spatial_weight: float = 1.0
    cdr_masked: bool = True
    supervise_max_size: int = 32
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    augment: bool = True  # random rotations and flips; class ratios are invariant under them
    cosine_lr: bool = True  # anneal the learning rate to zero over the run
    model: DenoiserConfig = field(default_factory=DenoiserConfig)


@dataclass
class Checkpoint:
    model: Denoiser
    schedule: NoiseSchedule
    palette: ClassPalette
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(*load_checkpoint(path))

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.schedule, self.palette, self.extra)


# --- training ----------------------------------------------------------------

def schedule_betas(cfg: TrainConfig) -> tuple[float, float]:
    lo, hi = scaled_betas(cfg.T)
    return (lo if cfg.beta_start is None else cfg.beta_start,
            hi if cfg.beta_end is None else cfg.beta_end)


def _dihedral(a: np.ndarray, view: int) -> np.ndarray:
    a = np.rot90(a, int(view) % 4)
    return np.ascontiguousarray(a[:, ::-1] if view >= 4 else a)


def _train(examples, palette: ClassPalette, cfg: TrainConfig, conditional: bool,
           out_path=None, log_path=None) -> tuple[Checkpoint, list[dict]]:
    model = build_denoiser(cfg.model, palette, seed=derive_seed(cfg.seed, "init"))
    schedule = make_schedule(cfg.T, *schedule_betas(cfg))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps) if cfg.cosine_lr else None
    picker = make_rng(cfg.seed, "batches")
    ckpt = Checkpoint(model, schedule, palette, {"kind": "l2i" if conditional else "t2l", "steps": 0})
    history = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    n = len(examples)
    try:
        model.train()
        for step in range(1, cfg.steps + 1):
            idx = picker.integers(0, n, size=cfg.batch_size)
            views = picker.integers(0, 8, size=cfg.batch_size) if cfg.augment else np.zeros(cfg.batch_size, int)
            layouts = [_dihedral(examples[i][0], v) for i, v in zip(idx, views)]
            epoch = (step - 1) * cfg.batch_size // n
            prompts = [build_prompt(compute_class_ratios(y, palette), derive_seed(cfg.seed, "order", epoch, int(i)))
                       for y, i in zip(layouts, idx)]
            cmaps = colormaps_to_tensor(np.stack([layout_to_colormap(y, palette) for y in layouts]))
            if conditional:
                z0 = colormaps_to_tensor(np.stack([_dihedral(examples[i][1], v) for i, v in zip(idx, views)]))
                condition = cmaps
            else:
                z0, condition = cmaps, None
            text = model.encode_text(prompts)
            l_ldm, attn, _, _ = ldm_loss(model, z0, text, derive_seed(cfg.seed, "noise", step), schedule, condition)

            supervised = attn.select(cfg.supervise_max_size)
            per_layer, rat_sum, spa_sum = [], 0.0, 0.0
            if len(supervised) and (cfg.lambda_cdr != 0 or not conditional):
                layers = []
                for b, (prompt, y) in enumerate(zip(prompts, layouts)):
                    view = extract_class_views(supervised, prompt, b)
                    gt = build_mask_pyramid(y, palette, view.names, view.sizes, dtype=z0.dtype)
                    target = compute_class_ratios(y, palette)
                    cdr, rat, spa = cdr_per_layer(view, target, gt, "soft", cfg.tau, cfg.temperature,
                                                  cfg.cdr_masked, cfg.ratio_weight, cfg.spatial_weight)
                    layers.append(cdr)
                    rat_sum += float(rat.detach().sum())
                    spa_sum += float(spa.detach().sum())
                per_layer = torch.stack(layers).mean(dim=0)
                rat_sum /= len(prompts)
                spa_sum /= len(prompts)
            loss = total_loss(l_ldm, per_layer, cfg.lambda_cdr) if cfg.lambda_cdr != 0 else l_ldm

            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            if sched is not None:
                sched.step()

            rec = {"step": step, "l_ldm": float(l_ldm.detach()), "l_rat": rat_sum, "l_spa": spa_sum}
            history.append(rec)
            if log_fh and (step % cfg.log_every == 0 or step == 1 or step == cfg.steps):
                log_fh.write(format_log_line(rec) + "\n")
                log_fh.flush()
            if out_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                ckpt.extra["steps"] = step
                ckpt.save(out_path)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    ckpt.extra["steps"] = cfg.steps
    if out_path:
        ckpt.save(out_path)
    return ckpt, history


def format_log_line(rec: dict) -> str:
    return f"step={rec['step']} l_ldm={rec['l_ldm']!r} l_rat={rec['l_rat']!r} l_spa={rec['l_spa']!r}"


def parse_log(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                f = dict(p.split("=", 1) for p in line.split())
                out.append({"step": int(f["step"]), **{k: float(f[k]) for k in ("l_ldm", "l_rat", "l_spa")}})
    return out


def train_t2l(corpus: Sequence[np.ndarray], palette: ClassPalette, cfg: TrainConfig | None = None,
              out_path=None, log_path=None):
    """Fine-tune the text-to-layout model on color maps of ``corpus``."""
    cfg = cfg or TrainConfig()
    if len(corpus) == 0:
        raise DataError("training corpus is empty")
    if cfg.model.side_network:
        raise DataError("the text-to-layout model is built without a side network")
    for i, y in enumerate(corpus):
        try:
            check_layout(y, palette)
        except Exception as exc:
            raise DataError(f"corpus layout {i}: {exc}") from exc
        if (np.asarray(y) == palette.unlabeled_id).all():
            raise DataError(f"corpus layout {i} has no labeled pixels")
    return _train([(y, None) for y in corpus], palette, cfg, False, out_path, log_path)


def train_l2i(pairs: Sequence[tuple[np.ndarray, np.ndarray]], palette: ClassPalette,
              cfg: TrainConfig | None = None, out_path=None, log_path=None):
    """Train the layout-to-image model (with side network) on ``(layout, image)`` pairs."""
    cfg = cfg or TrainConfig(lambda_cdr=0.0)
    if len(pairs) == 0:
        raise DataError("training corpus is empty")
    cfg.model.side_network = True
    cfg.model.__post_init__()
    for i, (y, x) in enumerate(pairs):
        check_layout(y, palette)
        if np.shape(x) != (*np.shape(y), 3):
            raise DataError(f"pair {i}: image shape {np.shape(x)} does not match layout {np.shape(y)}")
    return _train(list(pairs), palette, cfg, True, out_path, log_path)


# --- generation ---------------------------------------------------------------

def stitch_noise(z_prev: torch.Tensor, alpha: float, fresh_seed: int, renormalize: bool = False) -> torch.Tensor:
    """Convex mix of the previous initial noise with a fresh standard-normal draw."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return z_prev.clone()
    z_r = gaussian_noise(z_prev.shape, fresh_seed, z_prev.dtype)
    if alpha == 0.0:
        return z_r
    mixed = alpha * z_prev + (1.0 - alpha) * z_r
    if renormalize:
        mixed = mixed / np.sqrt(alpha ** 2 + (1.0 - alpha) ** 2)
    return mixed


def _latent_shape(model: Denoiser, batch: int = 1):
    return (batch, *model.cfg.latent_geometry)


def sample_colormaps(ckpt: Checkpoint, prompts: Sequence[TextPrompt], noises: Sequence[torch.Tensor],
                     sampler: str = "deterministic", conditions: np.ndarray | None = None,
                     seeds: Sequence[int] | None = None) -> np.ndarray:
    """Sample one raster per ``(prompt, initial noise)``; returns uint8 ``(B, H, W, 3)``.

    Deterministic sampling is batched; ancestral sampling runs each item with
    its own seed so an item's output does not depend on its batch mates.
    """
    model = ckpt.model
    cond = None if conditions is None else colormaps_to_tensor(conditions)
    with torch.no_grad():
        if sampler == "deterministic":
            z = torch.cat([n.reshape(_latent_shape(model)) for n in noises])
            out = sample(model, model.encode_text(prompts), z, ckpt.schedule, cond, "deterministic")
            return tensor_to_colormaps(out)
        outs = []
        for i, (p, n) in enumerate(zip(prompts, noises)):
            c = None if cond is None else cond[i:i + 1]
            s = seeds[i] if seeds is not None else i
            outs.append(sample(model, model.encode_text([p]), n.reshape(_latent_shape(model)), ckpt.schedule, c,
                               "ancestral", seed=derive_seed(s, "ancestral")))
        return tensor_to_colormaps(torch.cat(outs))


def select_candidate(distances: Sequence[float]) -> int:
    return int(np.argmin(np.asarray(distances, dtype=float)))


def l1_distance(requested: ClassDistribution, realized: ClassDistribution, palette: ClassPalette) -> float:
    a, b = requested.as_dict(), realized.as_dict()
    return float(sum(abs(a.get(n, 0.0) - b.get(n, 0.0)) for n in palette.names))


def complete_layout(sparse: np.ndarray, palette: ClassPalette, t2l: Checkpoint, candidates: int = 4,
                    seed: int = 0, sampler: str = "deterministic"):
    """Complete a sparsely labelled layout; returns ``(color map, prompt, noise seed)``.

    Draws ``candidates`` layouts from the amplified-ratio prompt and keeps the
    one whose realized class composition is closest (L1) to the request.
    """
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    prompt = build_prompt(amplify_ratios(compute_class_ratios(sparse, palette)), derive_seed(seed, "order"))
    requested = parse_prompt(prompt.text, palette)
    noise_seeds = [derive_seed(seed, "candidate", k) for k in range(candidates)]
    noises = [gaussian_noise(_latent_shape(t2l.model), s) for s in noise_seeds]
    maps = sample_colormaps(t2l, [prompt] * candidates, noises, sampler, seeds=noise_seeds)
    dists = [l1_distance(requested, compute_class_ratios(colormap_to_layout(m, palette, False), palette), palette)
             for m in maps]
    best = select_candidate(dists)
    return maps[best], prompt, noise_seeds[best]


@dataclass
class GenerationSession:
    session_id: str
    base_prompt: TextPrompt
    base_noise_seed: int
    reference_colormap: np.ndarray
    alpha: float = 0.8
    horizon: int = 1
    renormalize: bool = False
    sampler: str = "deterministic"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class LayoutStep:
    colormap: np.ndarray
    layout: np.ndarray
    prompt: TextPrompt
    distribution: ClassDistribution
    event: EventSpec | None = None


def simulate_events(session: GenerationSession, specs: Sequence[EventSpec], t2l: Checkpoint,
                    palette: ClassPalette) -> list[LayoutStep]:
    """Apply one event per step and sample the changed layouts.

    Layout noise is chained from the reference noise with the stitching rule,
    and each step keeps the phrase order of the previous one.
    """
    if len(specs) != session.horizon:
        raise ValueError(f"expected {session.horizon} event specs, got {len(specs)}")
    dist = amplify_ratios(parse_prompt(session.base_prompt.text, palette))
    z = gaussian_noise(_latent_shape(t2l.model), session.base_noise_seed)
    steps = []
    for k, spec in enumerate(specs, 1):
        try:
            dist = apply_event(dist, spec, palette)
        except EventInapplicableError as exc:
            raise EventInapplicableError(spec.mode, str(exc), step=k) from exc
        prompt = build_prompt(dist, None)
        z = stitch_noise(z, session.alpha, derive_seed(session.base_noise_seed, "layout-stitch", k),
                         session.renormalize)
        cmap = sample_colormaps(t2l, [prompt], [z], session.sampler,
                                seeds=[derive_seed(session.base_noise_seed, "layout-step", k)])[0]
        steps.append(LayoutStep(cmap, colormap_to_layout(cmap, palette, False), prompt, dist, spec))
    return steps


@dataclass
class SyntheticSample:
    sample_id: str
    image: np.ndarray
    layout: np.ndarray
    prompt: TextPrompt
    event: EventSpec | None
    time_index: int
    session_id: str
    base_seed: int
    frame_seed: int
    renormalize: bool = False


def synthesize_images(layout_seq: Sequence[tuple[np.ndarray, TextPrompt]], l2i: Checkpoint,
                      session: GenerationSession, events: Sequence[EventSpec | None] | None = None
                      ) -> list[SyntheticSample]:
    """Render one image per color map, chaining the initial noises frame to frame."""
    if l2i.model.side is None:
        raise ModeError("layout-to-image checkpoint has no side network")
    if not layout_seq:
        raise ValueError("empty layout sequence")
    events = list(events) if events is not None else [None] * len(layout_seq)
    palette = l2i.palette
    shape = _latent_shape(l2i.model)
    frame_seed = derive_seed(session.base_noise_seed, "image")
    z = gaussian_noise(shape, frame_seed)
    out = []
    for k, ((cmap, prompt), event) in enumerate(zip(layout_seq, events)):
        if k > 0:
            frame_seed = derive_seed(session.base_noise_seed, "image-stitch", k)
            z = stitch_noise(z, session.alpha, frame_seed, session.renormalize)
        image = sample_colormaps(l2i, [prompt], [z], session.sampler, conditions=np.asarray(cmap)[None],
                                 seeds=[frame_seed])[0]
        out.append(SyntheticSample(
            f"{session.session_id}_t{k:02d}", image, colormap_to_layout(cmap, palette, False), prompt, event,
            k, session.session_id, session.base_noise_seed, frame_seed, session.renormalize))
    return out


# --- dataset files -----------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    time_index: int
    image: str
    layout: str
    prompt: str
    event: str
    base_seed: int
    frame_seed: int
    renormalize: bool

    def to_line(self) -> str:
        return (f"id={self.sample_id} time={self.time_index} image={self.image} layout={self.layout} "
                f"prompt={json.dumps(self.prompt)} event={self.event} "
                f"seeds={self.base_seed},{self.frame_seed} renorm={int(self.renormalize)}")

    @property
    def session_id(self) -> str:
        return self.sample_id.rsplit("_t", 1)[0]


_RECORD_RE = re.compile(
    r'^id=(?P<id>\S+) time=(?P<time>-?\d+) image=(?P<image>\S+) layout=(?P<layout>\S+) '
    r'prompt=(?P<prompt>"(?:[^"\\]|\\.)*") '
    r'event=(?P<event>-|mode=\S+ perturbation=\S+ range=\S+ seed=\d+) '
    r'seeds=(?P<base>\d+),(?P<frame>\d+) renorm=(?P<renorm>[01])$')


def parse_manifest_line(line: str) -> ManifestRecord:
    m = _RECORD_RE.match(line.rstrip("\n"))
    if m is None:
        raise DataError(f"malformed manifest record: {line.rstrip()!r}")
    return ManifestRecord(m["id"], int(m["time"]), m["image"], m["layout"], json.loads(m["prompt"]),
                          m["event"], int(m["base"]), int(m["frame"]), m["renorm"] == "1")


def record_for(sample: SyntheticSample) -> ManifestRecord:
    return ManifestRecord(sample.sample_id, sample.time_index, f"images/{sample.sample_id}.png",
                          f"layouts/{sample.sample_id}.png", sample.prompt.text,
                          sample.event.to_line() if sample.event else "-",
                          sample.base_seed, sample.frame_seed, sample.renormalize)


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for r in records:
            fh.write(r.to_line() + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DataError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    records = [parse_manifest_line(line) for line in lines[1:] if line.strip()]
    _check_unique(records)
    return records


def _check_unique(records):
    seen = set()
    for r in records:
        if r.sample_id in seen:
            raise ManifestConflictError(f"duplicate sample id {r.sample_id!r}")
        seen.add(r.sample_id)


def emit_dataset(samples: Sequence[SyntheticSample], out_dir) -> str:
    """Write rasters, prompts and ``manifest.txt`` under ``out_dir``; returns the manifest path."""
    records = [record_for(s) for s in samples]
    _check_unique(records)
    try:
        for sub in ("images", "layouts", "prompts"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        for s, r in zip(samples, records):
            save_colormap(s.image, os.path.join(out_dir, r.image))
            save_layout(s.layout, os.path.join(out_dir, r.layout))
            with open(os.path.join(out_dir, "prompts", f"{s.sample_id}.txt"), "w", encoding="utf-8") as fh:
                fh.write(s.prompt.text + "\n")
        path = os.path.join(out_dir, "manifest.txt")
        write_manifest(records, path)
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc.filename or ''}: {exc.strerror}") from exc
    return path


# --- evaluation helpers ----------------------------------------------------------

def realized_ratios(ckpt: Checkpoint, dists: Sequence[ClassDistribution], seed: int,
                    order_seed: int | None = None) -> list[ClassDistribution]:
    """Sample one layout per requested distribution and measure what came out."""
    palette = ckpt.palette
    prompts = [build_prompt(d, None if order_seed is None else derive_seed(order_seed, i)) for i, d in enumerate(dists)]
    noises = [gaussian_noise(_latent_shape(ckpt.model), derive_seed(seed, "eval", i)) for i in range(len(dists))]
    maps = sample_colormaps(ckpt, prompts, noises, "deterministic")
    return [compute_class_ratios(colormap_to_layout(m, palette, False), palette) for m in maps]
