"""Procedural layouts and textures for desk-scale experiments."""

from __future__ import annotations

import os

import numpy as np
from scipy.ndimage import gaussian_filter

from .codec import ClassPalette, save_colormap, save_layout, save_palette
from .seeds import rng as make_rng

TOY_CLASSES = (("building", (255, 0, 0)), ("water", (0, 0, 255)), ("low vegetation", (0, 255, 0)))

# mean color and texture amplitude used when rendering a class as "imagery"
_TEXTURE = {
    "building": ((150, 140, 135), 40.0),
    "water": ((40, 70, 110), 10.0),
    "low vegetation": ((80, 130, 60), 25.0),
}


def toy_palette() -> ClassPalette:
    return ClassPalette.from_pairs(TOY_CLASSES)


def random_layout(rng: np.random.Generator, palette: ClassPalette, size: int = 32,
                  min_ratio: float = 0.06, drop_prob: float = 0.2, smooth: float = 4.0) -> np.ndarray:
    """Smooth random regions with exactly controlled class areas.

    Class ratios come from a flat Dirichlet; pixels are ranked by a smoothed
    noise field and filled class by class in a random order, so every class
    forms connected-looking blobs and its area is known exactly.
    """
    ids = palette.class_ids
    k = len(ids)
    present = np.ones(k, dtype=bool)
    if k > 1 and rng.random() < drop_prob:
        present[rng.integers(k)] = False
    weights = np.zeros(k)
    while True:
        weights[present] = rng.dirichlet(np.ones(present.sum()))
        if weights[present].min() >= min_ratio:
            break
    field = gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
    order = np.argsort(field, axis=None, kind="stable")
    counts = np.floor(weights * size * size).astype(int)
    counts[np.flatnonzero(present)[0]] += size * size - counts.sum()
    layout = np.empty(size * size, dtype=np.uint8)
    start = 0
    for c in rng.permutation(k):
        layout[order[start:start + counts[c]]] = ids[c]
        start += counts[c]
    return layout.reshape(size, size)


def sparsify(layout: np.ndarray, palette: ClassPalette, rng: np.random.Generator, keep: float = 0.4) -> np.ndarray:
    """Keep labels only inside a random rectangle (the "change area")."""
    h, w = layout.shape
    kh, kw = max(1, int(h * np.sqrt(keep))), max(1, int(w * np.sqrt(keep)))
    y, x = rng.integers(0, h - kh + 1), rng.integers(0, w - kw + 1)
    out = np.full_like(layout, palette.unlabeled_id)
    out[y:y + kh, x:x + kw] = layout[y:y + kh, x:x + kw]
    return out


def render_image(layout: np.ndarray, palette: ClassPalette, rng: np.random.Generator) -> np.ndarray:
    """Texture each class region; a stand-in for co-registered imagery."""
    h, w = layout.shape
    img = np.zeros((h, w, 3))
    grain = gaussian_filter(rng.standard_normal((h, w)), 1.0)
    grain /= grain.std() + 1e-12
    for e in palette.entries:
        mean, amp = _TEXTURE.get(e.name, (tuple(0.6 * np.asarray(e.color)), 20.0))
        m = layout == e.class_id
        img[m] = np.asarray(mean) + amp * grain[m][:, None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_corpus(n: int, seed: int, palette: ClassPalette | None = None, size: int = 32):
    palette = palette or toy_palette()
    return [random_layout(make_rng(seed, "layout", i), palette, size) for i in range(n)]


def write_corpus(out_dir, n: int, seed: int, size: int = 32) -> ClassPalette:
    """Write ``palette.txt`` plus ``layouts/``, ``sparse/`` and ``images/`` PNGs."""
    palette = toy_palette()
    for sub in ("layouts", "sparse", "images"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    save_palette(palette, os.path.join(out_dir, "palette.txt"))
    for i, layout in enumerate(make_corpus(n, seed, palette, size)):
        name = f"{i:04d}.png"
        save_layout(layout, os.path.join(out_dir, "layouts", name))
        save_layout(sparsify(layout, palette, make_rng(seed, "sparse", i)), os.path.join(out_dir, "sparse", name))
        save_colormap(render_image(layout, palette, make_rng(seed, "image", i)), os.path.join(out_dir, "images", name))
    return palette
