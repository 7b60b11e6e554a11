"""Layouts, color maps, palettes and class-ratio distributions.

A semantic layout is an ``(H, W)`` uint8 array of class ids; a color map is
an ``(H, W, 3)`` uint8 RGB array.  Both are plain numpy arrays so they can be
handed to PIL, torch or matplotlib without conversion.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, PaletteMismatchError

UNLABELED_ID = 255
UNLABELED_COLOR = (255, 255, 255)


def _pack(colors: np.ndarray) -> np.ndarray:
    colors = colors.astype(np.int64)
    return (colors[..., 0] << 16) | (colors[..., 1] << 8) | colors[..., 2]


@dataclass(frozen=True)
class PaletteEntry:
    class_id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassPalette:
    entries: tuple[PaletteEntry, ...]
    unlabeled_id: int = UNLABELED_ID
    unlabeled_color: tuple[int, int, int] = UNLABELED_COLOR

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.class_id))
        object.__setattr__(self, "entries", entries)
        ids = [e.class_id for e in entries]
        names = [e.name for e in entries]
        colors = [tuple(e.color) for e in entries] + [tuple(self.unlabeled_color)]
        if len(set(ids)) != len(ids):
            raise PaletteMismatchError("duplicate class ids in palette")
        if len(set(names)) != len(names):
            raise PaletteMismatchError("duplicate class names in palette")
        if len(set(colors)) != len(colors):
            raise PaletteMismatchError("palette colors must be pairwise distinct")
        if self.unlabeled_id in ids:
            raise PaletteMismatchError(f"unlabeled id {self.unlabeled_id} collides with a class id")
        for i in ids + [self.unlabeled_id]:
            if not 0 <= i <= 255:
                raise PaletteMismatchError(f"class id {i} does not fit in 8 bits")
        for c in colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise PaletteMismatchError(f"invalid RGB color {c}")

    @classmethod
    def from_pairs(cls, items: Iterable[tuple[str, Sequence[int]]], **kwargs) -> "ClassPalette":
        """Build a palette from ``(name, rgb)`` pairs, numbering classes from 0."""
        return cls(tuple(PaletteEntry(i, n, tuple(int(v) for v in c)) for i, (n, c) in enumerate(items)), **kwargs)

    @property
    def class_ids(self) -> list[int]:
        return [e.class_id for e in self.entries]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def id_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.class_id
        raise PaletteMismatchError(f"unknown class name {name!r}")

    def name_of(self, class_id: int) -> str:
        for e in self.entries:
            if e.class_id == class_id:
                return e.name
        raise PaletteMismatchError(f"class id {class_id} not in palette")

    def index_of(self, class_id: int) -> int:
        """Position of ``class_id`` in id order (0..C-1)."""
        return self.class_ids.index(class_id)

    def lookup_table(self) -> np.ndarray:
        """(256, 3) table mapping every id to its color; unknown ids get -1."""
        table = np.full((256, 3), -1, dtype=np.int16)
        for e in self.entries:
            table[e.class_id] = e.color
        table[self.unlabeled_id] = self.unlabeled_color
        return table

    def subset(self, names: Iterable[str]) -> "ClassPalette":
        keep = set(names)
        return ClassPalette(tuple(e for e in self.entries if e.name in keep),
                            self.unlabeled_id, self.unlabeled_color)


@dataclass(frozen=True)
class ClassDistribution:
    """Ordered ``(class_name, ratio)`` phrases; the remainder is unlabeled area."""

    phrases: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        phrases = tuple((str(n), float(r)) for n, r in self.phrases)
        object.__setattr__(self, "phrases", phrases)
        names = [n for n, _ in phrases]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate class names in distribution: {names}")
        for n, r in phrases:
            if not 0.0 <= r <= 1.0:
                raise DataError(f"ratio for {n!r} outside [0, 1]: {r}")
        if self.total > 1 + 1e-9:
            raise DataError(f"ratios sum to {self.total} > 1")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.phrases]

    @property
    def ratios(self) -> list[float]:
        return [r for _, r in self.phrases]

    @property
    def total(self) -> float:
        return float(sum(r for _, r in self.phrases))

    def as_dict(self) -> dict[str, float]:
        return dict(self.phrases)

    def validate(self, palette: ClassPalette) -> None:
        known = set(palette.names)
        for n in self.names:
            if n not in known:
                raise PaletteMismatchError(f"class {n!r} not in palette")

    def __len__(self):
        return len(self.phrases)


def check_layout(layout: np.ndarray, palette: ClassPalette) -> np.ndarray:
    layout = np.asarray(layout)
    if layout.ndim != 2 or layout.shape[0] < 1 or layout.shape[1] < 1:
        raise DataError(f"layout must be a non-empty 2-D grid, got shape {layout.shape}")
    valid = set(palette.class_ids) | {palette.unlabeled_id}
    present = set(np.unique(layout).tolist())
    unknown = sorted(present - valid)
    if unknown:
        raise PaletteMismatchError(f"layout contains ids not in palette: {unknown}")
    return layout


def compute_class_ratios(layout: np.ndarray, palette: ClassPalette) -> ClassDistribution:
    """Fraction of the grid covered by each present class, ascending class id."""
    layout = check_layout(layout, palette)
    counts = np.bincount(layout.ravel().astype(np.int64), minlength=256)
    total = layout.size
    phrases = [(e.name, counts[e.class_id] / total) for e in palette.entries if counts[e.class_id] > 0]
    return ClassDistribution(tuple(phrases))


def unlabeled_fraction(layout: np.ndarray, palette: ClassPalette) -> float:
    layout = np.asarray(layout)
    return float(np.count_nonzero(layout == palette.unlabeled_id)) / layout.size


def layout_to_colormap(layout: np.ndarray, palette: ClassPalette) -> np.ndarray:
    layout = check_layout(layout, palette)
    return palette.lookup_table()[layout].astype(np.uint8)


def colormap_to_layout(colormap: np.ndarray, palette: ClassPalette, allow_unlabeled: bool = True) -> np.ndarray:
    """Project RGB pixels onto class ids.

    Exact palette colors decode directly.  Any other pixel takes the class with
    the nearest palette color (Euclidean RGB); ties go to the lowest class id
    and the unlabeled sentinel loses every tie.  With ``allow_unlabeled=False``
    the sentinel is not a candidate at all, which is what generated (complete)
    layouts need.
    """
    colormap = np.asarray(colormap)
    if colormap.ndim != 3 or colormap.shape[2] != 3 or colormap.shape[0] < 1 or colormap.shape[1] < 1:
        raise DataError(f"color map must have shape (H, W, 3), got {colormap.shape}")
    ids = list(palette.class_ids)
    colors = [e.color for e in palette.entries]
    if allow_unlabeled:
        # appended last so that argmin's first-hit rule makes it lose ties
        ids.append(palette.unlabeled_id)
        colors.append(palette.unlabeled_color)
    ids_arr = np.asarray(ids, dtype=np.uint8)
    colors_arr = np.asarray(colors, dtype=np.int64)

    pix = np.clip(np.rint(colormap), 0, 255).astype(np.int64).reshape(-1, 3)
    out = np.empty(pix.shape[0], dtype=np.uint8)
    packed = _pack(pix)
    keys = _pack(colors_arr)
    order = np.argsort(keys)
    pos = np.clip(np.searchsorted(keys[order], packed), 0, len(keys) - 1)
    exact = keys[order][pos] == packed
    out[exact] = ids_arr[order][pos[exact]]

    rest = ~exact
    if rest.any():
        diff = pix[rest, None, :] - colors_arr[None, :, :]
        dist2 = np.einsum("nkc,nkc->nk", diff, diff)
        out[rest] = ids_arr[np.argmin(dist2, axis=1)]
    return out.reshape(colormap.shape[:2])


# --- persistence -----------------------------------------------------------

def load_palette(path: str | os.PathLike) -> ClassPalette:
    """Read ``unlabeled <id> <r> <g> <b>`` then ``<id> <name> <r> <g> <b>`` lines.

    Class names may contain spaces; the id is the first field and the color the
    last three.  Blank lines and ``#`` comments are skipped.
    """
    entries = []
    unlabeled = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "unlabeled":
                    if len(parts) != 5:
                        raise ValueError
                    unlabeled = (int(parts[1]), tuple(int(v) for v in parts[2:5]))
                    continue
                if len(parts) < 5:
                    raise ValueError
                entries.append(PaletteEntry(int(parts[0]), " ".join(parts[1:-3]),
                                            tuple(int(v) for v in parts[-3:])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed palette line {raw.rstrip()!r}") from None
    if unlabeled is None:
        raise DataError(f"{path}: missing 'unlabeled <id> <r> <g> <b>' header")
    return ClassPalette(tuple(entries), unlabeled[0], unlabeled[1])


def save_palette(palette: ClassPalette, path: str | os.PathLike) -> None:
    lines = ["unlabeled {} {} {} {}".format(palette.unlabeled_id, *palette.unlabeled_color)]
    lines += ["{} {} {} {} {}".format(e.class_id, e.name, *e.color) for e in palette.entries]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_layout(layout: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(np.asarray(layout, dtype=np.uint8)).save(path, format="PNG")


def load_layout(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: expected a single-channel indexed image, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def save_colormap(colormap: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(np.asarray(colormap, dtype=np.uint8)).save(path, format="PNG")


def load_colormap(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)
