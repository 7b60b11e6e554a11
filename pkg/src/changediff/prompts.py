"""Multi-class distribution prompts: building, parsing, tokenizing and editing.

Prompts look like ``A remote sensing photo with (building: 0.35) (water: 0.20)``.
Every phrase remembers which tokens hold its class name and its ratio literal,
so attention columns can be sliced per class later on.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .codec import ClassDistribution, ClassPalette
from .errors import (
    DegenerateDistributionError,
    EmptyDistributionError,
    EventInapplicableError,
    PromptParseError,
)

PREFIX = "A remote sensing photo with "
TOKENIZER_ID = "changediff-regex-v1"
RESHAPE_FLOOR = 0.01
EVENT_MODES = ("ratio_reshape", "class_expand", "class_reduce")

_TOKEN_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]")
_PHRASE_RE = re.compile(r"\(([^()]*)\)")
_BODY_RE = re.compile(r"^(\S(?:.*\S)?): (\d+(?:\.\d+)?)$")


class RatioRangeError(PromptParseError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Split into words, decimal literals and single punctuation marks."""
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def detokenize(text: str, tokens: list[Token], token_range: tuple[int, int]) -> str:
    start, end = token_range
    return text[tokens[start].start:tokens[end - 1].end]


@dataclass(frozen=True)
class PhraseSpan:
    class_name: str
    name_tokens: tuple[int, int]
    ratio_tokens: tuple[int, int]


@dataclass(frozen=True)
class TextPrompt:
    text: str
    spans: tuple[PhraseSpan, ...]
    tokenizer_id: str = TOKENIZER_ID

    @classmethod
    def from_text(cls, text: str) -> "TextPrompt":
        """Recover spans from prompt text (no palette check)."""
        return cls(text, tuple(_locate_spans(text)))

    @property
    def tokens(self) -> list[Token]:
        return tokenize(self.text)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def ratio_literal(self, span: PhraseSpan) -> str:
        return detokenize(self.text, self.tokens, span.ratio_tokens)

    def serialize(self) -> str:
        tokens = self.tokens
        phrases = [f"({detokenize(self.text, tokens, s.name_tokens)}: "
                   f"{detokenize(self.text, tokens, s.ratio_tokens)})" for s in self.spans]
        return PREFIX + " ".join(phrases)

    @property
    def class_names(self) -> list[str]:
        return [s.class_name for s in self.spans]


def _check_name(name: str) -> None:
    if not name or name != name.strip() or any(c in name for c in "():\n\""):
        raise PromptParseError(f"class name {name!r} cannot be serialized in a prompt")


def _round_ratios(ratios: list[float]) -> list[int]:
    """Ratios in hundredths; plain rounding unless that would overshoot 100."""
    hundredths = [int(f"{r:.2f}".replace(".", "")) for r in ratios]
    if sum(hundredths) <= 100:
        return hundredths
    # largest-remainder apportionment of the (rounded) total
    target = min(100, round(sum(ratios) * 100))
    floors = [math.floor(r * 100 + 1e-9) for r in ratios]
    remainders = sorted(range(len(ratios)), key=lambda i: (-(ratios[i] * 100 - floors[i]), i))
    for i in remainders[:max(0, target - sum(floors))]:
        floors[i] += 1
    return floors


def build_prompt(dist: ClassDistribution, order_seed: int | None) -> TextPrompt:
    """Serialize a distribution; ``order_seed=None`` keeps the given order."""
    if len(dist) == 0:
        raise EmptyDistributionError("cannot build a prompt from an empty distribution")
    phrases = list(dist.phrases)
    if order_seed is not None:
        perm = np.random.Generator(np.random.Philox(order_seed)).permutation(len(phrases))
        phrases = [phrases[i] for i in perm]
    for name, _ in phrases:
        _check_name(name)
    hundredths = _round_ratios([r for _, r in phrases])
    text = PREFIX + " ".join(f"({name}: {h // 100}.{h % 100:02d})" for (name, _), h in zip(phrases, hundredths))
    return TextPrompt.from_text(text)


def _locate_spans(text: str) -> list[PhraseSpan]:
    if not text.startswith(PREFIX):
        raise PromptParseError("prompt does not start with the template prefix", text[:len(PREFIX)])
    tokens = tokenize(text)
    starts = {t.start: i for i, t in enumerate(tokens)}
    ends = {t.end: i for i, t in enumerate(tokens)}
    spans = []
    pos = len(PREFIX)
    body = text[pos:]
    if not body.strip():
        raise PromptParseError("prompt has no phrases", body)
    for k, m in enumerate(_PHRASE_RE.finditer(text, pos)):
        gap = text[pos:m.start()]
        if gap != ("" if k == 0 else " "):
            raise PromptParseError("phrases must be separated by single spaces", gap or text[pos:m.end()])
        inner = _BODY_RE.match(m.group(1))
        if inner is None:
            raise PromptParseError("malformed phrase, expected '(name: ratio)'", m.group())
        name_start = m.start(1)
        name_end = name_start + len(inner.group(1))
        ratio_start = m.start(1) + inner.start(2)
        ratio_end = m.end(1)
        spans.append(PhraseSpan(
            inner.group(1),
            (starts[name_start], ends[name_end] + 1),
            (starts[ratio_start], ends[ratio_end] + 1),
        ))
        pos = m.end()
    if pos != len(text):
        raise PromptParseError("unexpected trailing text", text[pos:])
    return spans


def parse_prompt(text: str, palette: ClassPalette) -> ClassDistribution:
    """Phrases in textual order with ratios read as decimal fractions."""
    prompt = TextPrompt.from_text(text)
    known = set(palette.names)
    phrases = []
    for span in prompt.spans:
        literal = prompt.ratio_literal(span)
        if span.class_name not in known:
            raise PromptParseError(f"unknown class name {span.class_name!r}", f"({span.class_name}: {literal})")
        ratio = float(literal)
        if not 0.0 <= ratio <= 1.0:
            raise RatioRangeError(f"ratio {literal} outside [0, 1]", f"({span.class_name}: {literal})")
        phrases.append((span.class_name, ratio))
    if len({n for n, _ in phrases}) != len(phrases):
        raise PromptParseError("class named twice", text[len(PREFIX):])
    if sum(r for _, r in phrases) > 1 + 1e-9:
        raise RatioRangeError("ratios sum above 1", text[len(PREFIX):])
    return ClassDistribution(tuple(phrases))


def _normalized(names: list[str], ratios: list[float]) -> ClassDistribution:
    total = math.fsum(ratios)
    out = [r / total for r in ratios]
    # push the rounding residue into the largest entry so the sum is 1
    k = int(np.argmax(out))
    out[k] = 1.0 - math.fsum(out[:k] + out[k + 1:])
    return ClassDistribution(tuple(zip(names, out)))


def amplify_ratios(dist: ClassDistribution) -> ClassDistribution:
    """Scale a sparse layout's ratios up to full coverage, keeping proportions."""
    if len(dist) == 0 or dist.total <= 0:
        raise DegenerateDistributionError("distribution has zero total mass")
    return _normalized(dist.names, dist.ratios)


# --- time-varying events ---------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    mode: str
    perturbation: float = 0.1
    new_class_ratio_range: tuple[float, float] = (0.05, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in EVENT_MODES:
            raise ValueError(f"unknown event mode {self.mode!r}; expected one of {EVENT_MODES}")
        if not 0.0 <= self.perturbation <= 1.0:
            raise ValueError(f"perturbation must lie in [0, 1], got {self.perturbation}")
        lo, hi = self.new_class_ratio_range
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"new class ratio range must satisfy 0 < lo < hi < 1, got {lo},{hi}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_line(self) -> str:
        lo, hi = self.new_class_ratio_range
        return f"mode={self.mode} perturbation={self.perturbation!r} range={lo!r},{hi!r} seed={self.seed}"

    @classmethod
    def from_line(cls, line: str) -> "EventSpec":
        fields = dict(part.split("=", 1) for part in line.split())
        if set(fields) != {"mode", "perturbation", "range", "seed"}:
            raise ValueError(f"malformed event line {line!r}")
        lo, hi = (float(v) for v in fields["range"].split(","))
        return cls(fields["mode"], float(fields["perturbation"]), (lo, hi), int(fields["seed"]))


def expand_with(dist: ClassDistribution, name: str, ratio: float) -> ClassDistribution:
    """Insert ``name`` at ``ratio`` and shrink the existing phrases to make room."""
    phrases = [(n, r * (1.0 - ratio)) for n, r in dist.phrases] + [(name, ratio)]
    return ClassDistribution(tuple(phrases))


def apply_event(dist: ClassDistribution, spec: EventSpec, palette: ClassPalette) -> ClassDistribution:
    if len(dist) == 0 or abs(dist.total - 1.0) > 1e-9:
        raise EventInapplicableError(spec.mode, f"distribution must sum to 1, got {dist.total}")
    dist.validate(palette)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    names, ratios = dist.names, dist.ratios

    if spec.mode == "ratio_reshape":
        if spec.perturbation == 0:
            return dist
        noise = rng.uniform(-spec.perturbation, spec.perturbation, size=len(ratios))
        shaken = np.clip(np.asarray(ratios) + noise, RESHAPE_FLOOR, 1.0)
        return _normalized(names, shaken.tolist())

    if spec.mode == "class_expand":
        absent = [n for n in palette.names if n not in set(names)]
        if not absent:
            raise EventInapplicableError(spec.mode, "every palette class is already present")
        name = absent[int(rng.integers(len(absent)))]
        ratio = float(rng.uniform(*spec.new_class_ratio_range))
        return expand_with(dist, name, ratio)

    if len(dist) < 2:
        raise EventInapplicableError(spec.mode, "need at least two classes to remove one")
    drop = int(rng.integers(len(names)))
    return _normalized(names[:drop] + names[drop + 1:], ratios[:drop] + ratios[drop + 1:])
