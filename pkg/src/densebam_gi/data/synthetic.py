"""Seeded synthetic handwritten expressions.

A small grammar produces LaTeX token sequences; a box layout places stroke
templates for each symbol and per-sample jitter makes the result look drawn
rather than typeset.  Every sample draws from its own generator seeded with
``(seed, index)`` so any subset can be regenerated independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ink import InkDocument, rasterize
from .vocab import DIGITS, GREEK, LETTERS, Vocabulary

MAX_TOKENS = 35


def _arc(cx, cy, rx, ry, a0, a1, n=10):
    a = np.radians(np.linspace(a0, a1, n))
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


def _line(*pts):
    return np.array(pts, dtype=np.float64)


# glyphs live in a box [0, width] x [0, height] with the baseline at y=0, y up
GLYPHS: dict[str, tuple[float, list[np.ndarray]]] = {
    "0": (0.6, [_arc(0.3, 0.5, 0.28, 0.5, 90, 450, 16)]),
    "1": (0.4, [_line((0.05, 0.8), (0.25, 1.0), (0.25, 0.0))]),
    "2": (0.6, [np.vstack([_arc(0.3, 0.72, 0.27, 0.27, 160, -30, 8), _line((0.02, 0.0), (0.6, 0.0))])]),
    "3": (0.6, [_arc(0.28, 0.75, 0.26, 0.25, 150, -90, 8), _arc(0.28, 0.25, 0.3, 0.25, 90, -150, 8)]),
    "4": (0.6, [_line((0.45, 0.0), (0.45, 1.0), (0.0, 0.3), (0.6, 0.3))]),
    "5": (0.6, [np.vstack([_line((0.55, 1.0), (0.1, 1.0), (0.07, 0.55)),
                           _arc(0.3, 0.3, 0.28, 0.3, 130, -140, 9)])]),
    "6": (0.6, [np.vstack([_arc(0.45, 0.55, 0.4, 0.45, 70, 180, 6), _arc(0.32, 0.28, 0.27, 0.28, 180, 540, 12)])]),
    "7": (0.6, [_line((0.0, 1.0), (0.6, 1.0), (0.2, 0.0))]),
    "8": (0.6, [_arc(0.3, 0.75, 0.22, 0.25, -90, 270, 12), _arc(0.3, 0.25, 0.28, 0.25, 90, 450, 12)]),
    "9": (0.6, [np.vstack([_arc(0.3, 0.72, 0.26, 0.28, 0, 360, 12), _line((0.56, 0.72), (0.5, 0.0))])]),
    "a": (0.5, [_arc(0.22, 0.3, 0.22, 0.3, 30, 330, 10), _line((0.47, 0.6), (0.47, 0.0))]),
    "b": (0.5, [_line((0.05, 1.0), (0.05, 0.0)), _arc(0.27, 0.28, 0.22, 0.28, 180, -180, 10)]),
    "c": (0.45, [_arc(0.25, 0.3, 0.23, 0.3, 40, 320, 9)]),
    "n": (0.5, [_line((0.03, 0.6), (0.03, 0.0)), np.vstack([_arc(0.25, 0.35, 0.22, 0.25, 180, 0, 7),
                                                           _line((0.47, 0.35), (0.47, 0.0))])]),
    "x": (0.5, [_line((0.0, 0.6), (0.5, 0.0)), _line((0.5, 0.6), (0.0, 0.0))]),
    "y": (0.5, [_line((0.0, 0.6), (0.25, 0.1)), _line((0.5, 0.6), (0.1, -0.4))]),
    "z": (0.5, [_line((0.0, 0.6), (0.5, 0.6), (0.0, 0.0), (0.5, 0.0))]),
    "s": (0.4, [np.vstack([_arc(0.2, 0.45, 0.17, 0.15, 20, 270, 6), _arc(0.2, 0.15, 0.17, 0.15, 90, -160, 6)])]),
    "i": (0.15, [_line((0.07, 0.6), (0.07, 0.0)), _line((0.07, 0.85), (0.08, 0.87))]),
    "o": (0.45, [_arc(0.22, 0.3, 0.21, 0.3, 90, 450, 12)]),
    "\\alpha": (0.6, [np.vstack([_arc(0.25, 0.3, 0.24, 0.3, 10, 350, 10), _line((0.45, 0.2), (0.6, 0.0))])]),
    "\\beta": (0.5, [_line((0.05, -0.4), (0.05, 0.85)), _arc(0.25, 0.78, 0.2, 0.2, 180, -90, 6),
                     _arc(0.25, 0.3, 0.23, 0.28, 90, -180, 8)]),
    "\\pi": (0.6, [_line((0.0, 0.55), (0.6, 0.6)), _line((0.17, 0.58), (0.14, 0.0)),
                   _line((0.45, 0.58), (0.48, 0.0))]),
    "+": (0.6, [_line((0.0, 0.45), (0.6, 0.45)), _line((0.3, 0.15), (0.3, 0.75))]),
    "-": (0.6, [_line((0.0, 0.45), (0.6, 0.45))]),
    "=": (0.6, [_line((0.0, 0.6), (0.6, 0.6)), _line((0.0, 0.3), (0.6, 0.3))]),
    "\\times": (0.5, [_line((0.0, 0.7), (0.5, 0.2)), _line((0.5, 0.7), (0.0, 0.2))]),
    "(": (0.3, [_arc(0.35, 0.45, 0.3, 0.65, 120, 240, 7)]),
    ")": (0.3, [_arc(-0.05, 0.45, 0.3, 0.65, 60, -60, 7)]),
}

ATOMS = DIGITS + LETTERS + GREEK
BINARY_OPS = ["+", "-", "=", r"\times"]


@dataclass
class Box:
    strokes: list[np.ndarray]
    width: float
    bottom: float
    top: float

    def shifted(self, dx: float, dy: float) -> Box:
        d = np.array([dx, dy])
        return Box([s + d for s in self.strokes], self.width, self.bottom + dy, self.top + dy)

    def scaled(self, k: float) -> Box:
        return Box([s * k for s in self.strokes], self.width * k, self.bottom * k, self.top * k)


def _glyph_box(sym: str, rng: np.random.Generator, jitter: float) -> Box:
    width, strokes = GLYPHS[sym]
    # per-glyph affine wobble: small shear and anisotropic scale
    a = np.eye(2) + rng.normal(0.0, jitter, size=(2, 2))
    out = [s @ a.T + rng.normal(0.0, jitter * 0.3, size=s.shape) for s in strokes]
    pts = np.concatenate(out)
    lo = min(0.0, pts[:, 0].min())
    out = [s - np.array([lo, 0.0]) for s in out]
    return Box(out, max(width, pts[:, 0].max() - lo), min(0.0, pts[:, 1].min()), max(0.6, pts[:, 1].max()))


def _hcat(boxes: list[Box], gap: float) -> Box:
    strokes, x = [], 0.0
    for b in boxes:
        strokes += [s + np.array([x, 0.0]) for s in b.strokes]
        x += b.width + gap
    return Box(strokes, max(x - gap, 0.0), min(b.bottom for b in boxes), max(b.top for b in boxes))


class _Layout:
    """Recursive-descent layout over a token list."""

    def __init__(self, tokens: list[str], rng: np.random.Generator, jitter: float):
        self.toks, self.pos, self.rng, self.jitter = tokens, 0, rng, jitter

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expect: str | None = None) -> str:
        tok = self.toks[self.pos]
        if expect is not None and tok != expect:
            raise ValueError(f"expected {expect!r} at position {self.pos}, got {tok!r}")
        self.pos += 1
        return tok

    def group(self) -> Box:
        self.take("{")
        box = self.sequence(stop="}")
        self.take("}")
        return box

    def sequence(self, stop: str | None = None) -> Box:
        boxes = []
        while self.peek() is not None and self.peek() != stop:
            boxes.append(self.item())
        if not boxes:
            return Box([], 0.0, 0.0, 0.6)
        return _hcat(boxes, 0.12)

    def item(self) -> Box:
        tok = self.take()
        if tok == r"\frac":
            num, den = self.group().scaled(0.8), self.group().scaled(0.8)
            w = max(num.width, den.width) + 0.2
            bar_y = 0.45
            num = num.shifted((w - num.width) / 2, bar_y + 0.12 - num.bottom)
            den = den.shifted((w - den.width) / 2, bar_y - 0.12 - den.top)
            bar = _line((0.0, bar_y), (w, bar_y + self.rng.normal(0, 0.02)))
            base = Box(num.strokes + den.strokes + [bar], w, den.bottom, num.top)
        elif tok == r"\sqrt":
            inner = self.group()
            top = inner.top + 0.12
            inner = inner.shifted(0.4, 0.0)
            sign = _line((0.0, 0.35), (0.12, 0.45), (0.22, inner.bottom - 0.05), (0.35, top),
                         (inner.width + 0.45, top))
            base = Box(inner.strokes + [sign], inner.width + 0.45, inner.bottom - 0.05, top)
        elif tok in (r"\sin", r"\cos"):
            letters = ["s", "i", "n"] if tok == r"\sin" else ["c", "o", "s"]
            base = _hcat([_glyph_box(c, self.rng, self.jitter) for c in letters], 0.06)
        elif tok in GLYPHS:
            base = _glyph_box(tok, self.rng, self.jitter)
        else:
            raise ValueError(f"no stroke template for token {tok!r}")
        while self.peek() in ("^", "_"):
            kind = self.take()
            script = self.group().scaled(0.6)
            dy = base.top - 0.25 - script.bottom if kind == "^" else base.bottom - 0.2 - script.top + 0.3
            script = script.shifted(base.width + 0.05, dy)
            base = Box(base.strokes + script.strokes, base.width + 0.05 + script.width,
                       min(base.bottom, script.bottom), max(base.top, script.top))
        return base


def layout_strokes(tokens: list[str], rng: np.random.Generator, jitter: float = 0.04) -> list[np.ndarray]:
    """Place stroke templates for ``tokens`` and apply a global affine perturbation.

    Returned traces are in y-down ink coordinates, as InkML files store them.
    """
    lay = _Layout(tokens, rng, jitter)
    box = lay.sequence()
    if lay.pos != len(tokens):
        raise ValueError(f"unbalanced token sequence near position {lay.pos}")
    angle = rng.normal(0.0, 0.03)
    shear = rng.normal(0.0, 0.08)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    aff = rot @ np.array([[1.0 + rng.normal(0, 0.05), shear], [0.0, 1.0]])
    flip = np.array([1.0, -1.0])
    return [(s @ aff.T) * flip * 100.0 for s in box.strokes]


# ---------------------------------------------------------------- grammar


def _atom(rng) -> list[str]:
    return [ATOMS[rng.integers(len(ATOMS))]]


def _term(rng, depth: int) -> list[str]:
    if depth <= 0:
        return _atom(rng)
    kind = rng.choice(["atom", "atom", "sup", "sub", "frac", "sqrt", "func", "paren"])
    if kind == "atom":
        return _atom(rng)
    if kind == "sup":
        return _atom(rng) + ["^", "{"] + _expr(rng, depth - 1, 3) + ["}"]
    if kind == "sub":
        return _atom(rng) + ["_", "{"] + _expr(rng, depth - 1, 2) + ["}"]
    if kind == "frac":
        return [r"\frac", "{"] + _expr(rng, depth - 1, 4) + ["}", "{"] + _expr(rng, depth - 1, 4) + ["}"]
    if kind == "sqrt":
        return [r"\sqrt", "{"] + _expr(rng, depth - 1, 4) + ["}"]
    if kind == "func":
        return [[r"\sin", r"\cos"][rng.integers(2)]] + _atom(rng)
    return ["("] + _expr(rng, depth - 1, 4) + [")"]


def _expr(rng, depth: int, max_terms: int) -> list[str]:
    if depth <= 0:
        return _atom(rng)
    out = _term(rng, depth)
    for _ in range(rng.integers(max_terms)):
        out += [BINARY_OPS[rng.integers(len(BINARY_OPS))]] + _term(rng, depth)
    return out


def sample_expression(rng: np.random.Generator, depth: int, max_tokens: int = MAX_TOKENS) -> list[str]:
    """One expression of at most ``max_tokens`` symbols; depth 0 yields a single atom."""
    if depth <= 0:
        return _atom(rng)
    while True:
        toks = _expr(rng, depth, int(rng.integers(1, 8)))
        if len(toks) <= max_tokens:
            return toks


@dataclass
class Sample:
    image: np.ndarray  # 1 x H x W, values in {0, 1}
    tokens: list[int]  # framed by start and end ids
    label: str

    @property
    def body(self) -> list[int]:
        return self.tokens[1:-1]


def make_document(symbols: list[str], rng: np.random.Generator, jitter: float = 0.04,
                  source_id: str = "") -> InkDocument:
    return InkDocument(layout_strokes(symbols, rng, jitter), " ".join(symbols), source_id)


def generate_synthetic(seed: int, count: int, grammar_depth: int = 3, vocab: Vocabulary | None = None,
                       target_height: int = 64, stroke_width: int = 2, jitter: float = 0.04,
                       start: int = 0, pad_multiple: int = 16) -> list[Sample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    vocab = vocab or Vocabulary()
    samples = []
    for idx in range(start, start + count):
        rng = np.random.default_rng([seed, idx])
        symbols = sample_expression(rng, grammar_depth)
        doc = make_document(symbols, rng, jitter, source_id=f"synthetic-{seed}-{idx}")
        image = rasterize(doc, target_height, stroke_width, pad_multiple)
        ids = [vocab.sos_id] + vocab.encode(symbols) + [vocab.eos_id]
        samples.append(Sample(image, ids, doc.label))
    return samples
