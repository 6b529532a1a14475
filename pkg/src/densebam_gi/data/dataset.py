"""Batching, train/validation split and the on-disk PGM + TSV dataset cache."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .ink import load_inkml, rasterize
from .synthetic import Sample
from .vocab import Vocabulary, tokenize_latex


def collate(samples: list[Sample], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack images (right-padded with background) and target ids.

    Returns ``images`` N x 1 x H x W, ``targets`` N x S (ids after the start
    token, padded with ``pad_id``) and a float ``mask`` N x S.
    """
    h = max(s.image.shape[1] for s in samples)
    w = max(s.image.shape[2] for s in samples)
    images = np.zeros((len(samples), 1, h, w))
    steps = max(len(s.tokens) - 1 for s in samples)
    targets = np.full((len(samples), steps), pad_id, dtype=np.int64)
    mask = np.zeros((len(samples), steps))
    for i, s in enumerate(samples):
        images[i, :, :s.image.shape[1], :s.image.shape[2]] = s.image
        tgt = s.tokens[1:]
        targets[i, :len(tgt)] = tgt
        mask[i, :len(tgt)] = 1.0
    return images, targets, mask


def split(samples: list, seed: int, val_fraction: float = 0.1) -> tuple[list, list]:
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def batches(samples: list, size: int, rng: np.random.Generator | None = None) -> list[list]:
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    return [[samples[i] for i in order[k:k + size]] for k in range(0, len(samples), size)]


# ---------------------------------------------------------------- PGM


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Write a 2-D array of 0..255 values as binary PGM (P5)."""
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data)


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).astype(np.float64)


def write_cache(directory: str | Path, samples: list[Sample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.tsv", "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for i, s in enumerate(samples):
            name = f"{i:06d}.pgm"
            write_pgm(directory / name, s.image[0] * 255)
            out.writerow([name, s.label])


def read_cache(directory: str | Path, vocab: Vocabulary) -> list[Sample]:
    directory = Path(directory)
    samples = []
    with open(directory / "manifest.tsv", encoding="utf-8", newline="") as fh:
        for name, label in csv.reader(fh, delimiter="\t"):
            img = (read_pgm(directory / name) > 127).astype(np.float64)[None]
            samples.append(Sample(img, tokenize_latex(label, vocab), label))
    return samples


def load_inkml_dir(directory: str | Path, vocab: Vocabulary, target_height: int = 64,
                   stroke_width: int = 2, pad_multiple: int = 16) -> list[Sample]:
    """Rasterize every labelled ``*.inkml`` file under ``directory`` (sorted by name)."""
    samples = []
    for path in sorted(Path(directory).rglob("*.inkml")):
        doc = load_inkml(path)
        if not doc.label:
            continue
        image = rasterize(doc, target_height, stroke_width, pad_multiple)
        samples.append(Sample(image, tokenize_latex(doc.label, vocab), doc.label))
    if not samples:
        raise ValueError(f"no labelled InkML files under {directory}")
    return samples
