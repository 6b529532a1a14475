"""InkML parsing and stroke rasterization to binary images."""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class InkmlError(ValueError):
    """Malformed or empty InkML input."""

    def __init__(self, message: str, line: int | None = None, source: str = ""):
        where = f"{source}:" if source else ""
        where += f"line {line}: " if line is not None else (": " if where else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class InkDocument:
    traces: list[np.ndarray]
    label: str | None = None
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for t in self.traces:
            if t.ndim != 2 or t.shape[1] != 2 or len(t) == 0:
                raise ValueError("each trace must be a non-empty K x 2 array of points")
            if not np.isfinite(t).all():
                raise ValueError("trace coordinates must be finite")


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _parse_trace(text: str, source: str) -> np.ndarray:
    pts = []
    for chunk in text.split(","):
        vals = chunk.split()
        if not vals:
            continue
        if len(vals) < 2:
            raise InkmlError(f"trace point {chunk.strip()!r} has fewer than two coordinates", source=source)
        try:
            pts.append((float(vals[0]), float(vals[1])))
        except ValueError as exc:
            raise InkmlError(f"non-numeric coordinate in {chunk.strip()!r}", source=source) from exc
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def parse_inkml(text: str, source_id: str = "") -> InkDocument:
    """Read traces (x, y only; extra channels ignored) and the truth annotation."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise InkmlError(f"malformed XML ({exc.msg if hasattr(exc, 'msg') else exc})",
                         line=exc.position[0], source=source_id) from exc
    traces, label = [], None
    for el in root.iter():
        tag = _local(el.tag)
        if tag == "trace":
            pts = _parse_trace(el.text or "", source_id)
            if len(pts) == 0:
                log.warning("%s: skipping empty trace id=%s", source_id or "<inkml>", el.get("id"))
                continue
            if not np.isfinite(pts).all():
                raise InkmlError("non-finite coordinate", source=source_id)
            traces.append(pts)
        elif tag == "annotation" and el.get("type") == "truth" and label is None:
            # the document-level truth comes before any traceGroup annotations
            label = (el.text or "").strip().strip("$").strip() or None
    if not traces:
        raise InkmlError("no traces", source=source_id)
    return InkDocument(traces, label, source_id)


def load_inkml(path: str | Path) -> InkDocument:
    path = Path(path)
    return parse_inkml(path.read_text(encoding="utf-8"), source_id=path.name)


# ---------------------------------------------------------------- rasterization


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer pixels on the segment from (r0, c0) to (r1, c1), both ends included."""
    pts = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 >= r0 else -1), (1 if c1 >= c0 else -1)
    err = dc - dr
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def _dilate(mask: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return mask
    out = np.zeros_like(mask)
    lo = -((width - 1) // 2)
    h, w = mask.shape
    for dr in range(lo, lo + width):
        for dc in range(lo, lo + width):
            src = mask[max(0, -dr):h - max(0, dr), max(0, -dc):w - max(0, dc)]
            out[max(0, dr):max(0, dr) + src.shape[0], max(0, dc):max(0, dc) + src.shape[1]] |= src
    return out


def normalize_points(doc: InkDocument, target_height: int | None, stroke_width: int,
                     max_aspect: float = 32.0) -> tuple[list[np.ndarray], int, int]:
    """Map trace coordinates to (row, col) pixel space; returns (traces, height, width).

    With ``target_height=None`` coordinates are used as-is after shifting the
    bounding box to the origin.
    """
    pts = np.concatenate(doc.traces)
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    if target_height is None:
        traces = [np.round(t - lo)[:, ::-1] for t in doc.traces]
        return traces, int(round(span[1])) + 1, int(round(span[0])) + 1
    pad = stroke_width
    inner = target_height - 1 - 2 * pad
    if inner < 1:
        raise ValueError("target_height too small for the stroke width")
    if span.max() == 0:
        mid = np.array([target_height // 2, target_height // 2], dtype=np.float64)
        return [np.tile(mid, (len(t), 1)) for t in doc.traces], target_height, target_height
    limits = []
    if span[1] > 0:
        limits.append(inner / span[1])
    if span[0] > 0:
        limits.append(max_aspect * inner / span[0])
    scale = min(limits)
    yoff = pad + (inner - span[1] * scale) / 2
    traces = [np.stack([(t[:, 1] - lo[1]) * scale + yoff, (t[:, 0] - lo[0]) * scale + pad], axis=1)
              for t in doc.traces]
    width = int(math.ceil(span[0] * scale)) + 1 + 2 * pad
    return traces, target_height, width


def rasterize(doc: InkDocument, target_height: int | None = 64, stroke_width: int = 2,
              pad_multiple: int = 16, max_aspect: float = 32.0) -> np.ndarray:
    """Binary 1 x H x W image (ink 1, background 0); width padded to ``pad_multiple``."""
    if not doc.traces:
        raise ValueError("cannot rasterize a document without traces")
    traces, h, w = normalize_points(doc, target_height, stroke_width, max_aspect)
    w_pad = -(-w // pad_multiple) * pad_multiple if pad_multiple > 1 else w
    canvas = np.zeros((h, w_pad), dtype=bool)
    for t in traces:
        ipts = np.rint(t).astype(int)
        ipts[:, 0] = np.clip(ipts[:, 0], 0, h - 1)
        ipts[:, 1] = np.clip(ipts[:, 1], 0, w - 1)
        if len(ipts) == 1:
            canvas[ipts[0, 0], ipts[0, 1]] = True
        for (r0, c0), (r1, c1) in zip(ipts[:-1], ipts[1:]):
            for r, c in bresenham(r0, c0, r1, c1):
                canvas[r, c] = True
    return _dilate(canvas, stroke_width).astype(np.float64)[None]
