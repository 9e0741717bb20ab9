"""Rendered-text screens: a bitmap glyph atlas, text compositing and augmentations."""
from __future__ import annotations

import logging
import math
import string
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from PIL import Image, ImageFont
from scipy import ndimage

from ..encoder import ImageGrid

log = logging.getLogger(__name__)

# Pillow's built-in bitmap font: 6x11 cells, capitals and digits 6 rows tall.
# Row 0 is blank for every printable character and is cropped away.
_CELL_W, _CELL_H, _CAP_H = 6, 10, 6
PRINTABLE = "".join(chr(c) for c in range(32, 127))
DEFAULT_CHARSET = string.ascii_uppercase + string.digits


class RenderError(ValueError):
    pass


@lru_cache(maxsize=None)
def _font():
    return ImageFont.load_default_imagefont()


@lru_cache(maxsize=4096)
def glyph(ch: str, px: int) -> np.ndarray:
    """Ink coverage in [0, 1] for one character whose capitals are ``px`` rows tall.

    The returned array is the full advance cell (no kerning), so consecutive
    glyphs tile without overlap.
    """
    if len(ch) != 1 or ch not in PRINTABLE:
        raise RenderError(f"no glyph for {ch!r}")
    if px < 3:
        raise RenderError(f"glyph size {px} below 3 px")
    m = _font().getmask(ch)
    cov = np.asarray(m, dtype=np.float32).reshape(m.size[1], m.size[0])[1:] / 255.0
    w, h = glyph_cell(px)
    if (w, h) != (_CELL_W, _CELL_H):
        img = Image.fromarray(cov.astype(np.float32), mode="F").resize((w, h), Image.BOX)
        cov = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    cov = cov.astype(np.float64)
    cov.flags.writeable = False
    return cov


def glyph_cell(px: int) -> tuple[int, int]:
    """(advance width, line height) of the glyph cell at size ``px``."""
    s = px / _CAP_H
    return max(1, round(_CELL_W * s)), max(1, round(_CELL_H * s))


def text_extent(text: str, px: int, tracking: int = 0) -> tuple[int, int]:
    w, h = glyph_cell(px)
    return len(text) * w + max(0, len(text) - 1) * tracking, h


@dataclass(frozen=True)
class GlyphPlacement:
    char: str
    left: int
    top: int
    px: int
    ink: float


def draw_text(canvas: np.ndarray, text: str, left: int, top: int, px: int, ink: float,
              tracking: int = 0) -> list[GlyphPlacement]:
    """Alpha-composite ``text`` onto a 2-D canvas in place."""
    w, h = glyph_cell(px)
    out = []
    x = left
    for ch in text:
        if ch != " ":
            a = glyph(ch, px)
            region = canvas[top:top + h, x:x + w]
            if region.shape != a.shape:
                raise RenderError(f"glyph {ch!r} at ({x},{top}) leaves the canvas")
            region += a * (ink - region)
            out.append(GlyphPlacement(ch, x, top, px, ink))
        x += w + tracking
    return out


def composite(width: int, height: int, background: float, glyphs) -> np.ndarray:
    """Reference composite of placed glyphs on a flat background."""
    canvas = np.full((height, width), background, dtype=np.float64)
    for g in glyphs:
        a = glyph(g.char, g.px)
        h, w = a.shape
        canvas[g.top:g.top + h, g.left:g.left + w] += a * (g.ink - background)
    return canvas


def quantize8(px: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are exact."""
    return np.round(np.clip(px, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class ScreenElement:
    """One labelled element: HTML-ish tag, cleaned attributes, text and pixel box."""

    tag: str
    attributes: dict = field(default_factory=dict)
    text: str = ""
    box: tuple[int, int, int, int] = (0, 0, 0, 0)  # left, top, right, bottom (exclusive)

    def area(self) -> int:
        l, t, r, b = self.box
        return max(0, r - l) * max(0, b - t)


@dataclass
class SyntheticScreen:
    image: ImageGrid
    elements: list[ScreenElement]
    resolution: tuple[int, int]  # width, height
    seed: int
    background: float = 1.0
    glyphs: list[GlyphPlacement] = field(default_factory=list, repr=False)
    kind: str = "ocr"

    def transcript(self) -> str:
        """Element texts in reading order (top to bottom, then left to right)."""
        order = sorted(self.elements, key=lambda e: (e.box[1], e.box[0]))
        return " ".join(e.text for e in order if e.text)


@dataclass(frozen=True)
class TextRenderSpec:
    """Knobs for one family of OCR screens.

    Ranges: glyph_px 3..64, rotation 0..30 degrees (0..180 with
    ``aggressive``), noise std 0..0.5, blur sigma 0..4 px.
    """

    glyph_px: int = 6
    rotation: float = 0.0
    noise: float = 0.0
    blur: float = 0.0
    erosion: bool = False
    aggressive: bool = False  # wide rotations plus random horizontal flips
    width: int = 112
    height: int = 112
    runs: int = 1
    min_chars: int = 4
    max_chars: int = 4
    charset: str = DEFAULT_CHARSET
    size_jitter: int = 0  # extra px drawn uniformly per run
    tracking: int = 0
    layout: str = "random"  # or "center"
    jitter: int = 0  # max offset from centre in "center" layout
    invert_prob: float = 0.0  # chance of light text on a dark background

    def __post_init__(self):
        max_rot = 180.0 if self.aggressive else 30.0
        checks = [
            (3 <= self.glyph_px <= 64, "glyph_px must be in [3, 64]"),
            (0.0 <= self.rotation <= max_rot, f"rotation must be in [0, {max_rot:g}]"),
            (0.0 <= self.noise <= 0.5, "noise must be in [0, 0.5]"),
            (0.0 <= self.blur <= 4.0, "blur must be in [0, 4]"),
            (self.width >= 8 and self.height >= 8, "canvas too small"),
            (self.runs >= 1, "runs must be >= 1"),
            (1 <= self.min_chars <= self.max_chars, "need 1 <= min_chars <= max_chars"),
            (self.charset and all(c in PRINTABLE for c in self.charset), "charset must be printable ASCII"),
            (self.size_jitter >= 0 and self.tracking >= 0 and self.jitter >= 0, "negative spacing"),
            (self.layout in ("random", "center"), f"unknown layout {self.layout!r}"),
            (0.0 <= self.invert_prob <= 1.0, "invert_prob must be a probability"),
        ]
        for ok, msg in checks:
            if not ok:
                raise RenderError(msg)


def _overlaps(a, b, margin=1) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _place_runs(spec: TextRenderSpec, rng: np.random.Generator):
    """Choose text, size and position for each run; overflowing runs are skipped."""
    placed = []
    for k in range(spec.runs):
        n = int(rng.integers(spec.min_chars, spec.max_chars + 1))
        text = "".join(rng.choice(list(spec.charset), size=n))
        px = spec.glyph_px + int(rng.integers(0, spec.size_jitter + 1))
        w, h = text_extent(text, px, spec.tracking)
        if w > spec.width or h > spec.height:
            log.warning("run %d (%r, %dpx) overflows %dx%d canvas; skipped", k, text, px, spec.width, spec.height)
            continue
        box = None
        for _ in range(50):
            if spec.layout == "center":
                cx, cy = (spec.width - w) // 2, (spec.height - h) // 2
                dx, dy = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
                left = int(np.clip(cx + dx, 0, spec.width - w))
                top = int(np.clip(cy + dy, 0, spec.height - h))
            else:
                left = int(rng.integers(0, spec.width - w + 1))
                top = int(rng.integers(0, spec.height - h + 1))
            cand = (left, top, left + w, top + h)
            if not any(_overlaps(cand, p[3]) for p in placed):
                box = cand
                break
        if box is None:
            log.warning("run %d (%r) found no free space; skipped", k, text)
            continue
        placed.append((text, px, k, box))
    return placed


def _rotate_box(box, angle_deg, width, height, pad):
    """Axis-aligned hull of ``box`` after rotating the canvas about its centre.

    Matches scipy.ndimage.rotate(reshape=False) in image coordinates.
    """
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    cx, cy = width / 2.0, height / 2.0
    xs, ys = [], []
    for x, y in ((box[0], box[1]), (box[2], box[1]), (box[0], box[3]), (box[2], box[3])):
        dx, dy = x - cx, y - cy
        xs.append(cx + dx * c + dy * s)
        ys.append(cy - dx * s + dy * c)
    l = max(0, math.floor(min(xs)) - pad)
    t = max(0, math.floor(min(ys)) - pad)
    r = min(width, math.ceil(max(xs)) + pad)
    b = min(height, math.ceil(max(ys)) + pad)
    return (l, t, r, b)


def render_ocr_screen(spec: TextRenderSpec, seed: int) -> SyntheticScreen:
    """Render one OCR screen; a pure function of (spec, seed)."""
    rng = np.random.default_rng([seed, 0x0C5])
    background = float(rng.uniform(0.75, 1.0))
    light_text = rng.random() < spec.invert_prob
    if light_text:
        background = 1.0 - background
    canvas = np.full((spec.height, spec.width), background)
    elements, glyphs = [], []
    for text, px, _, box in _place_runs(spec, rng):
        ink = float(rng.uniform(0.75, 1.0) if light_text else rng.uniform(0.0, 0.3))
        glyphs += draw_text(canvas, text, box[0], box[1], px, ink, spec.tracking)
        elements.append(ScreenElement("p", {}, text, box))

    # geometric augmentations move the labels with the pixels
    angle = float(rng.uniform(-spec.rotation, spec.rotation)) if spec.rotation > 0 else 0.0
    flip = spec.aggressive and rng.random() < 0.5
    pad = (1 if angle else 0) + (1 if spec.erosion else 0) + math.ceil(2 * spec.blur)
    if angle:
        canvas = ndimage.rotate(canvas, angle, reshape=False, order=1, mode="constant", cval=background)
    if spec.erosion:
        # grey erosion spreads dark strokes by one pixel, dilation spreads light ones
        op = ndimage.grey_dilation if light_text else ndimage.grey_erosion
        canvas = op(canvas, size=(2, 2))
    if spec.blur > 0:
        canvas = ndimage.gaussian_filter(canvas, spec.blur, mode="nearest")
    if spec.noise > 0:
        canvas = canvas + rng.normal(0.0, spec.noise, canvas.shape)
    if flip:
        canvas = canvas[:, ::-1]
    for el in elements:
        b = el.box
        if angle or pad:
            b = _rotate_box(b, angle, spec.width, spec.height, pad)
        if flip:
            b = (spec.width - b[2], b[1], spec.width - b[0], b[3])
        el.box = tuple(int(v) for v in b)

    return SyntheticScreen(
        image=ImageGrid(quantize8(canvas)),
        elements=elements,
        resolution=(spec.width, spec.height),
        seed=seed,
        background=float(quantize8(np.array(background))),
        glyphs=glyphs,
        kind="ocr",
    )
