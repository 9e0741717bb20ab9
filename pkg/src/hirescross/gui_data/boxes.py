"""Grounding box grammar: ``[[x0,y0,x1,y1;...]]`` with corners on a 000-999 grid."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

SCALE = 1000
BOX_RE = re.compile(r"\[\[\d{3},\d{3},\d{3},\d{3}(;\d{3},\d{3},\d{3},\d{3})*\]\]")
_ANY_GROUP = re.compile(r"\[\[[^\[\]]*\]\]")


class BoxError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BoxCoord:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not isinstance(v, (int,)) or isinstance(v, bool) or not 0 <= v < SCALE:
                raise BoxError(f"box coordinate {v!r} outside [0, {SCALE - 1}]")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise BoxError(f"inverted box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def __str__(self):
        return ",".join(f"{v:03d}" for v in self.as_tuple())


def _quantize(c: float, extent: float) -> int:
    return min(SCALE - 1, int(math.floor(c * SCALE / extent)))


def normalize_box(box, width: float, height: float) -> BoxCoord:
    """Map a pixel box (left, top, right, bottom) onto the 000-999 grid."""
    left, top, right, bottom = box
    if width <= 0 or height <= 0:
        raise BoxError(f"bad extent {width}x{height}")
    if left > right or top > bottom:
        raise BoxError(f"inverted box {tuple(box)}")
    if left < 0 or top < 0 or right > width or bottom > height:
        raise BoxError(f"box {tuple(box)} outside {width}x{height}")
    return BoxCoord(_quantize(left, width), _quantize(top, height),
                    _quantize(right, width), _quantize(bottom, height))


def denormalize(box: BoxCoord, width: float, height: float) -> tuple[float, float, float, float]:
    """Pixel box at the centre of each quantization bucket.

    Using the bucket centre keeps the round-trip error under half a bucket,
    including at the clamped 999 edge.
    """
    sx, sy = width / SCALE, height / SCALE
    return ((box.x0 + 0.5) * sx, (box.y0 + 0.5) * sy, (box.x1 + 0.5) * sx, (box.y1 + 0.5) * sy)


def format_boxes(groups) -> str:
    """Serialize groups of boxes; one ``[[...]]`` per group, boxes joined by ';'."""
    groups = [list(g) for g in groups]
    if not groups or any(not g for g in groups):
        raise BoxError("format_boxes needs nonempty groups")
    return " ".join("[[" + ";".join(str(b) for b in g) + "]]" for g in groups)


def parse_boxes(text: str) -> list[list[BoxCoord]]:
    """Parse every ``[[...]]`` group in ``text``.

    Raises BoxError on a group that does not match the grammar or holds an
    inverted box. Text with no group at all also raises.
    """
    groups = []
    for m in _ANY_GROUP.finditer(text):
        s = m.group(0)
        if not BOX_RE.fullmatch(s):
            raise BoxError(f"malformed box group {s!r} at offset {m.start()}")
        boxes = []
        for part in s[2:-2].split(";"):
            boxes.append(BoxCoord(*(int(v) for v in part.split(","))))
        groups.append(boxes)
    if not groups:
        raise BoxError(f"no box group in {text[:40]!r}")
    return groups


def iou(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; zero-area safe."""
    a = a.as_tuple() if isinstance(a, BoxCoord) else tuple(a)
    b = b.as_tuple() if isinstance(b, BoxCoord) else tuple(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, iw) * max(0.0, ih)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 1.0 if a == b else 0.0
    return inter / union
