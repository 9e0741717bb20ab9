"""Procedural web-page screens with labelled links, buttons, inputs, text and icons."""
from __future__ import annotations

import html
from dataclasses import dataclass
from html.parser import HTMLParser

import numpy as np

from ..encoder import ImageGrid
from .render import ScreenElement, SyntheticScreen, draw_text, glyph_cell, quantize8, text_extent

DEVICE_RESOLUTIONS = ((1120, 1120), (1280, 720), (750, 1334), (448, 448))

# Only these survive cleaning; style, class, ids, handlers and data-* are dropped.
KEPT_ATTRIBUTES = ("alt", "aria-label", "href", "name", "placeholder", "role", "title", "type", "value")
VOID_TAGS = frozenset({"input", "img"})

WORDS = (
    "home", "search", "login", "sign up", "cart", "help", "news", "sports", "weather", "maps",
    "settings", "profile", "orders", "deals", "music", "video", "photos", "mail", "contact", "about",
    "flights", "hotels", "cars", "book now", "submit", "next", "back", "menu", "shop", "jobs",
    "travel", "events", "books", "games", "share", "save", "cancel", "apply", "filter", "sort",
)
PLACEHOLDERS = ("email", "password", "city", "name", "from", "to", "date", "query", "zip", "phone")


class PageError(ValueError):
    pass


@dataclass(frozen=True)
class PageConfig:
    min_elements: int = 3
    max_elements: int = 10
    devices: tuple = DEVICE_RESOLUTIONS
    glyph_frac: tuple = (1 / 60, 1 / 30)  # glyph size as a fraction of screen height

    def __post_init__(self):
        if not 1 <= self.min_elements <= self.max_elements:
            raise PageError("need 1 <= min_elements <= max_elements")
        if not self.devices:
            raise PageError("device list is empty")


def clean_attributes(raw: dict) -> dict:
    """Drop redundant attributes; keep whitelisted, nonempty ones in sorted order."""
    return {k: str(raw[k]) for k in sorted(raw) if k in KEPT_ATTRIBUTES and str(raw[k]).strip()}


def to_html(el: ScreenElement) -> str:
    attrs = "".join(f' {k}="{html.escape(v, quote=True)}"' for k, v in el.attributes.items())
    if el.tag in VOID_TAGS:
        return f"<{el.tag}{attrs}>"
    return f"<{el.tag}{attrs}>{html.escape(el.text, quote=False)}</{el.tag}>"


class _OneElement(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.tag = None
        self.attrs = {}
        self.text = []

    def handle_starttag(self, tag, attrs):
        if self.tag is not None:
            raise PageError(f"nested tag <{tag}>")
        self.tag = tag
        self.attrs = {k: v or "" for k, v in attrs}

    def handle_data(self, data):
        self.text.append(data)


def parse_html(s: str) -> tuple[str, dict, str]:
    """Inverse of ``to_html`` for a single element: (tag, attributes, text)."""
    p = _OneElement()
    p.feed(s)
    p.close()
    if p.tag is None:
        raise PageError(f"no element in {s[:40]!r}")
    return p.tag, p.attrs, "".join(p.text)


def _element(kind: str, rng: np.random.Generator) -> tuple[str, dict, str]:
    """Pick tag, raw attributes and visible text for one element kind."""
    word = str(rng.choice(WORDS))
    noise = {"class": f"c{int(rng.integers(1000))}", "id": f"e{int(rng.integers(10000))}",
             "style": "margin:4px", "data-track": "1"}
    if kind == "a":
        raw = {**noise, "href": "/" + word.replace(" ", "-"), "target": "_self"}
        return "a", raw, word
    if kind == "button":
        raw = {**noise, "type": str(rng.choice(["submit", "button"])), "onclick": "go()"}
        return "button", raw, word
    if kind == "input":
        ph = str(rng.choice(PLACEHOLDERS))
        raw = {**noise, "type": "text", "name": ph, "placeholder": ph, "autocomplete": "off"}
        return "input", raw, ph
    if kind == "img":
        raw = {**noise, "alt": word, "src": f"/static/{word}.png"}
        return "img", raw, ""
    n = int(rng.integers(2, 4))
    return "p", noise, " ".join(str(w) for w in rng.choice(WORDS, size=n))


def _draw_element(canvas, kind, text, box, px, ink, background):
    """Draw one element inside ``box``; returns glyph placements."""
    l, t, r, b = box
    if kind in ("button", "input"):
        canvas[t, l:r] = ink
        canvas[b - 1, l:r] = ink
        canvas[t:b, l] = ink
        canvas[t:b, r - 1] = ink
        tint = 0.5 * (ink + background) if kind == "input" else ink  # greyed placeholder
        return draw_text(canvas, text, l + 2, t + 2, px, tint)
    if kind == "img":
        canvas[t:b, l:r] = ink
        return []
    glyphs = draw_text(canvas, text, l, t, px, ink)
    if kind == "a":
        canvas[b - 1, l:r] = ink  # underline
    return glyphs


def _size(kind: str, text: str, px: int) -> tuple[int, int]:
    w, h = text_extent(text, px)
    if kind in ("button", "input"):
        return w + 4, h + 4
    if kind == "img":
        side = glyph_cell(px)[1]
        return side, side
    if kind == "a":
        return w, h + 1
    return w, h


def gen_page(seed: int, resolution: tuple[int, int] | None = None, cfg: PageConfig = PageConfig()) -> SyntheticScreen:
    """Lay out rows of elements on a page; boxes never overlap.

    ``resolution`` must come from ``cfg.devices``; when omitted it is drawn
    from that list by seed.
    """
    rng = np.random.default_rng([seed, 0x9A6E])
    if resolution is None:
        resolution = tuple(cfg.devices[int(rng.integers(len(cfg.devices)))])
    resolution = tuple(int(v) for v in resolution)
    if resolution not in [tuple(d) for d in cfg.devices]:
        raise PageError(f"resolution {resolution} not in device list {cfg.devices}")
    W, H = resolution
    px = max(3, round(H * float(rng.uniform(*cfg.glyph_frac))))
    gap = max(2, px // 2)
    target = int(rng.integers(cfg.min_elements, cfg.max_elements + 1))

    background = float(rng.uniform(0.85, 1.0))
    canvas = np.full((H, W), background)
    elements, glyphs = [], []
    y = gap
    kinds = ("a", "button", "input", "p", "img")
    failures = 0
    seen = set()
    while len(elements) < target and failures < 20:
        per_row = int(rng.integers(1, 4))
        row = []
        x = gap
        for _ in range(per_row):
            if len(elements) + len(row) >= target:
                break
            kind = str(rng.choice(kinds, p=[0.25, 0.2, 0.2, 0.25, 0.1]))
            tag, raw, text = _element(kind, rng)
            w, h = _size(kind, text, px)
            html_str = to_html(ScreenElement(tag, clean_attributes(raw), text))
            if x + w + gap > W or html_str in seen:
                continue  # REC needs every element's HTML to be unique on the page
            seen.add(html_str)
            row.append((tag, raw, text, (x, y, x + w, y + h)))
            x += w + gap * int(rng.integers(1, 4))
        if not row:
            failures += 1
            continue
        row_h = max(b[3] - b[1] for *_, b in row)
        if y + row_h + gap > H:
            break
        for tag, raw, text, box in row:
            ink = float(rng.uniform(0.0, 0.35))
            glyphs += _draw_element(canvas, tag, text, box, px, ink, background)
            elements.append(ScreenElement(tag, clean_attributes(raw), text, box))
        y += row_h + gap * int(rng.integers(1, 4))

    return SyntheticScreen(
        image=ImageGrid(quantize8(canvas)),
        elements=elements,
        resolution=(W, H),
        seed=seed,
        background=background,
        glyphs=glyphs,
        kind="page",
    )
