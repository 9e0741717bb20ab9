"""Synthetic GUI and OCR data: rendered text, procedural pages, box grammar, corpora."""
from .boxes import BOX_RE, BoxCoord, BoxError, denormalize, format_boxes, iou, normalize_box, parse_boxes
from .pages import (
    DEVICE_RESOLUTIONS,
    KEPT_ATTRIBUTES,
    PageConfig,
    PageError,
    clean_attributes,
    gen_page,
    parse_html,
    to_html,
)
from .render import (
    GlyphPlacement,
    RenderError,
    ScreenElement,
    SyntheticScreen,
    TextRenderSpec,
    composite,
    glyph,
    glyph_cell,
    render_ocr_screen,
)
from .samples import (
    PROMPT_VERSION,
    TEMPLATES,
    DatasetError,
    Sample,
    make_ocr,
    make_rec,
    make_rec_reg,
    make_reg,
    read_dataset,
    rec_target,
    write_dataset,
)

__all__ = [
    "BOX_RE", "BoxCoord", "BoxError", "denormalize", "format_boxes", "iou", "normalize_box", "parse_boxes",
    "DEVICE_RESOLUTIONS", "KEPT_ATTRIBUTES", "PageConfig", "PageError", "clean_attributes", "gen_page",
    "parse_html", "to_html", "GlyphPlacement", "RenderError", "ScreenElement", "SyntheticScreen",
    "TextRenderSpec", "composite", "glyph", "glyph_cell", "render_ocr_screen", "PROMPT_VERSION", "TEMPLATES",
    "DatasetError", "Sample", "make_ocr", "make_rec", "make_rec_reg", "make_reg", "read_dataset",
    "rec_target", "write_dataset",
]
