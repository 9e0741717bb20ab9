"""Question/answer samples (OCR, REC, REG) and the JSONL + PNG corpus format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..encoder import EncoderError, ImageGrid, load_image, save_image
from .boxes import denormalize, format_boxes, normalize_box, parse_boxes
from .pages import to_html
from .render import SyntheticScreen

# Prompt wording is ours; bump the version whenever a template changes.
PROMPT_VERSION = "v1"
TEMPLATES = {
    "v1": {
        "ocr": "ocr:",
        "rec": "rec {html}",
        "reg": "reg {box}",
    },
}
TASKS = ("ocr", "rec", "reg")
FIELDS = ("image_path", "task", "prompt", "answer", "seed")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    task: str
    prompt: str
    answer: str
    seed: int
    image_path: str = ""
    image: ImageGrid | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}")

    def load(self, root: str | Path = ".") -> ImageGrid:
        if self.image is None:
            self.image = load_image(Path(root) / self.image_path)
        return self.image


def _template(task: str, version: str) -> str:
    try:
        return TEMPLATES[version][task]
    except KeyError:
        raise DatasetError(f"no {task} template for version {version!r}") from None


def _require_elements(screen: SyntheticScreen):
    if not screen.elements:
        raise DatasetError(f"screen {screen.seed} has no elements")


def element_box(screen: SyntheticScreen, el) -> str:
    W, H = screen.resolution
    return format_boxes([[normalize_box(el.box, W, H)]])


def make_rec(screen: SyntheticScreen, version: str = PROMPT_VERSION) -> list[Sample]:
    """One REC sample per element: element HTML in, box out."""
    _require_elements(screen)
    tpl = _template("rec", version)
    return [Sample("rec", tpl.format(html=to_html(el)), element_box(screen, el), screen.seed, image=screen.image)
            for el in screen.elements]


def make_reg(screen: SyntheticScreen, version: str = PROMPT_VERSION) -> list[Sample]:
    """One REG sample per element: box in, element HTML out."""
    _require_elements(screen)
    tpl = _template("reg", version)
    return [Sample("reg", tpl.format(box=element_box(screen, el)), to_html(el), screen.seed, image=screen.image)
            for el in screen.elements]


def make_rec_reg(screen: SyntheticScreen, version: str = PROMPT_VERSION) -> list[Sample]:
    return make_rec(screen, version) + make_reg(screen, version)


def make_ocr(screen: SyntheticScreen, version: str = PROMPT_VERSION) -> Sample:
    _require_elements(screen)
    return Sample("ocr", _template("ocr", version), screen.transcript(), screen.seed, image=screen.image)


def rec_target(screen: SyntheticScreen, html_str: str):
    """Recover the element a REC prompt refers to."""
    for el in screen.elements:
        if to_html(el) == html_str:
            return el
    raise DatasetError(f"no element matches {html_str!r}")


def answer_box_pixels(sample: Sample, resolution):
    """Denormalized pixel box of a REC answer."""
    (box,) = parse_boxes(sample.answer)[0]
    return denormalize(box, *resolution)


def _image_name(img: ImageGrid) -> str:
    h = hashlib.sha256()
    h.update(str(img.pixels.shape).encode())
    h.update(img.pixels.tobytes())
    return h.hexdigest()[:20] + ".png"


def write_dataset(samples, path: str | Path) -> list[Sample]:
    """Write samples as JSONL with their images as PNGs next to it.

    Identical images are stored once. Returns the samples with
    ``image_path`` filled in, relative to the JSONL directory.
    """
    path = Path(path)
    root = path.parent
    out = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for s in samples:
                rel = s.image_path
                if s.image is not None:
                    rel = "images/" + _image_name(s.image)
                    target = root / rel
                    if not target.exists():
                        target.parent.mkdir(exist_ok=True)
                        save_image(s.image, target)
                row = Sample(s.task, s.prompt, s.answer, int(s.seed), rel, s.image)
                rec = {k: getattr(row, k) for k in FIELDS}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
                out.append(row)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset {path}: {exc}") from exc
    return out


def read_dataset(path: str | Path, load_images: bool = False) -> list[Sample]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            s = Sample(**{k: rec[k] for k in FIELDS})
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{i}: bad record ({exc})") from exc
        if load_images and s.image_path:
            try:
                s.load(path.parent)
            except EncoderError as exc:
                raise DatasetError(f"{path}:{i}: {exc}") from exc
        samples.append(s)
    return samples
