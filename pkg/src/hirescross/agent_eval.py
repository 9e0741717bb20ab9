"""Agent benchmark scoring: web step success rate and Android action matching.

Web actions use the textual grammar ``[tag] name → OP`` with an optional
``: value`` for TYPE/SELECT and an optional ``at the box {...}`` suffix.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

WEB_OPS = ("CLICK", "TYPE", "SELECT")
AITW_KINDS = ("TAP", "SWIPE", "TYPE", "HOME", "BACK", "ENTER", "COMPLETE")
DIRECTIONS = ("up", "down", "left", "right")
ARROW = "→"
BOX_KEYS = ("x_left", "y_left", "width", "height")
_BOX_MARK = " at the box "


class ActionError(ValueError):
    pass


class ActionParseError(ActionError):
    def __init__(self, msg: str, text: str, pos: int):
        super().__init__(f"{msg} at position {pos}: {text!r}")
        self.pos = pos


@dataclass(frozen=True)
class MatchConfig:
    radius: float = 0.14
    normalize: str = "casefold"  # trim + case-fold; "exact" compares raw strings

    def __post_init__(self):
        if not 0.0 < self.radius < 1.0:
            raise ActionError(f"tap radius {self.radius} outside (0, 1)")
        if self.normalize not in ("casefold", "exact"):
            raise ActionError(f"unknown normalization {self.normalize!r}")

    def text(self, s: str | None) -> str | None:
        if s is None or self.normalize == "exact":
            return s
        return s.strip().casefold()


@dataclass(frozen=True)
class WebAction:
    """Operation on one page element; ``element_id`` is opaque (e.g. ``[button] Search``)."""

    element_id: str
    op: str
    value: str | None = None
    box: tuple[float, float, float, float] | None = None  # x_left, y_left, width, height

    def __post_init__(self):
        if self.op not in WEB_OPS:
            raise ActionError(f"unknown operation {self.op!r}")
        if self.op == "CLICK" and self.value is not None:
            raise ActionError("CLICK takes no value")
        if self.op != "CLICK" and not (self.value or "").strip():
            raise ActionError(f"{self.op} needs a nonempty value")


@dataclass(frozen=True)
class AitwAction:
    kind: str
    x: float | None = None
    y: float | None = None
    direction: str | None = None
    text: str | None = None

    def __post_init__(self):
        if self.kind not in AITW_KINDS:
            raise ActionError(f"unknown action kind {self.kind!r}")
        if self.kind == "TAP":
            if self.x is None or self.y is None or not (0 <= self.x <= 1 and 0 <= self.y <= 1):
                raise ActionError(f"TAP needs x, y in [0, 1], got ({self.x}, {self.y})")
        elif self.x is not None or self.y is not None:
            raise ActionError(f"{self.kind} takes no coordinates")
        if (self.kind == "SWIPE") != (self.direction is not None):
            raise ActionError("direction belongs to SWIPE only")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise ActionError(f"unknown swipe direction {self.direction!r}")
        if (self.kind == "TYPE") != (self.text is not None):
            raise ActionError("text belongs to TYPE only")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k in ("x", "y", "direction", "text"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AitwAction":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ActionError(f"bad action record {d!r}") from exc


@dataclass
class EpisodeStep:
    task: str
    gold: WebAction | AitwAction
    pred: WebAction | AitwAction | None = None  # None = empty or unparsable prediction
    history: list = field(default_factory=list)
    subset: str = ""


# -- web action grammar ------------------------------------------------------

def parse_action(text: str) -> WebAction:
    """Parse ``[tag] name → OP[: value][ at the box {...}]``."""
    s = text
    if not s.startswith("["):
        raise ActionParseError("expected '['", text, 0)
    close = s.find("]")
    if close < 0:
        raise ActionParseError("unclosed tag", text, len(s))
    tag = s[1:close]
    if not tag or any(c.isspace() for c in tag):
        raise ActionParseError("bad tag", text, 1)
    arrow = s.find(ARROW, close)
    width = len(ARROW)
    if arrow < 0:
        arrow, width = s.find("->", close), 2
    if arrow < 0:
        raise ActionParseError(f"expected '{ARROW}'", text, close + 1)
    name = s[close + 1:arrow].strip()
    element = f"[{tag}] {name}" if name else f"[{tag}]"

    rest_at = arrow + width
    rest = s[rest_at:]
    box = None
    mark = rest.find(_BOX_MARK)
    if mark >= 0:
        box = _parse_box(rest[mark + len(_BOX_MARK):], text, rest_at + mark + len(_BOX_MARK))
        rest = rest[:mark]
    lead = len(rest) - len(rest.lstrip())
    body = rest.strip()
    op, sep, value = body.partition(":")
    op = op.strip()
    if op not in WEB_OPS:
        raise ActionParseError(f"unknown operation {op!r}", text, rest_at + lead)
    value = value.strip() if sep else None
    try:
        return WebAction(element, op, value, box)
    except ActionError as exc:
        raise ActionParseError(str(exc), text, rest_at + lead) from None


def _parse_box(s: str, text: str, pos: int):
    try:
        obj = json.loads(s)
    except json.JSONDecodeError as exc:
        raise ActionParseError(f"bad box JSON ({exc.msg})", text, pos + exc.pos) from None
    if not isinstance(obj, dict) or tuple(obj) != BOX_KEYS:
        raise ActionParseError(f"box needs keys {BOX_KEYS}", text, pos)
    vals = tuple(obj[k] for k in BOX_KEYS)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in vals):
        raise ActionParseError("box fields must be finite numbers", text, pos)
    return tuple(float(v) for v in vals)


def format_action(a: WebAction) -> str:
    s = f"{a.element_id} {ARROW} {a.op}"
    if a.value is not None:
        s += f": {a.value}"
    if a.box is not None:
        s += _BOX_MARK + json.dumps(dict(zip(BOX_KEYS, a.box)))
    return s


# -- scorers -------------------------------------------------------------------

def step_success(pred: WebAction | None, gold: WebAction, cfg: MatchConfig = MatchConfig()) -> bool:
    """Same element, same operation and (for TYPE/SELECT) the same normalized value."""
    if pred is None:
        return False
    return (pred.element_id == gold.element_id and pred.op == gold.op
            and cfg.text(pred.value) == cfg.text(gold.value))


def aitw_match(pred: AitwAction | None, gold: AitwAction, cfg: MatchConfig = MatchConfig()) -> bool:
    if pred is None or pred.kind != gold.kind:
        return False
    if gold.kind == "TAP":
        return math.hypot(pred.x - gold.x, pred.y - gold.y) <= cfg.radius
    if gold.kind == "SWIPE":
        return pred.direction == gold.direction
    if gold.kind == "TYPE":
        return cfg.text(pred.text) == cfg.text(gold.text)
    return True


@dataclass
class ScoreReport:
    correct: int
    total: int
    by_subset: dict  # subset -> (correct, total), in first-seen order

    @property
    def rate(self) -> float:
        return self.correct / self.total

    def subset_rate(self, name: str) -> float:
        c, n = self.by_subset[name]
        return c / n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subset", "steps", "correct", "rate"])
        for name, (c, n) in self.by_subset.items():
            w.writerow([name, n, c, f"{c / n:.6f}"])
        w.writerow(["overall", self.total, self.correct, f"{self.rate:.6f}"])
        return buf.getvalue()


def _score(steps, match, cfg) -> ScoreReport:
    steps = list(steps)
    if not steps:
        raise ActionError("cannot score an empty episode set")
    by = OrderedDict()
    correct = 0
    for st in steps:
        ok = bool(match(st.pred, st.gold, cfg))
        c, n = by.get(st.subset or "all", (0, 0))
        by[st.subset or "all"] = (c + ok, n + 1)
        correct += ok
    return ScoreReport(correct, len(steps), dict(by))


def step_sr(steps, cfg: MatchConfig = MatchConfig()) -> ScoreReport:
    """Web step success rate over all steps, with a per-subset breakdown."""
    return _score(steps, step_success, cfg)


def matching_score(steps, cfg: MatchConfig = MatchConfig()) -> ScoreReport:
    """Mean per-step action match for Android episodes, with a per-subset breakdown."""
    return _score(steps, aitw_match, cfg)


# -- episode files -------------------------------------------------------------

PROTOCOLS = ("mind2web", "aitw")


def _encode(action, protocol):
    if action is None:
        return None
    return format_action(action) if protocol == "mind2web" else action.to_dict()


def _decode(raw, protocol, where, gold):
    if raw is None or raw == "":
        if gold:
            raise ActionError(f"{where}: gold action missing")
        return None
    try:
        if protocol == "mind2web":
            return parse_action(raw)
        return AitwAction.from_dict(raw)
    except (ActionError, TypeError) as exc:
        if gold:
            raise ActionError(f"{where}: {exc}") from None
        return None  # an unparsable prediction is a failed step


def write_episodes(steps, path: str | Path, protocol: str) -> None:
    if protocol not in PROTOCOLS:
        raise ActionError(f"unknown protocol {protocol!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for st in steps:
            rec = {"task": st.task, "history": list(st.history), "gold": _encode(st.gold, protocol),
                   "pred": _encode(st.pred, protocol), "subset": st.subset}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_episodes(path: str | Path, protocol: str) -> list[EpisodeStep]:
    if protocol not in PROTOCOLS:
        raise ActionError(f"unknown protocol {protocol!r}")
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ActionError(f"cannot read episodes {path}: {exc}") from exc
    steps = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{path}:{i}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ActionError(f"{where}: {exc}") from None
        steps.append(EpisodeStep(
            task=rec.get("task", ""),
            gold=_decode(rec.get("gold"), protocol, where, gold=True),
            pred=_decode(rec.get("pred"), protocol, where, gold=False),
            history=list(rec.get("history", [])),
            subset=rec.get("subset", ""),
        ))
    return steps


def score_file(path: str | Path, protocol: str, cfg: MatchConfig = MatchConfig()) -> ScoreReport:
    steps = read_episodes(path, protocol)
    return step_sr(steps, cfg) if protocol == "mind2web" else matching_score(steps, cfg)


FIXTURES = Path(__file__).parent / "fixtures"


def fixture_path(protocol: str) -> Path:
    return FIXTURES / f"{protocol}_fixture.jsonl"
