"""Desk-scale pre-training: data sources, curriculum, two-phase freezing, AdamW, evaluation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cost import ModelSpec, param_count
from .decoder import DecoderConfig, HiResVLM, ModelConfig, group_of, save_checkpoint
from .encoder import EncoderConfig, images_to_branches
from .gui_data import (
    BoxError,
    PageConfig,
    TextRenderSpec,
    format_boxes,
    gen_page,
    iou,
    make_rec_reg,
    normalize_box,
    parse_boxes,
    render_ocr_screen,
)
from .vocab import CharVocab

log = logging.getLogger(__name__)

DATASETS = ("easy-ocr", "hard-ocr", "grounding", "web")
FREEZE_MODES = ("two_phase", "none")


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumStage:
    name: str
    weights: dict  # dataset name -> mix weight
    start: int = 0

    def __post_init__(self):
        unknown = set(self.weights) - set(DATASETS)
        if unknown:
            raise TrainError(f"stage {self.name!r}: unknown datasets {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()) or sum(self.weights.values()) <= 0:
            raise TrainError(f"stage {self.name!r}: weights must be nonnegative with a positive sum")

    def probabilities(self) -> np.ndarray:
        w = np.array([float(self.weights.get(d, 0.0)) for d in DATASETS])
        return w / w.sum()


def default_curriculum(total_steps: int) -> tuple[CurriculumStage, ...]:
    """easy-ocr -> hard-ocr -> grounding -> web, each stage replaying a little of the previous one."""
    q = total_steps // 4
    return (
        CurriculumStage("easy-ocr", {"easy-ocr": 1.0}, 0),
        CurriculumStage("hard-ocr", {"easy-ocr": 0.2, "hard-ocr": 0.8}, q),
        CurriculumStage("grounding", {"hard-ocr": 0.3, "grounding": 0.7}, 2 * q),
        CurriculumStage("web", {"grounding": 0.3, "web": 0.7}, 3 * q),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser, schedule, freezing and model-size knobs.

    Desk defaults: 2,000 steps at batch 16, phase 1 on the first 40%.
    ``full_scale()`` returns the large-scale values for reference.
    """

    steps: int = 2000
    warmup: int | None = None  # None -> min(100, 5% of steps)
    batch: int = 16
    lr: float = 2e-3
    schedule: str = "cosine"
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    grad_clip: float = 1.0
    phase1: int | None = None  # None -> 40% of steps
    freeze: str = "two_phase"
    curriculum: tuple | None = None  # None -> default_curriculum(steps)
    seed: int = 0
    # model
    lo_side: int = 28
    hi_side: int = 112
    layers: int = 2
    hidden: int = 48
    heads: int = 4
    cross_hidden: int = 32
    hi_hidden: int = 32
    enc_layers: int = 1
    max_text: int = 96
    use_cross: bool = True
    # data
    hard_glyph_px: int = 6
    ocr_chars: int = 4
    ocr_jitter: int = 0
    ocr_charset: str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise TrainError("steps and batch must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise TrainError(f"warmup {self.warmup_steps} outside [0, {self.steps}]")
        if not 0 <= self.phase1_steps <= self.steps:
            raise TrainError(f"phase-1 steps {self.phase1_steps} outside [0, {self.steps}]")
        if self.schedule not in ("cosine", "constant"):
            raise TrainError(f"unknown schedule {self.schedule!r}")
        if self.freeze not in FREEZE_MODES:
            raise TrainError(f"unknown freeze mode {self.freeze!r}")
        if self.freeze == "two_phase" and not self.use_cross:
            raise TrainError("two-phase freezing needs the cross module")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainError("bad optimiser hyper-parameters")
        stages = self.stages
        if stages[0].start != 0:
            raise TrainError("first curriculum stage must start at step 0")
        if any(b.start <= a.start for a, b in zip(stages, stages[1:])):
            raise TrainError("curriculum stages must have increasing start steps")

    @property
    def warmup_steps(self) -> int:
        return min(100, self.steps // 20) if self.warmup is None else self.warmup

    @property
    def phase1_steps(self) -> int:
        return int(round(0.4 * self.steps)) if self.phase1 is None else self.phase1

    @property
    def stages(self) -> tuple[CurriculumStage, ...]:
        return tuple(self.curriculum) if self.curriculum else default_curriculum(self.steps)

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Large-scale values: 60k steps, 20k in phase 1, batch 4,608, lr 2e-5, warmup 500."""
        base = dict(steps=60_000, phase1=20_000, batch=4608, lr=2e-5, warmup=500, weight_decay=0.05,
                    beta1=0.9, beta2=0.95, eps=1e-5)
        base.update(kw)
        return cls(**base)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            lo=EncoderConfig(side=self.lo_side, patch=14, layers=self.enc_layers, hidden=32, heads=4),
            hi=EncoderConfig(side=self.hi_side, patch=14, layers=self.enc_layers, hidden=self.hi_hidden, heads=4),
            dec=DecoderConfig(layers=self.layers, hidden=self.hidden, heads=self.heads,
                              cross_hidden=self.cross_hidden, cross_heads=4, hi_hidden=self.hi_hidden,
                              vocab=vocab_size, max_text=self.max_text, use_cross=self.use_cross),
        )


def stage_at(stages, step: int) -> int:
    """Index of the stage active at ``step``."""
    idx = 0
    for i, s in enumerate(stages):
        if s.start <= step:
            idx = i
    return idx


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for update number ``step`` (1-based).

    Linear ramp to the peak at ``warmup``, then cosine decay reaching zero
    at ``steps``.
    """
    if step >= cfg.steps:
        return 0.0 if cfg.schedule == "cosine" else cfg.lr
    warmup = cfg.warmup_steps
    if warmup and step <= warmup:
        return cfg.lr * step / warmup
    if cfg.schedule == "constant":
        return cfg.lr
    frac = (step - warmup) / (cfg.steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise TrainError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind == "int" or kind == "int | None":
            return None if value.lower() == "none" else int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise TrainError(f"{key}: cannot parse {value!r}") from None
    return value


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment. Keys mirror TrainConfig."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise TrainError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().replace("-", "_"), value.strip()
        if not sep or key not in _FIELD_TYPES or key == "curriculum":
            raise TrainError(f"{path}:{n}: unknown or malformed entry {raw!r}")
        out[key] = _coerce(key, value)
    return out


def write_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg) if f.name != "curriculum"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    pixels: np.ndarray  # (S, S) screen in [0, 1]
    prompt: str
    answer: str
    dataset: str
    box: tuple | None = None  # gold normalized box for grounding-style answers


_PAGES_112 = PageConfig(min_elements=1, max_elements=3, devices=((112, 112),), glyph_frac=(3 / 112, 4 / 112))


def hard_ocr_spec(cfg: TrainConfig) -> TextRenderSpec:
    """Tiny glyphs near the centre of a 112-px screen."""
    return TextRenderSpec(glyph_px=cfg.hard_glyph_px, min_chars=cfg.ocr_chars, max_chars=cfg.ocr_chars,
                          charset=cfg.ocr_charset, layout="center", jitter=cfg.ocr_jitter,
                          width=cfg.hi_side, height=cfg.hi_side)


def easy_ocr_spec(cfg: TrainConfig) -> TextRenderSpec:
    return TextRenderSpec(glyph_px=18, min_chars=1, max_chars=3, charset=cfg.ocr_charset, layout="center",
                          jitter=cfg.ocr_jitter, width=cfg.hi_side, height=cfg.hi_side)


def make_example(dataset: str, seed: int, cfg: TrainConfig) -> Example:
    """One training example; a pure function of (dataset, seed, cfg)."""
    if dataset in ("easy-ocr", "hard-ocr"):
        spec = easy_ocr_spec(cfg) if dataset == "easy-ocr" else hard_ocr_spec(cfg)
        screen = render_ocr_screen(spec, seed)
        return Example(screen.image.pixels[:, :, 0], "ocr:", screen.transcript(), dataset)
    if dataset == "grounding":
        spec = TextRenderSpec(glyph_px=8, runs=2, min_chars=2, max_chars=3, width=cfg.hi_side, height=cfg.hi_side)
        screen = render_ocr_screen(spec, seed)
        el = screen.elements[seed % len(screen.elements)]
        box = normalize_box(el.box, *screen.resolution)
        return Example(screen.image.pixels[:, :, 0], f"find {el.text}", format_boxes([[box]]), dataset, box)
    if dataset == "web":
        page = gen_page(seed, (cfg.hi_side, cfg.hi_side), _PAGES_112)
        samples = make_rec_reg(page)
        s = samples[seed % len(samples)]
        box = parse_boxes(s.answer)[0][0] if s.task == "rec" else None
        return Example(page.image.pixels[:, :, 0], s.prompt, s.answer, dataset, box)
    raise TrainError(f"unknown dataset {dataset!r}")


def to_branches(pixels: np.ndarray, mcfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """(B, S, S) screens -> standardized (lo patches, hi patches)."""
    return images_to_branches(pixels, mcfg.lo, mcfg.hi)


@dataclass
class Batch:
    lo: np.ndarray
    hi: np.ndarray
    inputs: np.ndarray  # (B, L) token ids
    targets: np.ndarray  # (B, L)
    weights: np.ndarray  # (B, L), 1 on answer tokens
    datasets: list


def collate(examples, vocab: CharVocab, mcfg: ModelConfig, dtype=np.float32) -> Batch:
    seqs, starts = zip(*(vocab.sequence(e.prompt, e.answer) for e in examples))
    L = max(len(s) for s in seqs) - 1
    if L > mcfg.dec.max_text:
        raise TrainError(f"sequence of {L} tokens exceeds max_text {mcfg.dec.max_text}")
    B = len(seqs)
    inputs = np.full((B, L), vocab.PAD, dtype=np.intp)
    targets = np.full((B, L), vocab.PAD, dtype=np.intp)
    weights = np.zeros((B, L))
    for b, (s, st) in enumerate(zip(seqs, starts)):
        n = len(s) - 1
        inputs[b, :n] = s[:-1]
        targets[b, :n] = s[1:]
        weights[b, st - 1:n] = 1.0  # positions whose next token is part of the answer
    lo, hi = to_branches(np.stack([e.pixels for e in examples]), mcfg)
    return Batch(lo.astype(dtype), hi.astype(dtype), inputs, targets, weights, [e.dataset for e in examples])


class Sampler:
    """Seeded batch sampler: batch order depends only on (seed, step)."""

    def __init__(self, cfg: TrainConfig, vocab: CharVocab, mcfg: ModelConfig):
        self.cfg, self.vocab, self.mcfg = cfg, vocab, mcfg

    def draw(self, step: int) -> tuple[int, list[str], list[int]]:
        stages = self.cfg.stages
        k = stage_at(stages, step)
        rng = np.random.default_rng([self.cfg.seed, step, 0x5A])
        picks = rng.choice(len(DATASETS), size=self.cfg.batch, p=stages[k].probabilities())
        seeds = rng.integers(0, 10**9, size=self.cfg.batch)
        return k, [DATASETS[i] for i in picks], [int(s) for s in seeds]

    def batch(self, step: int, dtype=np.float32) -> tuple[int, Batch]:
        k, names, seeds = self.draw(step)
        examples = [self._fitting(n, s) for n, s in zip(names, seeds)]
        return k, collate(examples, self.vocab, self.mcfg, dtype)

    def _fitting(self, name: str, seed: int) -> Example:
        # resample deterministically when a prompt/answer pair is too long
        for j in range(100):
            ex = make_example(name, seed + j, self.cfg)
            if len(ex.prompt) + len(ex.answer) + 2 <= self.mcfg.dec.max_text:
                return ex
        raise TrainError(f"{name}: no example fits max_text {self.mcfg.dec.max_text}")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2) only."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = {n: 0 for n in params}

    def step(self, names, lr: float) -> None:
        c = self.cfg
        for n in names:
            p = self.params[n]
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.t[n] += 1
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            mhat = self.m[n] / (1 - c.beta1 ** self.t[n])
            vhat = self.v[n] / (1 - c.beta2 ** self.t[n])
            update = mhat / (np.sqrt(vhat) + c.eps)
            if p.data.ndim >= 2 and c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    steps: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    trainable: dict = field(default_factory=dict)  # phase -> trainable parameter count
    total_params: int = 0
    wall_time: float = 0.0
    checkpoint_hash: str = ""

    def write_csv(self, path: str | Path, stage_names=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "stage", "loss", "lr"])
            for s, k, loss, lr in zip(self.steps, self.stages, self.losses, self.lrs):
                name = stage_names[k] if stage_names else k
                w.writerow([s, name, repr(loss), repr(lr)])


def phase_groups(cfg: TrainConfig, step: int) -> tuple[str, ...]:
    """Parameter groups updated at ``step`` (0-based)."""
    if cfg.freeze == "none":
        return ("cross_module", "visual_expert", "base")
    return ("cross_module",) if step < cfg.phase1_steps else ("cross_module", "visual_expert")


def _set_trainable(model: HiResVLM, groups) -> list[str]:
    names = []
    for n, t in model.params.items():
        t.requires_grad = group_of(n) in groups
        t.grad = None
        if t.requires_grad:
            names.append(n)
    return names


def _clip(params, names, max_norm: float) -> float:
    sq = sum(float(np.sum(np.square(params[n].grad, dtype=np.float64))) for n in names if params[n].grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * scale
    return norm


def build_model(cfg: TrainConfig, vocab: CharVocab, dtype=np.float32) -> HiResVLM:
    return HiResVLM(cfg.model_config(len(vocab)), seed=cfg.seed, dtype=dtype)


def train(model: HiResVLM, cfg: TrainConfig, vocab: CharVocab | None = None,
          checkpoint: str | Path | None = None, log_csv: str | Path | None = None,
          progress=None) -> RunRecord:
    """Run the configured schedule; returns the run record (and checkpoint hash if saved).

    Parameters outside the active groups have ``requires_grad`` cleared, so
    they receive no gradient and are never written.
    """
    vocab = vocab or CharVocab()
    if model.cfg.dec.vocab != len(vocab):
        raise TrainError(f"model vocab {model.cfg.dec.vocab} != vocabulary size {len(vocab)}")
    if cfg.freeze == "two_phase" and not model.cfg.dec.use_cross:
        raise TrainError("two-phase freezing needs the cross module")
    sampler = Sampler(cfg, vocab, model.cfg)
    opt = AdamW(model.params, cfg)
    rec = RunRecord(total_params=model.num_parameters())
    stages = cfg.stages
    t0 = time.perf_counter()
    groups = None
    names: list[str] = []
    for step in range(cfg.steps):
        g = phase_groups(cfg, step)
        if g != groups:
            groups = g
            names = _set_trainable(model, groups)
            phase = 1 if (cfg.freeze == "two_phase" and step < cfg.phase1_steps) else 2
            rec.trainable[phase] = sum(model.params[n].size for n in names)
        k, batch = sampler.batch(step, model.dtype)
        stage = stages[k].name
        try:
            with nx.GradTape() as tape:
                logits = model.forward(batch.lo, batch.hi, batch.inputs)
                loss = nx.cross_entropy(logits, batch.targets, batch.weights)
            value = float(loss.data)
            if not math.isfinite(value):
                raise nx.NumericsError("non-finite loss")
            tape.backward(loss)
        except nx.NumericsError as exc:
            raise TrainError(f"non-finite value at step {step} in stage {stage!r}: {exc}") from exc
        _clip(model.params, names, cfg.grad_clip)
        lr = lr_at(cfg, step + 1)
        opt.step(names, lr)
        for n in names:
            model.params[n].grad = None
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec.steps.append(step)
            rec.stages.append(k)
            rec.losses.append(value)
            rec.lrs.append(lr)
        if progress is not None:
            progress(step, stage, value, lr)
    for t in model.params.values():
        t.requires_grad = True
    rec.wall_time = time.perf_counter() - t0
    if checkpoint is not None:
        rec.checkpoint_hash = save_checkpoint(model.params, checkpoint)
    if log_csv is not None:
        rec.write_csv(log_csv, [s.name for s in stages])
    return rec


def expected_trainable(cfg: TrainConfig, vocab_size: int) -> dict:
    """Phase -> trainable count from the closed-form estimator."""
    report = param_count(ModelSpec.from_model_config(cfg.model_config(vocab_size)))
    if cfg.freeze == "none":
        return {2: report.total}
    return {1: report.phase1_trainable, 2: report.phase2_trainable}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def greedy_predictor(model: HiResVLM, vocab: CharVocab | None = None, max_new: int = 24, batch: int = 32):
    """Callable mapping examples to decoded answer strings."""
    vocab = vocab or CharVocab()

    def predict(examples) -> list[str]:
        out = [None] * len(examples)
        by_prompt: dict[str, list[int]] = {}
        for i, e in enumerate(examples):
            by_prompt.setdefault(e.prompt, []).append(i)
        for prompt, idx in by_prompt.items():
            prefix = [vocab.BOS, *vocab.encode(prompt), vocab.SEP]
            room = min(max_new, model.cfg.dec.max_text - len(prefix) + 1)
            for j in range(0, len(idx), batch):
                chunk = idx[j:j + batch]
                lo, hi = to_branches(np.stack([examples[i].pixels for i in chunk]), model.cfg)
                ids = np.tile(np.array(prefix, dtype=np.intp), (len(chunk), 1))
                new = model.generate(lo.astype(model.dtype), hi.astype(model.dtype), ids, room, eos=vocab.EOS)
                for i, row in zip(chunk, new):
                    out[i] = vocab.decode(row)
        return out

    return predict


def _predictor(model, vocab):
    return greedy_predictor(model, vocab) if isinstance(model, HiResVLM) else model


def char_accuracy(pred: str, gold: str) -> tuple[int, int]:
    """Position-wise matches against the gold string (missing characters count as wrong)."""
    return sum(a == b for a, b in zip(pred, gold)), len(gold)


def eval_text(model, testset, vocab: CharVocab | None = None) -> float:
    """Character accuracy of greedy transcripts over a held-out OCR set."""
    testset = list(testset)
    if not testset:
        raise TrainError("empty test set")
    preds = _predictor(model, vocab)(testset)
    hit = tot = 0
    for p, e in zip(preds, testset):
        h, n = char_accuracy(p, e.answer)
        hit += h
        tot += n
    return hit / tot


def box_hit(pred: str, gold) -> bool:
    """IoU >= 0.5 against the gold box; anything unparsable is a miss."""
    try:
        groups = parse_boxes(pred)
    except BoxError:
        return False
    if len(groups) != 1 or len(groups[0]) != 1:
        return False
    return iou(groups[0][0], gold) >= 0.5


def eval_rec(model, testset, vocab: CharVocab | None = None) -> float:
    """Fraction of REC answers whose decoded box overlaps the gold box with IoU >= 0.5."""
    testset = [e for e in testset if e.box is not None]
    if not testset:
        raise TrainError("REC test set has no boxed examples")
    preds = _predictor(model, vocab)(testset)
    return sum(box_hit(p, e.box) for p, e in zip(preds, testset)) / len(testset)


def holdout(dataset: str, n: int, cfg: TrainConfig, seed: int = 2 * 10**9) -> list[Example]:
    """Evaluation examples from a seed range disjoint from training draws."""
    out = []
    s = seed
    while len(out) < n:
        ex = make_example(dataset, s, cfg)
        s += 1
        if dataset == "web" and ex.box is None:
            continue  # REC only
        out.append(ex)
    return out
