"""Command-line entry point: gen-data, train, eval-text, eval-rec, flops, score."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import agent_eval, cost, harness
from .decoder import load_checkpoint, load_into
from .gui_data import (
    DEVICE_RESOLUTIONS,
    PageConfig,
    TextRenderSpec,
    gen_page,
    iou,
    make_ocr,
    make_rec,
    make_reg,
    render_ocr_screen,
    write_dataset,
)
from .vocab import CharVocab

def _resolution(text: str) -> tuple[int, int]:
    try:
        w, _, h = text.lower().partition("x")
        return int(w), int(h or w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use WxH or S") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    samples = []
    for i in range(args.count):
        seed = args.seed + i
        if args.task == "ocr":
            w, h = args.resolution or (112, 112)
            spec = TextRenderSpec(glyph_px=args.glyph_px, runs=args.runs, width=w, height=h)
            screen = render_ocr_screen(spec, seed)
            if screen.elements:
                samples.append(make_ocr(screen))
            continue
        devices = DEVICE_RESOLUTIONS if args.resolution is None else (args.resolution,)
        page = gen_page(seed, args.resolution, PageConfig(devices=devices))
        if args.task in ("rec", "all"):
            samples += make_rec(page)
        if args.task in ("reg", "all"):
            samples += make_reg(page)
    write_dataset(samples, out / "data.jsonl")
    print(f"wrote {len(samples)} samples to {out / 'data.jsonl'}")
    return 0


_TRAIN_FLAGS = ("seed", "steps", "phase1", "batch", "lr", "warmup", "freeze")


def train_config(args) -> harness.TrainConfig:
    """Defaults < --config file < explicit flags."""
    values = harness.read_config(args.config) if args.config else {}
    for key in _TRAIN_FLAGS:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    return harness.TrainConfig(**values)


def cmd_train(args) -> int:
    cfg = train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = CharVocab()
    model = harness.build_model(cfg, vocab)
    names = [s.name for s in cfg.stages]

    def progress(step, stage, loss, lr):
        if step % args.print_every == 0 or step == cfg.steps - 1:
            print(f"step {step:5d}  {stage:<10s} loss {loss:.4f}  lr {lr:.2e}", flush=True)

    rec = harness.train(model, cfg, vocab, checkpoint=out / "checkpoint.bin", log_csv=out / "log.csv",
                        progress=progress if args.print_every else None)
    harness.write_config(cfg, out / "config.txt")
    summary = {
        "checkpoint_sha256": rec.checkpoint_hash,
        "total_params": rec.total_params,
        "trainable": {str(k): v for k, v in rec.trainable.items()},
        "stages": names,
        "final_loss": rec.losses[-1],
        "wall_time_s": round(rec.wall_time, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for phase, n in sorted(rec.trainable.items()):
        print(f"phase {phase}: {n} of {rec.total_params} parameters trainable ({n / rec.total_params:.2%})")
    print(f"checkpoint {out / 'checkpoint.bin'} sha256 {rec.checkpoint_hash}")
    return 0


def _load_run(args):
    run = Path(args.run)
    cfg = harness.TrainConfig(**harness.read_config(run / "config.txt"))
    vocab = CharVocab()
    model = harness.build_model(cfg, vocab)
    load_into(model, load_checkpoint(run / "checkpoint.bin"))
    return cfg, vocab, model


def cmd_eval_text(args) -> int:
    cfg, vocab, model = _load_run(args)
    acc = harness.eval_text(model, harness.holdout(args.dataset, args.count, cfg), vocab)
    print(f"char_accuracy,{acc:.6f}")
    return 0


def cmd_eval_rec(args) -> int:
    cfg, vocab, model = _load_run(args)
    test = harness.holdout("web", args.count, cfg)
    acc = harness.eval_rec(model, test, vocab)
    print(f"rec_accuracy,{acc:.6f}")
    if args.baseline:
        print(f"random_box_baseline,{random_box_baseline(test, seed=cfg.seed):.6f}")
    return 0


def random_box_baseline(test, seed: int = 0, draws: int = 200) -> float:
    """Monte Carlo hit rate of a predictor that answers with another element's box."""
    rng = np.random.default_rng(seed)
    boxes = [e.box for e in test]
    hits = 0
    for _ in range(draws):
        for e in test:
            hits += iou(boxes[int(rng.integers(len(boxes)))], e.box) >= 0.5
    return hits / (draws * len(test))


def cmd_flops(args) -> int:
    spec = cost.FULL_SPEC
    result = cost.sweep(spec, args.resolutions, args.lt)
    out = Path(args.out)
    svg = out.with_suffix(".svg")
    cost.write_sweep(result, out, svg)
    sys.stdout.write(result.to_csv())
    print(f"cross linear R2 {result.cross_linear_r2:.6f}; base quadratic R2 {result.base_quadratic_r2:.6f}")
    print(f"wrote {out} and {svg}")
    return 0


def cmd_score(args) -> int:
    cfg = agent_eval.MatchConfig(radius=args.radius)
    path = args.episodes or agent_eval.fixture_path(args.protocol)
    report = agent_eval.score_file(path, args.protocol, cfg)
    sys.stdout.write(report.to_csv())
    label = "step_sr" if args.protocol == "mind2web" else "matching_score"
    print(f"{label} {report.rate:g}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hirescross", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic OCR/REC/REG corpus")
    g.add_argument("--task", choices=("ocr", "rec", "reg", "all"), default="all")
    g.add_argument("--count", type=int, default=10, help="number of screens")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=_resolution, default=None, help="WxH; default: device list")
    g.add_argument("--glyph-px", type=int, default=6)
    g.add_argument("--runs", type=int, default=3, help="text runs per OCR screen")
    g.add_argument("--out", default="corpus")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="desk-scale pre-training run")
    t.add_argument("--config", help="flat key=value file with TrainConfig keys")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--phase1", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--freeze", choices=harness.FREEZE_MODES)
    t.add_argument("--out", default="run")
    t.add_argument("--print-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    for name, func, dataset in (("eval-text", cmd_eval_text, "hard-ocr"), ("eval-rec", cmd_eval_rec, None)):
        e = sub.add_parser(name, help=f"{name.split('-')[1].upper()} accuracy of a trained run")
        e.add_argument("--run", default="run", help="directory written by `train`")
        e.add_argument("--count", type=int, default=200)
        if dataset:
            e.add_argument("--dataset", choices=("easy-ocr", "hard-ocr"), default=dataset)
        else:
            e.add_argument("--baseline", action="store_true", help="also report the random-box hit rate")
        e.set_defaults(func=func)

    f = sub.add_parser("flops", help="attention/model FLOPs sweep at full scale")
    f.add_argument("--resolutions", type=_int_list, default=[224, 490, 756, 1120])
    f.add_argument("--lt", type=int, default=512)
    f.add_argument("--out", default="sweep.csv")
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("score", help="score agent episodes")
    s.add_argument("--protocol", choices=agent_eval.PROTOCOLS, required=True)
    s.add_argument("episodes", nargs="?", help="JSONL episode file (default: shipped fixture)")
    s.add_argument("--radius", type=float, default=0.14)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"hirescross {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
