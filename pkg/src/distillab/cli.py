"""Command-line front end.

Wires corpus generation, splicing, checkpoint surgery, distillation, CTC
fine-tuning, evaluation, and layer-similarity analysis into reproducible run
directories. Every training command echoes its fully resolved configuration
into the run directory and finishes by writing a `done` marker, so a
directory without the marker is a failed or interrupted run.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
"""

import argparse
import csv
import json
import os
import sys

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cka import export_heatmap, interlayer_matrix
from .distill import DistillConfig, init_student, train_distill, write_trace
from .errors import ArgumentError, DistillabError
from .finetune import (FinetuneConfig, MaskSpec, TriStageSchedule,
                       evaluate_ctc, finetune, load_head, write_hyps,
                       write_report)
from .model import PRESETS, init_params
from .splice import (generate_synthetic_corpus, load_corpus, maybe_shuffle,
                     write_transcripts, write_wav)

DONE_MARKER = "done"
INIT_MODES = ("jump", "continuous", "random")

# knob -> default; config files may set these keys, flags override the file
DISTIL_KNOBS = {
    "steps": 500,
    "lr": 2.0e-4,
    "batch_size": 6,
    "p_shuffle": 0.375,
    "p_mix": 0.15,
    "init_mode": "jump",
    "freeze_conv": True,
    "student_layers": None,
    "pairs": None,
}
FINETUNE_KNOBS = {
    "steps": 1000,
    "accumulation": 8,
    "holdout_fraction": 0.2,
    "freeze_conv": True,
    "peak_lr": 1.0e-4,
    "warmup_steps": 2000,
    "hold_steps": 8000,
    "total_steps": 20000,
    "frame_coverage": 0.55,
    "channel_coverage": 0.25,
    "frame_span": 10,
    "channel_span": 8,
}
ABLATION_KNOBS = {
    "steps": 500,
    "lr": 2.0e-4,
    "batch_size": 6,
    "p_shuffle": 0.375,
    "p_mix": 0.15,
    "student_layers": None,
}
ABLATION_GRID = (("jump", True), ("jump", False),
                 ("continuous", True), ("continuous", False))


@dataclass
class Command:
    name: str
    args: argparse.Namespace


def _probability(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"probability {v} outside [0, 1]")
    return v


def _layer_pairs(text: str):
    # "1:2,2:4" -> ((1, 2), (2, 4))
    try:
        pairs = tuple(tuple(int(x) for x in item.split(":")) for item in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad pair list {text!r}, want like 1:2,2:4")
    if any(len(p) != 2 for p in pairs):
        raise argparse.ArgumentTypeError(f"bad pair list {text!r}, want like 1:2,2:4")
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillab",
        description="cross-lingual speech distillation experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument("--seed", type=int, default=None,
                      help="rng seed (default: $DISTILLAB_SEED, else 0)")

    p = sub.add_parser("gen-corpus", parents=[seed],
                       help="synthesize a syllable-aligned mini-language corpus")
    p.add_argument("--out", help="corpus directory to create")
    p.add_argument("--n-utts", type=int, default=50)
    p.add_argument("--inventory", type=int, default=12,
                   help="number of distinct syllables")
    p.add_argument("--min-syllables", type=int, default=2)
    p.add_argument("--max-syllables", type=int, default=5)
    p.add_argument("--min-ms", type=int, default=60)
    p.add_argument("--max-ms", type=int, default=140)

    p = sub.add_parser("splice", parents=[seed],
                       help="rewrite a corpus with syllable-shuffled audio")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--shuffle-prob", dest="p_shuffle", type=_probability,
                   default=0.375)
    p.add_argument("--crossfade-ms", type=float, default=0.0)

    p = sub.add_parser("init", parents=[seed],
                       help="build a student checkpoint by layer surgery")
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="build fresh random weights from a named shape instead")
    p.add_argument("--mode", choices=INIT_MODES, default="jump")
    p.add_argument("--depth", type=int, default=None,
                   help="student layers (default: half the teacher)")
    p.add_argument("--out")

    p = sub.add_parser("distil", parents=[seed],
                       help="train a student against teacher hidden states")
    p.add_argument("--teacher")
    p.add_argument("--corpus")
    p.add_argument("--out", help="run directory")
    p.add_argument("--config", default=None, help="JSON file of knob defaults")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--shuffle-prob", dest="p_shuffle", type=_probability,
                   default=None)
    p.add_argument("--mix-prob", dest="p_mix", type=_probability, default=None)
    p.add_argument("--init", dest="init_mode", choices=INIT_MODES, default=None)
    p.add_argument("--freeze-conv", dest="freeze_conv",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--student-layers", dest="student_layers", type=int,
                   default=None)
    p.add_argument("--pairs", type=_layer_pairs, default=None,
                   help="layer pairs like 1:2,2:4 (default: derived)")

    p = sub.add_parser("finetune", parents=[seed],
                       help="CTC fine-tune a checkpoint on corpus transcripts")
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--out", help="run directory")
    p.add_argument("--config", default=None, help="JSON file of knob defaults")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--accumulation", type=int, default=None)
    p.add_argument("--holdout", dest="holdout_fraction", type=_probability,
                   default=None)
    p.add_argument("--freeze-conv", dest="freeze_conv",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--peak-lr", dest="peak_lr", type=float, default=None)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    p.add_argument("--hold-steps", dest="hold_steps", type=int, default=None)
    p.add_argument("--total-steps", dest="total_steps", type=int, default=None)
    p.add_argument("--frame-coverage", dest="frame_coverage",
                   type=_probability, default=None)
    p.add_argument("--channel-coverage", dest="channel_coverage",
                   type=_probability, default=None)
    p.add_argument("--frame-span", dest="frame_span", type=int, default=None)
    p.add_argument("--channel-span", dest="channel_span", type=int, default=None)

    p = sub.add_parser("eval", parents=[seed],
                       help="score a fine-tuned checkpoint on a corpus")
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("cka", parents=[seed],
                       help="layer-similarity matrix between two checkpoints")
    p.add_argument("--model-a", dest="model_a")
    p.add_argument("--model-b", dest="model_b")
    p.add_argument("--corpus", help="probe corpus directory")
    p.add_argument("--out", help="run directory")
    p.add_argument("--max-frames", dest="max_frames", type=int, default=4096)

    p = sub.add_parser("run-ablation", parents=[seed],
                       help="distil the {jump,continuous} x {splice,none} grid")
    p.add_argument("--teacher")
    p.add_argument("--corpus")
    p.add_argument("--out", help="grid directory")
    p.add_argument("--config", default=None, help="JSON file of knob defaults")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--shuffle-prob", dest="p_shuffle", type=_probability,
                   default=None, help="shuffle rate for the splice-on arms")
    p.add_argument("--mix-prob", dest="p_mix", type=_probability, default=None)
    p.add_argument("--student-layers", dest="student_layers", type=int,
                   default=None)

    return parser


def parse_args(argv=None) -> Command:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.seed is None:
        raw = os.environ.get("DISTILLAB_SEED", "0")
        try:
            ns.seed = int(raw)
        except ValueError:
            parser.error(f"DISTILLAB_SEED={raw!r} is not an integer")
    return Command(ns.command, ns)


# ---------------------------------------------------------------------------
# knob resolution and run-directory plumbing


def _require(ns: argparse.Namespace, *names: str) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in names
               if getattr(ns, name) is None]
    if missing:
        raise ArgumentError(f"{ns.command} needs {', '.join(missing)}")


def _resolve(ns: argparse.Namespace, knobs: dict, config_path) -> dict:
    """Defaults, overridden by the JSON config file, overridden by flags."""
    resolved = dict(knobs)
    if config_path:
        file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        unknown = sorted(set(file_cfg) - set(knobs))
        if unknown:
            raise ArgumentError(f"unknown config keys {unknown}; "
                                f"valid keys are {sorted(knobs)}")
        resolved.update(file_cfg)
    for key in knobs:
        value = getattr(ns, key, None)
        if value is not None:
            resolved[key] = value
    if resolved.get("pairs"):
        resolved["pairs"] = [[int(s), int(t)] for s, t in resolved["pairs"]]
    return resolved


def _write_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def _start_run(out, config: dict) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(config, out_dir / "config.resolved.json")
    return out_dir


def _finish_run(out_dir: Path) -> None:
    (out_dir / DONE_MARKER).write_text("ok\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_corpus(ns) -> int:
    _require(ns, "out")
    spec = {"n_utts": ns.n_utts,
            "syllable_inventory_size": ns.inventory,
            "syllables_per_utt_range": (ns.min_syllables, ns.max_syllables),
            "syllable_ms_range": (ns.min_ms, ns.max_ms),
            "seed": ns.seed}
    generate_synthetic_corpus(spec, ns.out)
    print(f"wrote {ns.n_utts} utterances to {ns.out}")
    return 0


def _cmd_splice(ns) -> int:
    _require(ns, "corpus", "out")
    corpus = load_corpus(ns.corpus)
    out_dir = Path(ns.out)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([ns.seed, 8])
    transcripts, utt_records = {}, {}
    for utt in corpus.utterances:
        labels = corpus.transcripts[utt.id]
        spliced = maybe_shuffle(utt, corpus.spans[utt.id], rng,
                                p_shuffle=ns.p_shuffle,
                                crossfade_ms=ns.crossfade_ms)
        perm = getattr(spliced, "permutation", None)
        transcripts[utt.id] = ([labels[p] for p in perm] if perm is not None
                               else list(labels))
        write_wav(out_dir / "wav" / f"{utt.id}.wav", spliced.samples)
        utt_records[utt.id] = {
            "permutation": [int(p) for p in perm] if perm is not None else None}
    write_transcripts(transcripts, out_dir / "transcripts.txt")
    _write_json({"source": str(ns.corpus), "p_shuffle": ns.p_shuffle,
                 "crossfade_ms": ns.crossfade_ms, "seed": ns.seed,
                 "utterances": utt_records}, out_dir / "splice.json")
    shuffled = sum(1 for r in utt_records.values() if r["permutation"] is not None)
    print(f"shuffled {shuffled} of {len(utt_records)} utterances into {out_dir}")
    return 0


def _cmd_init(ns) -> int:
    _require(ns, "out")
    if ns.teacher is None and ns.preset is None:
        raise ArgumentError("init needs --teacher or --preset")
    if ns.teacher is not None:
        teacher = load_checkpoint(ns.teacher)
        depth = ns.depth if ns.depth is not None else teacher.config.n_layers // 2
        student = init_student(teacher, DistillConfig(
            steps=1, init_mode=ns.mode, student_layers=depth, seed=ns.seed))
    else:
        if ns.mode != "random":
            raise ArgumentError(
                f"--preset builds fresh weights; use --mode random, not {ns.mode!r}")
        config = PRESETS[ns.preset]
        if ns.depth is not None:
            config = config.with_layers(ns.depth)
        params = init_params(config, np.random.default_rng([ns.seed, 17]))
        student = Checkpoint(config,
                             {name: p.data.copy() for name, p in params.items()},
                             {"init": {"mode": "random", "mapping": []}})
    save_checkpoint(student, ns.out)
    print(f"wrote {student.config.n_layers}-layer checkpoint to {ns.out}")
    return 0


def _distill_config(resolved: dict, init_mode: str, seed: int) -> DistillConfig:
    pairs = resolved["pairs"]
    return DistillConfig(
        steps=resolved["steps"], lr=resolved["lr"],
        batch_size=resolved["batch_size"], p_shuffle=resolved["p_shuffle"],
        p_mix=resolved["p_mix"], init_mode=init_mode,
        freeze_conv=resolved.get("freeze_conv", True),
        pairs=tuple((int(s), int(t)) for s, t in pairs) if pairs else None,
        seed=seed, student_layers=resolved["student_layers"])


def _cmd_distil(ns) -> int:
    _require(ns, "teacher", "corpus", "out")
    resolved = _resolve(ns, DISTIL_KNOBS, ns.config)
    teacher = load_checkpoint(ns.teacher)
    corpus = load_corpus(ns.corpus)
    cfg = _distill_config(resolved, resolved["init_mode"], ns.seed)
    out_dir = _start_run(ns.out, {"command": "distil", "teacher": str(ns.teacher),
                                  "corpus": str(ns.corpus), "seed": ns.seed,
                                  "distill": resolved})
    result = train_distill(teacher, corpus, None, cfg)
    save_checkpoint(result.student, out_dir / "student")
    write_trace(result.trace, out_dir / "trace.csv")
    if result.diverged:
        print("warning: run diverged; kept the last finite weights",
              file=sys.stderr)
    _finish_run(out_dir)
    print(f"distilled a {result.student.config.n_layers}-layer student "
          f"for {len(result.trace)} steps into {out_dir}")
    return 0


def _cmd_finetune(ns) -> int:
    _require(ns, "model", "corpus", "out")
    resolved = _resolve(ns, FINETUNE_KNOBS, ns.config)
    ckpt = load_checkpoint(ns.model)
    corpus = load_corpus(ns.corpus)
    cfg = FinetuneConfig(
        steps=resolved["steps"], accumulation=resolved["accumulation"],
        sched=TriStageSchedule(resolved["peak_lr"], resolved["warmup_steps"],
                               resolved["hold_steps"], resolved["total_steps"]),
        mask=MaskSpec(resolved["frame_coverage"], resolved["channel_coverage"],
                      resolved["frame_span"], resolved["channel_span"]),
        holdout_fraction=resolved["holdout_fraction"],
        freeze_conv=resolved["freeze_conv"], seed=ns.seed)
    out_dir = _start_run(ns.out, {"command": "finetune", "model": str(ns.model),
                                  "corpus": str(ns.corpus), "seed": ns.seed,
                                  "finetune": resolved})
    result = finetune(ckpt, corpus.utterances, corpus.transcripts, cfg)
    save_checkpoint(result.checkpoint, out_dir / "student")
    write_trace(result.trace, out_dir / "trace.csv")
    write_report(result.report, out_dir / "report.csv")
    write_hyps(result.hyps, out_dir / "hyps.tsv")
    if result.diverged:
        print("warning: run diverged; kept the last finite weights",
              file=sys.stderr)
    _finish_run(out_dir)
    epoch, split, cer = result.report[-1]
    print(f"fine-tuned for {len(result.trace)} micro-steps; "
          f"epoch {epoch} {split} cer {cer:.4f}")
    return 0


def _cmd_eval(ns) -> int:
    _require(ns, "model", "corpus", "out")
    ckpt = load_checkpoint(ns.model)
    if "head.weight" not in ckpt.tensors:
        raise ArgumentError("checkpoint has no CTC head; fine-tune it first")
    corpus = load_corpus(ns.corpus)
    cer, hyps = evaluate_ctc(ckpt.to_model(), load_head(ckpt),
                             corpus.utterances, corpus.transcripts)
    out_dir = _start_run(ns.out, {"command": "eval", "model": str(ns.model),
                                  "corpus": str(ns.corpus), "seed": ns.seed})
    write_report([(0, "eval", cer)], out_dir / "report.csv")
    write_hyps(hyps, out_dir / "hyps.tsv")
    _finish_run(out_dir)
    print(f"cer {cer:.6f}")
    return 0


def _cmd_cka(ns) -> int:
    _require(ns, "model_a", "model_b", "corpus", "out")
    model_a = load_checkpoint(ns.model_a)
    model_b = load_checkpoint(ns.model_b)
    corpus = load_corpus(ns.corpus)
    matrix = interlayer_matrix(model_a, model_b, corpus.utterances,
                               max_frames=ns.max_frames, seed=ns.seed)
    out_dir = _start_run(ns.out, {"command": "cka", "model_a": str(ns.model_a),
                                  "model_b": str(ns.model_b),
                                  "corpus": str(ns.corpus),
                                  "max_frames": ns.max_frames, "seed": ns.seed})
    export_heatmap(matrix, out_dir / "cka.csv", out_dir / "cka.pgm")
    _finish_run(out_dir)
    rows, cols = matrix.values.shape
    print(f"wrote {rows}x{cols} similarity matrix to {out_dir}")
    return 0


def _cmd_run_ablation(ns) -> int:
    _require(ns, "teacher", "corpus", "out")
    resolved = _resolve(ns, ABLATION_KNOBS, ns.config)
    teacher = load_checkpoint(ns.teacher)
    corpus = load_corpus(ns.corpus)
    out_dir = _start_run(ns.out, {"command": "run-ablation",
                                  "teacher": str(ns.teacher),
                                  "corpus": str(ns.corpus), "seed": ns.seed,
                                  "distill": resolved})
    rows = []
    for init_mode, splice_on in ABLATION_GRID:
        arm = f"{init_mode}-{'splice' if splice_on else 'nosplice'}"
        arm_resolved = dict(resolved, init_mode=init_mode, pairs=None,
                            p_shuffle=resolved["p_shuffle"] if splice_on else 0.0)
        cfg = _distill_config(arm_resolved, init_mode, ns.seed)
        arm_dir = _start_run(out_dir / arm, {"command": "distil",
                                             "teacher": str(ns.teacher),
                                             "corpus": str(ns.corpus),
                                             "seed": ns.seed,
                                             "distill": arm_resolved})
        result = train_distill(teacher, corpus, None, cfg)
        save_checkpoint(result.student, arm_dir / "student")
        write_trace(result.trace, arm_dir / "trace.csv")
        _finish_run(arm_dir)
        rows.append((init_mode, "on" if splice_on else "off",
                     float(result.trace[0][1]), float(result.trace[-1][1])))
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["init", "splice", "first_loss", "final_loss"])
        for init_mode, splice_on, first, final in rows:
            w.writerow([init_mode, splice_on, repr(first), repr(final)])
    _finish_run(out_dir)
    print(f"{'init':<12}{'splice':<8}{'first_loss':>14}{'final_loss':>14}")
    for init_mode, splice_on, first, final in rows:
        print(f"{init_mode:<12}{splice_on:<8}{first:>14.6f}{final:>14.6f}")
    return 0


_HANDLERS = {
    "gen-corpus": _cmd_gen_corpus,
    "splice": _cmd_splice,
    "init": _cmd_init,
    "distil": _cmd_distil,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "cka": _cmd_cka,
    "run-ablation": _cmd_run_ablation,
}


def run(cmd: Command) -> int:
    try:
        return _HANDLERS[cmd.name](cmd.args)
    except (DistillabError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        cmd = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
