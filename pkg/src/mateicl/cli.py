"""Command-line entry point.

Subcommands: pack, score, generate, eval, bias-sweep, nu-curve, attn-dump,
selftest.  Model files are MTW1 weights with a JSON config sidecar at
``<model>.json`` (vocab_size, d_model, n_heads, n_layers, max_positions,
ln_eps).  All randomness flows from explicit seeds echoed into outputs.
Report subcommands write a matplotlib figure next to each delimited output
unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting, reports, selftest
from .attention import BiasMode, bias_value
from .errors import FormatError, MateICLError
from .evaluation import (
    TaskSpec,
    bias_sweep,
    dispersion_report,
    infer_kind,
    load_jsonl,
    load_template_file,
    render_template,
    run_eval,
    sample_demo_sets,
    render_fields,
)
from .inference import BeamParams, Model, generate, run_query, score_choice, score_labels
from .model import ModelConfig
from .tokenizer import SimpleVocab
from .windowing import Demonstration, assign_positions, pack_windows
from .attention import concat_caches
from .inference import encode_windows


@dataclass
class RunConfig:
    """Resolved run settings shared by the model-driven subcommands."""

    model: Model
    vocab: SimpleVocab
    task: TaskSpec
    train_pool: list[dict]
    test_set: list[dict]
    W: int
    bias: BiasMode
    k: int
    capacity: int
    seeds: list[int]
    threads: int
    beam: BeamParams


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="MTW1 weight file (config sidecar at <model>.json)")
    p.add_argument("--vocab", required=True, help="vocabulary file, one token per line")


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", required=True, help="test-set JSONL")
    p.add_argument("--train", help="demonstration-pool JSONL (default: the --task file)")
    p.add_argument("--template", required=True, help="prompt template file")
    p.add_argument("--k", type=int, help="demonstrations per window (default: template k)")
    p.add_argument("--capacity", type=int, help="per-window token budget override")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-W", "--windows", type=int, default=1, dest="W", help="window count")
    p.add_argument(
        "--bias", default="mateicl", help="pcw | mateicl | structured | fixed:<b>"
    )
    p.add_argument("--seeds", type=int, help="use seeds 0..n-1 (default 30)")
    p.add_argument("--seed-list", help="explicit comma-separated seed list")
    p.add_argument("--threads", type=int, help="worker threads (default: MATEICL_THREADS or CPUs)")
    p.add_argument("--beam", type=int, default=4, help="beam width")
    p.add_argument("--len-penalty", type=float, default=0.6, help="length penalty alpha")
    p.add_argument("--max-new", type=int, default=16, help="max generated tokens")
    p.add_argument("--stop", default="\\n", help="stop text for generation ('' disables)")
    p.add_argument("--normalize-choices", action="store_true", help="length-normalize choice scores")
    p.add_argument("--out", help="output path stem")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib figure output")


def load_model(path: str) -> Model:
    sidecar = Path(f"{path}.json")
    if not sidecar.exists():
        raise FormatError(f"missing config sidecar {sidecar}")
    cfg = json.loads(sidecar.read_text())
    config = ModelConfig(
        vocab_size=cfg["vocab_size"],
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        n_layers=cfg["n_layers"],
        max_positions=cfg["max_positions"],
        ln_eps=cfg.get("ln_eps", 1e-5),
    )
    return Model.load(path, config)


def _resolve_seeds(args) -> list[int]:
    if args.seed_list:
        return [int(s) for s in args.seed_list.split(",")]
    return list(range(args.seeds if args.seeds is not None else 30))


def _resolve_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("MATEICL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _load_run(args) -> RunConfig:
    model = load_model(args.model)
    vocab = SimpleVocab.load(args.vocab)
    test_set = load_jsonl(args.task)
    train_pool = load_jsonl(args.train) if args.train else test_set
    kind = infer_kind(test_set[0])
    task = load_template_file(args.template, kind, name=Path(args.task).stem)
    k = args.k if args.k is not None else task.k
    capacity = args.capacity if args.capacity is not None else model.config.max_positions
    stop_ids: tuple[int, ...] = ()
    stop_text = args.stop.replace("\\n", "\n") if args.stop else ""
    if stop_text:
        toks = vocab.tokenize(stop_text).ids
        if len(toks) == 1:
            stop_ids = (toks[0],)
    beam = BeamParams(
        beam_width=args.beam,
        length_penalty=args.len_penalty,
        max_new_tokens=args.max_new,
        stop_tokens=stop_ids,
    )
    return RunConfig(
        model=model,
        vocab=vocab,
        task=task,
        train_pool=train_pool,
        test_set=test_set,
        W=args.W,
        bias=BiasMode.parse(args.bias),
        k=k,
        capacity=capacity,
        seeds=_resolve_seeds(args),
        threads=_resolve_threads(args),
        beam=beam,
    )


def _seed_packed(run: RunConfig, seed: int, W: int | None = None, k: int | None = None):
    """Sample and pack one seed's demonstrations (round robin, k per window)."""
    W = run.W if W is None else W
    k = run.k if k is None else k
    demo_set = sample_demo_sets(run.train_pool, k * W, [seed])[0]
    demos = [
        Demonstration(run.vocab.tokenize(render_template(run.task.template, render_fields(ex, run.task.kind))))
        for ex in demo_set
    ]
    packed = pack_windows(demos, run.capacity, W, strategy="round_robin")
    return assign_positions(packed, run.model.config.max_positions)


def _seed_cache(run: RunConfig, seed: int):
    packed = _seed_packed(run, seed)
    caches = encode_windows(run.model, packed, bias=run.bias, threads=run.threads)
    return concat_caches(caches), packed


def _effective_bias(mode: BiasMode, W: int) -> str:
    return str(mode) if bias_value(mode, W) is not None else "off"


def cmd_pack(args) -> int:
    vocab = SimpleVocab.load(args.vocab)
    test_set = load_jsonl(args.task)
    train_pool = load_jsonl(args.train) if args.train else test_set
    kind = infer_kind(train_pool[0])
    task = load_template_file(args.template, kind)
    k = args.k if args.k is not None else task.k
    if args.capacity is None:
        raise FormatError("pack requires --capacity")
    seeds = _resolve_seeds(args)
    demo_set = sample_demo_sets(train_pool, k * args.W, [seeds[0]])[0]
    demos = [
        Demonstration(vocab.tokenize(render_template(task.template, render_fields(ex, kind))))
        for ex in demo_set
    ]
    packed = pack_windows(demos, args.capacity, args.W, strategy=args.strategy)
    packed = assign_positions(packed, args.capacity + len(packed.task_tokens))
    sys.stdout.write(reports.pack_layout_tsv(packed))
    return 0


def cmd_score(args) -> int:
    run = _load_run(args)
    cache, _ = _seed_cache(run, run.seeds[0])
    example = run.test_set[args.index]
    query = run.vocab.tokenize(render_template(run.task.query_template, example)).ids
    lines = []
    if run.task.kind == "classification":
        ranked = score_labels(
            run.model, cache, query,
            [run.vocab.tokenize(lab) for lab in run.task.labels], run.bias, run.W,
        )
        for s in ranked:
            lines.append(f"{s.label}\t{s.total_logprob:.6f}\t{s.normalized_logprob:.6f}")
    elif run.task.kind == "multiple_choice":
        for i, choice in enumerate(example["choices"]):
            val = score_choice(
                run.model, cache, query, run.vocab.tokenize(choice).ids, run.bias, run.W,
                normalize=args.normalize_choices,
            )
            lines.append(f"{i}\t{choice}\t{val:.6f}")
    else:
        raise FormatError("score handles classification/multiple-choice; use generate")
    out = "\n".join(lines) + "\n"
    sys.stdout.write(out)
    if args.out:
        Path(args.out).write_text(out)
    return 0


def cmd_generate(args) -> int:
    run = _load_run(args)
    cache, _ = _seed_cache(run, run.seeds[0])
    example = run.test_set[args.index]
    query = run.vocab.tokenize(render_template(run.task.query_template, example)).ids
    out_ids = generate(run.model, cache, query, run.beam, run.bias, run.W)
    text = run.vocab.detokenize(out_ids)
    sys.stdout.write(text + "\n")
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_eval(args) -> int:
    run = _load_run(args)
    report = run_eval(
        run.task, run.model, run.vocab, run.W, run.bias, run.k, run.seeds,
        run.train_pool, run.test_set, capacity=run.capacity, beam=run.beam,
        normalize_choices=args.normalize_choices, threads=run.threads,
        model_id=Path(args.model).name,
    )
    payload = report.to_json()
    line = (
        f"task={report.task} W={report.W} bias={report.bias} k={report.k} "
        f"seeds={len(report.seeds)} score={report.summary}\n"
    )
    sys.stdout.write(line)
    if args.out:
        Path(args.out).with_suffix(".json").write_text(payload)
        if not args.no_figures:
            plotting.save_eval_scores(report, Path(args.out).with_suffix(".png"))
    return 0


def cmd_bias_sweep(args) -> int:
    run = _load_run(args)
    b_values = [float(b) for b in args.b_list.split(",")]
    W_values = [int(w) for w in args.W_list.split(",")]
    rows = bias_sweep(
        run.task, run.model, run.vocab, b_values, W_values,
        {W: run.k for W in W_values}, run.seeds, run.train_pool, run.test_set,
        capacity=run.capacity, threads=run.threads, model_id=Path(args.model).name,
    )
    out = Path(args.out or "bias_sweep")
    reports.write_sweep_csv(out.with_suffix(".csv"), rows)
    if not args.no_figures:
        plotting.save_sweep_curves(rows, out.with_suffix(".png"))
    sys.stdout.write(f"wrote {out.with_suffix('.csv')} ({len(rows)} cells)\n")
    return 0


def cmd_nu_curve(args) -> int:
    run = _load_run(args)
    W_values = [int(w) for w in args.W_list.split(",")]
    example = run.test_set[args.index]
    task_tokens = run.vocab.tokenize(render_template(run.task.query_template, example)).ids
    packed_by_W = {}
    for W in W_values:
        packed = _seed_packed(run, run.seeds[0], W=W)
        packed = packed.with_task(task_tokens)
        packed_by_W[W] = assign_positions(packed, run.model.config.max_positions)
    rows = dispersion_report(run.model, packed_by_W, run.bias)
    out = Path(args.out or "nu_curve")
    reports.write_dispersion_csv(out.with_suffix(".csv"), rows)
    if not args.no_figures:
        plotting.save_dispersion_curves(rows, out.with_suffix(".png"))
    sys.stdout.write(f"wrote {out.with_suffix('.csv')} ({len(rows)} rows)\n")
    return 0


def cmd_attn_dump(args) -> int:
    run = _load_run(args)
    cache, packed = _seed_cache(run, run.seeds[0])
    example = run.test_set[args.index]
    task_tokens = run.vocab.tokenize(render_template(run.task.query_template, example)).ids
    _, trace, _ = run_query(run.model, cache, task_tokens, run.bias, run.W, collect_traces=True)
    selected = None
    if args.dump_attn and args.dump_attn != "all":
        layer, head = (int(x) for x in args.dump_attn.split(","))
        selected = (layer, head)
    out = Path(args.out or "attn")
    bias_label = _effective_bias(run.bias, run.W)
    written = []
    for head in trace.heads:
        if selected and (head.layer, head.head) != selected:
            continue
        stem = Path(f"{out}.L{head.layer}H{head.head}")
        reports.write_attention_csv(
            stem.with_suffix(".csv"), head, trace.key_segments, run.W, bias_label
        )
        if not args.no_figures:
            meta = {"layer": head.layer, "head": head.head, "W": run.W, "bias": bias_label}
            tags = ["task" if s == -1 else f"w{s}" for s in trace.key_segments]
            plotting.save_attention_heatmap(head.rows_post, tags, meta, stem.with_suffix(".png"))
        written.append(str(stem.with_suffix(".csv")))
    sys.stdout.write("\n".join(written) + "\n")
    return 0


def cmd_selftest(args) -> int:
    return selftest.run(verbose=not args.quiet)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mateicl",
        description="Parallel-context-window ICL engine with attention recalibration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="print the window layout report (TSV)")
    p.add_argument("--vocab", required=True)
    _add_task_flags(p)
    _add_run_flags(p)
    p.add_argument("--strategy", default="greedy_fill", choices=["greedy_fill", "round_robin"])
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("score", help="rank labels/choices for one query")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_run_flags(p)
    p.add_argument("--index", type=int, default=0, help="test example index")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("generate", help="beam-search decode for one query")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_run_flags(p)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="run the seeded evaluation protocol")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_run_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bias-sweep", help="fixed-bias grid over (b, W) -> CSV")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_run_flags(p)
    p.add_argument("--b-list", default="1,2,3,4,5,6,7")
    p.add_argument("--W-list", default="3,6,9")
    p.set_defaults(fn=cmd_bias_sweep)

    p = sub.add_parser("nu-curve", help="attention dispersion vs W -> CSV")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_run_flags(p)
    p.add_argument("--W-list", default="1,3,6,9")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_nu_curve)

    p = sub.add_parser("attn-dump", help="per-layer/head post-bias weight CSVs")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_run_flags(p)
    p.add_argument("--dump-attn", default="all", help="'layer,head' or 'all'")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_attn_dump)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_selftest)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MateICLError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
