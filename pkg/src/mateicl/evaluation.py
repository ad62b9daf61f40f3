"""Tasks, templates, the 30-seed protocol, metrics, and experiment drivers.

A task is a JSONL dataset plus a template file.  Dataset schemas:

    classification   {"text": str, "label": str}
    multiple_choice  {"question": str, "choices": [str], "answer": int}
    extraction       {"context": str, "question": str, "answers": [str]}

Template files hold one template line with {field} placeholders ("\\n"
becomes a newline) plus optional sidecar directives, one per line:
``query:`` (prompt rendered for the test example; defaults to the template
cut at the label placeholder), ``labels: a|b|c`` (classification label
set), and ``metric: accuracy|em|f1``.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import BiasKind, BiasMode, bias_value, concat_caches
from .errors import DomainError, FormatError, TemplateError
from .inference import (
    BeamParams,
    Model,
    encode_windows,
    generate,
    run_query,
    score_choice,
    score_labels,
)
from .numerics import Rng
from .tokenizer import SimpleVocab
from .windowing import Demonstration, assign_positions, pack_windows

_PLACEHOLDER = re.compile(r"\{([^{}]+)\}")
_LABEL_FIELD = {"classification": "label", "multiple_choice": "answer", "extraction": "answers"}


def render_template(template: str, example: dict) -> str:
    """Substitute {field} placeholders; ``\\n`` in the template is a newline."""
    template = template.replace("\\n", "\n")

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in example:
            raise TemplateError(f"template field {{{name}}} missing from example")
        return str(example[name])

    return _PLACEHOLDER.sub(sub, template)


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # classification | multiple_choice | extraction
    template: str
    query_template: str
    labels: tuple[str, ...] = ()
    metric: str = "accuracy"
    k: int = 1
    name: str = "task"

    def __post_init__(self):
        if self.kind == "classification" and not self.labels:
            raise DomainError("classification tasks need a label set")
        if self.metric not in ("accuracy", "em", "f1"):
            raise DomainError(f"unknown metric {self.metric!r}")


def _default_query_template(template: str, kind: str) -> str:
    marker = "{" + _LABEL_FIELD[kind] + "}"
    at = template.find(marker)
    if at < 0:
        raise FormatError(
            f"template has no {marker} placeholder; add an explicit 'query:' line"
        )
    return template[:at]


def load_template_file(path, kind: str, k: int = 1, name: str = "task") -> TaskSpec:
    template = None
    query = None
    labels: tuple[str, ...] = ()
    metric = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("query:"):
                query = line[len("query:") :].strip()
            elif line.startswith("labels:"):
                labels = tuple(s.strip() for s in line[len("labels:") :].split("|"))
            elif line.startswith("metric:"):
                metric = line[len("metric:") :].strip()
            elif template is None:
                template = line
            else:
                raise FormatError(f"{path}: second template line {line!r}; use \\n escapes")
    if template is None:
        raise FormatError(f"{path}: no template line found")
    if metric is None:
        metric = "accuracy" if kind in ("classification", "multiple_choice") else "f1"
    if query is None:
        query = _default_query_template(template, kind)
    return TaskSpec(
        kind=kind, template=template, query_template=query, labels=labels, metric=metric,
        k=k, name=name,
    )


def load_jsonl(path) -> list[dict]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{ln}: invalid JSON") from exc
    if not examples:
        raise FormatError(f"{path}: empty dataset")
    return examples


def infer_kind(example: dict) -> str:
    keys = set(example)
    if {"text", "label"} <= keys:
        return "classification"
    if {"question", "choices", "answer"} <= keys:
        return "multiple_choice"
    if {"context", "question", "answers"} <= keys:
        return "extraction"
    raise FormatError(f"unrecognized dataset schema with fields {sorted(keys)}")


def render_fields(example: dict, kind: str) -> dict:
    """Field map handed to the template (answer/answers resolved to text)."""
    if kind == "multiple_choice":
        out = dict(example)
        out["answer"] = example["choices"][example["answer"]]
        return out
    if kind == "extraction":
        out = dict(example)
        out["answers"] = example["answers"][0]
        return out
    return example


def sample_demo_sets(pool: list, k_total: int, seeds: list[int]) -> list[list]:
    """One demonstration set per seed, drawn without replacement within a set.

    Sets are independent across seeds (each seed owns its own stream) and
    fully determined by the seed list.
    """
    if k_total > len(pool):
        raise DomainError(f"pool of {len(pool)} cannot supply {k_total} demonstrations")
    sets = []
    for seed in seeds:
        idx = Rng(seed).sample_indices(len(pool), k_total)
        sets.append([pool[i] for i in idx])
    return sets


_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(" " if c in string.punctuation else c for c in text)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def metric_accuracy(preds: list, golds: list) -> float:
    if len(preds) != len(golds):
        raise DomainError("prediction/gold lengths differ")
    if not preds:
        raise DomainError("empty prediction list")
    return 100.0 * sum(p == g for p, g in zip(preds, golds)) / len(preds)


def metric_em(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def metric_f1(pred: str, gold: str) -> float:
    pred_toks = normalize_answer(pred).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks and not gold_toks:
        return 1.0
    if not pred_toks or not gold_toks:
        return 0.0
    common = Counter(pred_toks) & Counter(gold_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_toks)
    recall = same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    task: str
    model_id: str
    W: int
    bias: str
    k: int
    seeds: list[int]
    scores: list[float]  # percent, one per seed

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))  # population std

    @property
    def summary(self) -> str:
        return f"{self.mean:.1f}±{self.std:.1f}"

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "model": self.model_id,
            "W": self.W,
            "bias": self.bias,
            "k": self.k,
            "seeds": self.seeds,
            "scores": self.scores,
            "mean": self.mean,
            "std": self.std,
            "summary": self.summary,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _seed_context(
    task: TaskSpec,
    model: Model,
    vocab: SimpleVocab,
    pool: list[dict],
    W: int,
    k: int,
    seed: int,
    capacity: int,
    bias: BiasMode,
    threads: int = 1,
):
    """Sample, render, pack, and encode one seed's demonstration windows."""
    demo_sets = sample_demo_sets(pool, k * W, [seed])
    demos = []
    for ex in demo_sets[0]:
        text = render_template(task.template, render_fields(ex, task.kind))
        demos.append(Demonstration(vocab.tokenize(text)))
    packed = pack_windows(demos, capacity, W, strategy="round_robin")
    packed = assign_positions(packed, model.config.max_positions)
    caches = encode_windows(model, packed, bias=bias, threads=threads)
    return concat_caches(caches), packed


def _score_example(
    task: TaskSpec,
    model: Model,
    vocab: SimpleVocab,
    cache,
    example: dict,
    bias: BiasMode,
    W: int,
    beam: BeamParams | None,
    normalize_choices: bool,
):
    """Returns (prediction, gold) under the task's protocol."""
    query = vocab.tokenize(render_template(task.query_template, example)).ids
    if task.kind == "classification":
        ranked = score_labels(
            model, cache, query, [vocab.tokenize(lab) for lab in task.labels], bias, W
        )
        return ranked[0].label, example["label"]
    if task.kind == "multiple_choice":
        scores = [
            score_choice(
                model, cache, query, vocab.tokenize(choice).ids, bias, W,
                normalize=normalize_choices,
            )
            for choice in example["choices"]
        ]
        return int(np.argmax(scores)), example["answer"]
    params = beam or BeamParams()
    out_ids = generate(model, cache, query, params, bias, W)
    return vocab.detokenize(out_ids), example["answers"]


def _extraction_score(task: TaskSpec, pred: str, golds: list[str]) -> float:
    fn = metric_em if task.metric == "em" else metric_f1
    return 100.0 * max(fn(pred, gold) for gold in golds)


def run_eval(
    task: TaskSpec,
    model: Model,
    vocab: SimpleVocab,
    W: int,
    bias: BiasMode,
    k: int,
    seeds: list[int],
    train_pool: list[dict],
    test_set: list[dict],
    capacity: int | None = None,
    beam: BeamParams | None = None,
    normalize_choices: bool = False,
    threads: int = 1,
    model_id: str = "model",
) -> EvalReport:
    """30-seed protocol: per seed, sample k*W demonstrations, pack k per
    window (round robin), evaluate the whole test set, report mean +/- std.

    Deterministic in (task, model, W, bias, seed list, test set); thread
    count never changes the digits because every example is scored
    independently and reduced in list order.
    """
    if not seeds:
        raise DomainError("need at least one seed")
    if capacity is None:
        capacity = model.config.max_positions
    scores = []
    for seed in seeds:
        cache, _ = _seed_context(
            task, model, vocab, train_pool, W, k, seed, capacity, bias, threads=threads
        )

        def one(ex: dict):
            return _score_example(task, model, vocab, cache, ex, bias, W, beam, normalize_choices)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool_exec:
                results = list(pool_exec.map(one, test_set))
        else:
            results = [one(ex) for ex in test_set]
        if task.kind == "extraction":
            vals = [_extraction_score(task, pred, golds) for pred, golds in results]
            scores.append(float(np.mean(vals)))
        else:
            scores.append(metric_accuracy([p for p, _ in results], [g for _, g in results]))
    # echo the *effective* bias so gated modes report identically at W = 1
    bias_label = str(bias) if bias_value(bias, W) is not None else "off"
    return EvalReport(
        task=task.name, model_id=model_id, W=W, bias=bias_label, k=k,
        seeds=list(seeds), scores=scores,
    )


def bias_sweep(
    task: TaskSpec,
    model: Model,
    vocab: SimpleVocab,
    b_values: list[float],
    W_values: list[int],
    k_by_W: dict[int, int],
    seeds: list[int],
    train_pool: list[dict],
    test_set: list[dict],
    capacity: int | None = None,
    threads: int = 1,
    model_id: str = "model",
) -> list[tuple[float, int, float, float]]:
    """Fixed-bias grid over (b, W); returns rows (b, W, mean, std)."""
    rows = []
    for b in b_values:
        for W in W_values:
            mode = BiasMode(BiasKind.FIXED, float(b))
            report = run_eval(
                task, model, vocab, W, mode, k_by_W[W], seeds, train_pool, test_set,
                capacity=capacity, threads=threads, model_id=model_id,
            )
            rows.append((float(b), W, report.mean, report.std))
    return rows


def dispersion_report(
    model: Model,
    packed_by_W: dict[int, "object"],
    bias: BiasMode,
) -> list[tuple[int, int, int, float, float]]:
    """Per-W attention dispersion aggregates from the task pass.

    Returns rows (W, layer, head, mean task mass, mean nu) averaged over
    task query rows; task mass is post-bias, nu is the pre-bias mass on
    window keys.
    """
    rows = []
    for W in sorted(packed_by_W):
        packed = packed_by_W[W]
        caches = encode_windows(model, packed, bias=bias)
        cache = concat_caches(caches)
        _, trace, _ = run_query(
            model, cache, list(packed.task_tokens), bias, packed.W, collect_traces=True
        )
        for head in trace.heads:
            rows.append(
                (
                    W,
                    head.layer,
                    head.head,
                    float(head.task_mass_post.mean()),
                    float(head.nu.mean()),
                )
            )
    return rows
