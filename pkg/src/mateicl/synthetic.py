"""Bundled synthetic tasks built on the hand-crafted matching model.

Both tasks share one vocabulary: pattern tokens ("A", "B", ...), label
tokens ("a", "b", ...), and composite demonstration tokens ("A:b") whose
embedding carries the pattern and the label.  The ground-truth mapping is
label = pattern_index mod n_labels.  Drawing k*W = n_patterns
demonstrations without replacement covers every pattern, so a correct
engine scores 100.0 at every W.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .evaluation import TaskSpec
from .model import Model, save_weights
from .tokenizer import SimpleVocab


@dataclass
class SyntheticAssets:
    model: Model
    vocab: SimpleVocab
    task: TaskSpec
    train_pool: list[dict]
    test_set: list[dict]


def _vocab_entries(vocab_map: dict[str, int]) -> list[str]:
    return [tok for tok, _ in sorted(vocab_map.items(), key=lambda kv: kv[1])]


def matching_classification(
    n_patterns: int = 6, n_labels: int = 3, temperature: float = 16.0
) -> SyntheticAssets:
    model, vocab_map = Model.matching(n_patterns, n_labels, temperature)
    vocab = SimpleVocab(_vocab_entries(vocab_map))
    labels = tuple(chr(ord("a") + l) for l in range(n_labels))
    examples = [
        {"text": chr(ord("A") + p), "label": labels[p % n_labels]} for p in range(n_patterns)
    ]
    task = TaskSpec(
        kind="classification",
        template="{text}:{label}",
        query_template="{text}",
        labels=labels,
        metric="accuracy",
        k=1,
        name="matching-classification",
    )
    return SyntheticAssets(model, vocab, task, examples, examples)


def pattern_completion_choices(
    n_patterns: int = 6, n_labels: int = 3, temperature: float = 16.0
) -> SyntheticAssets:
    model, vocab_map = Model.matching(n_patterns, n_labels, temperature)
    vocab = SimpleVocab(_vocab_entries(vocab_map))
    choices = [chr(ord("a") + l) for l in range(n_labels)]
    examples = [
        {"question": chr(ord("A") + p), "choices": choices, "answer": p % n_labels}
        for p in range(n_patterns)
    ]
    task = TaskSpec(
        kind="multiple_choice",
        template="{question}:{answer}",
        query_template="{question}",
        metric="accuracy",
        k=1,
        name="pattern-completion",
    )
    return SyntheticAssets(model, vocab, task, examples, examples)


def write_assets(out_dir, assets: SyntheticAssets) -> dict[str, Path]:
    """Write model/vocab/config/datasets/template files for CLI runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "model": out / "model.mtw",
        "config": out / "model.mtw.json",
        "vocab": out / "vocab.txt",
        "train": out / "train.jsonl",
        "test": out / "test.jsonl",
        "template": out / "template.txt",
    }
    save_weights(assets.model.weights, paths["model"])
    cfg = assets.model.config
    paths["config"].write_text(
        json.dumps(
            {
                "vocab_size": cfg.vocab_size,
                "d_model": cfg.d_model,
                "n_heads": cfg.n_heads,
                "n_layers": cfg.n_layers,
                "max_positions": cfg.max_positions,
                "ln_eps": cfg.ln_eps,
            },
            indent=2,
        )
        + "\n"
    )
    assets.vocab.save(paths["vocab"])
    for key, rows in (("train", assets.train_pool), ("test", assets.test_set)):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    tpl_lines = [assets.task.template, f"query: {assets.task.query_template}"]
    if assets.task.labels:
        tpl_lines.append("labels: " + "|".join(assets.task.labels))
    tpl_lines.append(f"metric: {assets.task.metric}")
    paths["template"].write_text("\n".join(tpl_lines) + "\n")
    return paths
