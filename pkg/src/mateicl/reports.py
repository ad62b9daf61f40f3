"""Delimited report emission: attention dumps, dispersion and sweep CSVs.

Attention dump format: a '#' metadata line (layer, head, W, bias, b), a
header row of key segment tags ("w3" or "task"), then one row of post-bias
weights per query token.  Every data row sums to 1.
"""

from __future__ import annotations

import csv

import numpy as np

from .attention import TASK_SEGMENT, HeadTrace
from .errors import FormatError


def _seg_name(seg: int) -> str:
    return "task" if seg == TASK_SEGMENT else f"w{seg}"


def write_attention_csv(path, head: HeadTrace, key_segments: np.ndarray, W: int, bias: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# layer={head.layer} head={head.head} W={W} bias={bias}\n")
        writer = csv.writer(fh)
        writer.writerow([_seg_name(int(s)) for s in key_segments])
        for row in head.rows_post:
            writer.writerow([f"{v:.17g}" for v in row])


def read_attention_csv(path) -> tuple[dict, list[str], np.ndarray]:
    """Returns (metadata, segment tags, weight matrix)."""
    with open(path, encoding="utf-8") as fh:
        meta_line = fh.readline()
        if not meta_line.startswith("#"):
            raise FormatError(f"{path}: missing metadata line")
        meta = {}
        for item in meta_line[1:].split():
            key, _, val = item.partition("=")
            meta[key] = val
        reader = csv.reader(fh)
        tags = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return meta, tags, np.asarray(rows, dtype=np.float64)


def write_dispersion_csv(path, rows: list[tuple[int, int, int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["W", "layer", "head", "mean_task_mass", "mean_nu"])
        for W, layer, head, mass, nu in rows:
            writer.writerow([W, layer, head, f"{mass:.17g}", f"{nu:.17g}"])


def read_dispersion_csv(path) -> list[tuple[int, int, int, float, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3]), float(row[4])))
    return rows


def write_sweep_csv(path, rows: list[tuple[float, int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["b", "W", "mean", "std"])
        for b, W, mean, std in rows:
            writer.writerow([f"{b:g}", W, f"{mean:.17g}", f"{std:.17g}"])


def read_sweep_csv(path) -> list[tuple[float, int, float, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                rows.append((float(row[0]), int(row[1]), float(row[2]), float(row[3])))
    return rows


def pack_layout_tsv(packed) -> str:
    """Tab-separated window layout: index, demo count, tokens, position span."""
    lines = ["window\tdemos\ttokens\tpos_start\tpos_end"]
    counts = packed.demo_counts or tuple("?" for _ in packed.windows)
    for w, window in enumerate(packed.windows):
        if packed.window_positions is not None:
            span = packed.window_positions[w]
            lo, hi = span[0], span[-1]
        else:
            lo = hi = "-"
        lines.append(f"{w}\t{counts[w]}\t{len(window)}\t{lo}\t{hi}")
    return "\n".join(lines) + "\n"
