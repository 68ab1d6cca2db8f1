"""Synthetic headline corpus for desk-scale convergence runs.

Each class owns three marker characters; a headline mixes one to three of
its class markers with shared noise characters at random positions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Example

LABELS = ("finance", "sports", "games", "education")
MARKERS = ("股债汇", "球赛冠", "游戏玩", "学校考")
NOISE = "的一是在不了有和人这中大为上个国我以要他时来用们生到作地于出就分对成会可"


def make_examples(per_class: int, seed: int = 0, max_len: int = 20) -> list[Example]:
    rng = np.random.default_rng(seed)
    examples = []
    for label, markers in enumerate(MARKERS):
        for _ in range(per_class):
            length = int(rng.integers(4, max_len + 1))
            n_markers = int(rng.integers(1, 4))
            chars = [markers[int(rng.integers(3))] for _ in range(n_markers)]
            chars += [NOISE[int(rng.integers(len(NOISE)))] for _ in range(length - n_markers)]
            rng.shuffle(chars)
            examples.append(Example("".join(chars), label))
    order = rng.permutation(len(examples))
    return [examples[i] for i in order]


def write_tsv(path: str | Path, per_class: int = 140, seed: int = 0) -> Path:
    """Write a 4-class corpus; 140 per class splits 5:1:1 into 400/80/80."""
    path = Path(path)
    lines = [f"{ex.text}\t{LABELS[ex.label]}\n" for ex in make_examples(per_class, seed)]
    path.write_text("".join(lines), encoding="utf-8")
    return path
