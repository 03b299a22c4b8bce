"""Toy caption vocabulary and the per-scene prompt (caption tokens plus camera params)."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ContractError, VocabularyError


class Vocabulary:
    """Token list read from a plain-text file: one token per line, line index = id."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Vocabulary":
        if path is None:
            text = resources.files("mmvdiff").joinpath("data/vocab.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls(line.strip() for line in text.splitlines() if line.strip())

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    def encode(self, caption: str) -> list[int]:
        ids = []
        for word in caption.split():
            if word not in self.index:
                raise VocabularyError(f"unknown token {word!r}")
            ids.append(self.index[word])
        return ids

    def decode(self, ids) -> str:
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside vocabulary of {len(self.tokens)}")
        return " ".join(self.tokens[i] for i in ids)


_DEFAULT: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Vocabulary.load()
    return _DEFAULT


@dataclass
class ScenePrompt:
    caption_tokens: list[int]
    camera_params: np.ndarray  # [V, 16]

    def validate(self, vocab_size: int) -> None:
        if any(not 0 <= t < vocab_size for t in self.caption_tokens):
            raise VocabularyError(f"caption token outside vocabulary of {vocab_size}")
        cams = np.asarray(self.camera_params)
        if cams.ndim != 2 or cams.shape[1] != 16:
            raise ContractError(f"camera params must be [V, 16], got {cams.shape}")
        if np.any(cams[:, :2] <= 0):
            raise ContractError("focal lengths must be positive")
