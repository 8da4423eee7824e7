"""Caption tokenization: closed-vocabulary wordpiece-free encoding with a
leading [CLS_T] token, tail padding, and BERT-style 80/10/10 corruption.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3
RESERVED = ("[PAD]", "[CLS_T]", "[MASK]", "[UNK]")

KEEP = "keep"
TO_MASK = "mask"
TO_RANDOM = "random"


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple
    token_to_id: dict

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    def word(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        lines = [f"{i}\t{tok}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            idx, tok = line.split("\t", 1)
            if int(idx) != len(tokens):
                raise DataError(f"vocabulary file has non-contiguous ids at {idx}")
            tokens.append(tok)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary file is missing the reserved id block")
        return cls(tuple(tokens), {t: i for i, t in enumerate(tokens)})


@dataclass
class TokenSequence:
    """Fixed-length id sequence; position 0 is CLS_T, padding only at the tail."""
    ids: np.ndarray            # int, length L
    attention_mask: np.ndarray  # bool, length L; False exactly on padding

    @property
    def length(self) -> int:
        return int(self.ids.size)

    @property
    def num_real_tokens(self) -> int:
        """Word tokens, excluding CLS_T and padding."""
        return int(self.attention_mask.sum()) - 1

    def copy(self) -> "TokenSequence":
        return TokenSequence(self.ids.copy(), self.attention_mask.copy())


@dataclass
class TextMaskPlan:
    positions: np.ndarray     # indices into the sequence, CLS/padding excluded
    original_ids: np.ndarray  # token ids before corruption
    corruption: tuple         # per-position action: mask | random | keep

    def __len__(self) -> int:
        return int(self.positions.size)


def tokenize(caption: str) -> list:
    return caption.lower().split()


def build_vocab(captions: Iterable[str]) -> Vocabulary:
    """Lexicographically ordered ids after the reserved block."""
    words = set()
    empty = True
    for cap in captions:
        empty = False
        words.update(tokenize(cap))
    if empty:
        raise UsageError("build_vocab: caption corpus is empty")
    tokens = RESERVED + tuple(sorted(words))
    return Vocabulary(tokens, {t: i for i, t in enumerate(tokens)})


def encode(caption: str, vocab: Vocabulary, length: int) -> TokenSequence:
    """[CLS_T] + word ids, truncated or padded to the fixed length."""
    if length < 2:
        raise UsageError(f"encode: sequence length must be >= 2, got {length}")
    ids = [CLS_ID] + [vocab.lookup(w) for w in tokenize(caption)][: length - 1]
    mask = [True] * len(ids) + [False] * (length - len(ids))
    ids = ids + [PAD_ID] * (length - len(ids))
    return TokenSequence(np.array(ids, dtype=np.intp), np.array(mask, dtype=bool))


def mask_tokens(seq: TokenSequence, ratio: float, vocab: Vocabulary,
                rng: np.random.Generator) -> tuple:
    """Corrupt floor(ratio * real-token-count) positions, BERT-style.

    Per selected position: 80% replaced by [MASK], 10% by a random
    non-reserved vocabulary id, 10% kept. CLS_T and padding are never
    selected. Returns (corrupted sequence, plan); zero real tokens give an
    empty plan.
    """
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"mask ratio must lie in (0, 1), got {ratio}")
    real = np.flatnonzero(seq.attention_mask)
    real = real[real != 0]
    count = int(ratio * real.size)
    if count == 0:
        return seq.copy(), TextMaskPlan(np.empty(0, dtype=np.intp),
                                        np.empty(0, dtype=np.intp), ())
    positions = np.sort(rng.choice(real, size=count, replace=False))
    corrupted = seq.copy()
    actions = []
    for pos in positions:
        r = rng.random()
        if r < 0.8:
            corrupted.ids[pos] = MASK_ID
            actions.append(TO_MASK)
        elif r < 0.9:
            corrupted.ids[pos] = int(rng.integers(len(RESERVED), len(vocab)))
            actions.append(TO_RANDOM)
        else:
            actions.append(KEEP)
    return corrupted, TextMaskPlan(positions, seq.ids[positions].copy(), tuple(actions))


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> list:
    return [vocab.word(int(i)) for i in ids]
