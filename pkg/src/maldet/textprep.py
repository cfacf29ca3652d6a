"""Vocabulary fitting, integer encoding, fixed-length padding, and splits.

Ids 0 and 1 are reserved for padding and out-of-vocabulary tokens; real
tokens get contiguous ids from 2 in descending corpus frequency (ties by
ascending token name). The vocabulary is fit on the training split only
and is immutable afterwards.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSplit, EmptyCorpus, UnknownId
from .reports import LabeledSequence
from .tensor import Rng

PAD_ID = 0
OOV_ID = 1
OOV_TOKEN = "<OOV>"


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token<->id map over ids >= 2, with reserved PAD=0 and OOV=1."""

    token_to_id: dict[str, int]
    id_to_token: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_to_token:
            object.__setattr__(
                self, "id_to_token", {i: t for t, i in self.token_to_id.items()}
            )
        ids = sorted(self.token_to_id.values())
        if ids and (ids[0] != 2 or ids[-1] != len(ids) + 1):
            raise ValueError("token ids must be contiguous from 2")
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("token ids must be unique")

    @property
    def size(self) -> int:
        return len(self.token_to_id) + 2

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, OOV_ID)


def fit_vocabulary(train: list[LabeledSequence], max_vocab: int | None = None) -> Vocabulary:
    """Assign ids by descending corpus frequency, ties by token name.

    ``max_vocab`` caps the total vocabulary size (reserved ids included);
    tokens past the cap encode as OOV.
    """
    if not train:
        raise EmptyCorpus("cannot fit a vocabulary on an empty training set")
    counts = Counter(token for row in train for token in row.calls)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_vocab is not None:
        if max_vocab < 3:
            raise ValueError("max_vocab must leave room for at least one token")
        ranked = ranked[: max_vocab - 2]
    return Vocabulary({token: i + 2 for i, (token, _) in enumerate(ranked)})


def encode(seq: list[str], vocab: Vocabulary, n: int) -> np.ndarray:
    """Fixed-length id vector: head-truncate past n, zero post-pad below it."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ids = np.zeros(n, dtype=np.int64)
    for i, token in enumerate(seq[:n]):
        ids[i] = vocab.id_of(token)
    return ids


def decode(ids, vocab: Vocabulary) -> list[str]:
    """Back to tokens: PAD dropped, OOV rendered literally."""
    out = []
    for raw in np.asarray(ids).tolist():
        i = int(raw)
        if i == PAD_ID:
            continue
        if i == OOV_ID:
            out.append(OOV_TOKEN)
        elif i in vocab.id_to_token:
            out.append(vocab.id_to_token[i])
        else:
            raise UnknownId(f"id {i} outside vocabulary of size {vocab.size}")
    return out


@dataclass
class EncodedDataset:
    """Encoded id matrix (num_samples x n) with aligned labels."""

    ids: np.ndarray
    labels: np.ndarray
    n: int

    def __len__(self) -> int:
        return self.ids.shape[0]

    def subset(self, indices) -> "EncodedDataset":
        indices = np.asarray(indices)
        return EncodedDataset(self.ids[indices], self.labels[indices], self.n)


def encode_dataset(rows: list[LabeledSequence], vocab: Vocabulary, n: int) -> EncodedDataset:
    ids = np.stack([encode(r.calls, vocab, n) for r in rows]) if rows else np.zeros((0, n), dtype=np.int64)
    labels = np.array([r.label for r in rows], dtype=np.int64)
    return EncodedDataset(ids, labels, n)


def split_indices(labels, ratio: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Stratified shuffled index split; first part gets floor(ratio*N) items.

    Per-class counts use the largest-remainder method so every class stays
    within one sample of its proportional share.
    """
    labels = np.asarray(labels)
    total = len(labels)
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    target = int(np.floor(ratio * total))
    if target == 0 or target == total:
        raise DegenerateSplit(f"split of {total} items at ratio {ratio} leaves one side empty")

    order = rng.permutation(total)
    classes = sorted(set(labels.tolist()))
    exact = {c: ratio * int((labels == c).sum()) for c in classes}
    take = {c: int(np.floor(exact[c])) for c in classes}
    short = target - sum(take.values())
    for c in sorted(classes, key=lambda c: (-(exact[c] - take[c]), c))[:short]:
        take[c] += 1

    first, second = [], []
    used = {c: 0 for c in classes}
    for idx in order.tolist():
        c = int(labels[idx])
        if used[c] < take[c]:
            first.append(idx)
            used[c] += 1
        else:
            second.append(idx)
    return np.array(first, dtype=np.int64), np.array(second, dtype=np.int64)


def train_test_split(data: list[LabeledSequence], ratio: float, seed: int
                     ) -> tuple[list[LabeledSequence], list[LabeledSequence]]:
    """Seeded, stratified shuffle-then-split of labeled sequences."""
    rng = Rng(seed)
    first, second = split_indices([d.label for d in data], ratio, rng)
    return [data[i] for i in first], [data[i] for i in second]
