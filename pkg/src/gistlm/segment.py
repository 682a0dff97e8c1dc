"""Gist insertion and sentence annotation.

A raw token sequence becomes an :class:`AnnotatedSequence` by inserting
``n_g`` gist tokens immediately after every sentence-ending punctuation
token. Every position carries a role (regular, or k-th gist of its run)
and a 0-based sentence index. A trailing sentence without terminal
punctuation is the "open tail": it receives no gist tokens and behaves
like a normal sentence for masking purposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vocab import Vocab

REGULAR = 0  # roles: 0 = regular token, k >= 1 = GIST(k)


class SegmentError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedSequence:
    ids: np.ndarray       # int32 (L,)
    roles: np.ndarray     # int16 (L,): REGULAR or gist slot 1..n_g
    sent_idx: np.ndarray  # int32 (L,), non-decreasing
    n_g: int
    open_tail: bool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_sentences(self) -> int:
        return int(self.sent_idx[-1]) + 1 if len(self) else 0

    @property
    def gist_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles > 0)

    @property
    def regular_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == REGULAR)


def segment(raw: Sequence[int] | np.ndarray, vocab: Vocab, n_g: int) -> AnnotatedSequence:
    """Insert a run of n_g gist tokens after every punctuation token.

    One run fires per punctuation token, so consecutive punctuation
    ("?!", "...") closes one single-token sentence per extra mark.
    """
    if n_g < 1:
        raise SegmentError("n_g must be >= 1")
    if vocab.n_g < n_g:
        raise SegmentError(f"vocab reserves {vocab.n_g} gist ids, need {n_g}")
    raw = np.asarray(raw, dtype=np.int32)
    gist_ids = vocab.gist_ids[:n_g]
    if raw.size and any(vocab.is_gist_id(int(t)) for t in raw):
        raise SegmentError("gist id in raw input")

    ids: list[int] = []
    roles: list[int] = []
    sent: list[int] = []
    s = 0
    for t in raw.tolist():
        ids.append(t)
        roles.append(REGULAR)
        sent.append(s)
        if t in vocab.punct_ids:
            for k in range(1, n_g + 1):
                ids.append(gist_ids[k - 1])
                roles.append(k)
                sent.append(s)
            s += 1
    open_tail = raw.size > 0 and int(raw[-1]) not in vocab.punct_ids
    return AnnotatedSequence(
        ids=np.asarray(ids, dtype=np.int32),
        roles=np.asarray(roles, dtype=np.int16),
        sent_idx=np.asarray(sent, dtype=np.int32),
        n_g=n_g,
        open_tail=open_tail,
    )


def annotate_causal(raw: Sequence[int] | np.ndarray) -> AnnotatedSequence:
    """Wrap a raw sequence as a single open sentence (plain causal LM).

    Used for base-model training and prompts that should not be
    compressed; the derived mask is the full causal triangle.
    """
    raw = np.asarray(raw, dtype=np.int32)
    n = raw.size
    return AnnotatedSequence(
        ids=raw.astype(np.int32),
        roles=np.zeros(n, dtype=np.int16),
        sent_idx=np.zeros(n, dtype=np.int32),
        n_g=0,
        open_tail=n > 0,
    )


def strip_gists(a: AnnotatedSequence) -> np.ndarray:
    """Inverse of segment: drop all gist positions."""
    return a.ids[a.roles == REGULAR].copy()


def count_tokens(a: AnnotatedSequence) -> tuple[int, int]:
    """(n_regular, n_gist) of the processed sequence."""
    n_gist = int((a.roles > REGULAR).sum())
    return len(a) - n_gist, n_gist


def truncate_annotated(a: AnnotatedSequence, max_len: int) -> AnnotatedSequence:
    """Longest valid prefix of at most ``max_len`` positions.

    A cut is valid only where it does not separate a punctuation token
    from its gist run or split a run: the first removed position must be
    a regular token. The truncated tail sentence becomes the open tail.
    """
    if max_len < 0:
        raise SegmentError("max_len must be >= 0")
    if len(a) <= max_len:
        return a
    cut = max_len
    while cut > 0 and a.roles[cut] != REGULAR:
        cut -= 1
    closed_end = cut > 0 and a.n_g > 0 and a.roles[cut - 1] == a.n_g
    return AnnotatedSequence(
        ids=a.ids[:cut].copy(),
        roles=a.roles[:cut].copy(),
        sent_idx=a.sent_idx[:cut].copy(),
        n_g=a.n_g,
        open_tail=cut > 0 and not closed_end,
    )


def slice_sentences(a: AnnotatedSequence, first_sentence: int) -> AnnotatedSequence:
    """Suffix starting at the given sentence index, rebased to sentence 0."""
    if first_sentence <= 0:
        return a
    keep = a.sent_idx >= first_sentence
    start = int(np.argmax(keep)) if keep.any() else len(a)
    return AnnotatedSequence(
        ids=a.ids[start:].copy(),
        roles=a.roles[start:].copy(),
        sent_idx=(a.sent_idx[start:] - first_sentence).astype(np.int32),
        n_g=a.n_g,
        open_tail=a.open_tail,
    )


def sentence_starts(a: AnnotatedSequence) -> np.ndarray:
    """Position of the first token of each sentence."""
    if not len(a):
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(a.sent_idx)) + 1
    return np.concatenate([[0], change])


def validate(a: AnnotatedSequence, vocab: Vocab | None = None) -> None:
    """Check the structural invariants; raise SegmentError on violation."""
    L = len(a)
    if not (len(a.roles) == len(a.sent_idx) == L):
        raise SegmentError("field lengths disagree")
    if L == 0:
        if a.open_tail:
            raise SegmentError("empty sequence cannot have an open tail")
        return
    d = np.diff(a.sent_idx)
    if (d < 0).any() or (d > 1).any():
        raise SegmentError("sent_idx must be non-decreasing in steps of 1")
    inc_at = np.flatnonzero(d == 1)  # position before each increment
    for p in inc_at:
        if a.roles[p] != a.n_g or a.n_g == 0:
            raise SegmentError("sentence index must increment only after GIST(n_g)")
    # every gist run is contiguous 1..n_g and preceded by punctuation
    pos = 0
    while pos < L:
        r = int(a.roles[pos])
        if r == REGULAR:
            pos += 1
            continue
        if r != 1 or pos + a.n_g > L:
            raise SegmentError("gist run must start at GIST(1) and be complete")
        for k in range(1, a.n_g + 1):
            if a.roles[pos + k - 1] != k:
                raise SegmentError("gist run must be contiguous GIST(1)..GIST(n_g)")
            if vocab is not None and a.ids[pos + k - 1] != vocab.gist_ids[k - 1]:
                raise SegmentError("GIST(k) position must carry gist id k")
        if pos == 0:
            raise SegmentError("gist run cannot open a sequence")
        if vocab is not None and int(a.ids[pos - 1]) not in vocab.punct_ids:
            raise SegmentError("gist run must follow a punctuation token")
        pos += a.n_g
    if vocab is not None:
        for p in np.flatnonzero(a.roles == REGULAR):
            if vocab.is_gist_id(int(a.ids[p])):
                raise SegmentError("regular position carries a gist id")
    closed_end = a.n_g > 0 and a.roles[-1] == a.n_g
    if a.open_tail == closed_end:
        raise SegmentError("open_tail flag inconsistent with final position")
