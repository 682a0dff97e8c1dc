"""Sentence-attention permission structure.

The normative predicate: query q may attend key k iff

    k <= q  and  (sent_idx(k) == sent_idx(q)  or  role(k) is GIST)

so a token sees its own sentence's causal prefix plus every earlier
gist token, and nothing else. The dense boolean form drives desk-scale
execution; the block descriptors (one rectangle per key column) support
density analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .segment import REGULAR, AnnotatedSequence

# ((q_start, q_stop), (k_start, k_stop)), half-open ranges
Block = tuple[tuple[int, int], tuple[int, int]]


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class SentenceMask:
    n: int
    allowed: np.ndarray  # bool (n, n); rows = queries, cols = keys
    blocks: tuple[Block, ...]


def build_mask(a: AnnotatedSequence) -> SentenceMask:
    n = len(a)
    idx = np.arange(n)
    causal = idx[None, :] <= idx[:, None]
    same_sentence = a.sent_idx[None, :] == a.sent_idx[:, None]
    key_is_gist = (a.roles > REGULAR)[None, :]
    allowed = causal & (same_sentence | key_is_gist)

    # One rectangle per key column k: visible to queries k..end-of-sentence
    # for regular keys, and to every later query for gist keys.
    blocks: list[Block] = []
    if n:
        sent_last = np.zeros(int(a.sent_idx[-1]) + 1, dtype=np.int64)
        np.maximum.at(sent_last, a.sent_idx, idx)
        for k in range(n):
            q_stop = n if a.roles[k] > REGULAR else int(sent_last[a.sent_idx[k]]) + 1
            blocks.append(((k, q_stop), (k, k + 1)))
    return SentenceMask(n=n, allowed=allowed, blocks=tuple(blocks))


def mask_density(m: SentenceMask) -> float:
    """Fraction of the causal triangle retained by the mask."""
    if m.n < 1:
        raise MaskError("density undefined for empty mask")
    triangle = m.n * (m.n + 1) // 2
    return float(int(m.allowed.sum()) / triangle)


MAX_RENDER = 4096


def render_mask(m: SentenceMask, format: str = "ascii") -> bytes:
    """Render the dense mask: '#'/'.' rows for ascii, binary P5 for pgm."""
    if m.n > MAX_RENDER:
        raise MaskError(f"mask of size {m.n} exceeds render limit {MAX_RENDER}")
    if format == "ascii":
        rows = ["".join("#" if v else "." for v in row) for row in m.allowed]
        return "\n".join(rows).encode("ascii")
    if format == "pgm":
        header = f"P5\n{m.n} {m.n}\n255\n".encode("ascii")
        return header + (m.allowed.astype(np.uint8) * 255).tobytes()
    raise MaskError(f"unknown render format {format!r}")


def blocks_cover(m: SentenceMask) -> np.ndarray:
    """Re-materialize the union of the block descriptors (for checks)."""
    out = np.zeros((m.n, m.n), dtype=bool)
    for (q0, q1), (k0, k1) in m.blocks:
        out[q0:q1, k0:k1] = True
    return out


def sentence_block_table(a: AnnotatedSequence, m: SentenceMask) -> list[dict]:
    """Per-sentence summary of the mask structure."""
    rows: list[dict] = []
    for s in range(a.n_sentences):
        member = a.sent_idx == s
        positions = np.flatnonzero(member)
        n_gist = int((a.roles[member] > REGULAR).sum())
        rows.append(
            {
                "sentence": s,
                "start": int(positions[0]),
                "stop": int(positions[-1]) + 1,
                "regular": int(len(positions)) - n_gist,
                "gist": n_gist,
            }
        )
    return rows
