"""Self-contained tokenizer and corpus ingestion.

Two schemes are supported:

* ``byte``: every UTF-8 byte is a token, so encoding is total and
  sentence punctuation is trivially a standalone token.
* ``word``: whitespace-separated words, with each ``.``, ``!``, ``?``
  character split off as its own token ("Hi." -> ["Hi", "."]).

Both keep sentence-ending punctuation as single tokens so that the
downstream boundary rule stays purely token-anchored.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SENTENCE_PUNCT = (".", "!", "?")

BYTE = "byte"
WORD = "word"
SCHEMES = (BYTE, WORD)

_BYTE_SPECIALS = ("<bos>", "<eos>", "<pad>")
_WORD_SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")


class VocabError(ValueError):
    pass


def _word_tokens(text: str) -> list[str]:
    """Split into whitespace words, with sentence punctuation split off."""
    tokens: list[str] = []
    for chunk in text.split():
        run: list[str] = []
        for ch in chunk:
            if ch in SENTENCE_PUNCT:
                if run:
                    tokens.append("".join(run))
                    run = []
                tokens.append(ch)
            else:
                run.append(ch)
        if run:
            tokens.append("".join(run))
    return tokens


@dataclass(frozen=True)
class Vocab:
    """Immutable token table. Ids are dense 0..size-1; the n_g gist ids
    occupy the top of the range."""

    scheme: str
    entries: tuple[tuple[str, int], ...]
    bos_id: int
    eos_id: int
    pad_id: int
    unk_id: int | None
    gist_first: int  # == size when n_g == 0
    n_g: int
    punct_ids: frozenset[int]

    def __post_init__(self) -> None:
        ids = [i for _, i in self.entries]
        if ids != list(range(len(ids))):
            raise VocabError("token ids must be dense 0..V-1 in order")
        if self.gist_first + self.n_g != len(ids):
            raise VocabError("gist ids must occupy the top of the id range")
        if not self.punct_ids:
            raise VocabError("punct_ids must be nonempty")
        special = {self.bos_id, self.eos_id, self.pad_id}
        if self.unk_id is not None:
            special.add(self.unk_id)
        if self.punct_ids & special or any(self.is_gist_id(p) for p in self.punct_ids):
            raise VocabError("punct_ids must be disjoint from special and gist ids")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def base_size(self) -> int:
        return self.gist_first

    @property
    def gist_ids(self) -> tuple[int, ...]:
        return tuple(range(self.gist_first, self.gist_first + self.n_g))

    def is_gist_id(self, token_id: int) -> bool:
        return self.gist_first <= token_id < self.gist_first + self.n_g

    @cached_property
    def _surface_to_id(self) -> dict[str, int]:
        return {s: i for s, i in self.entries}

    @cached_property
    def _id_to_surface(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.entries)

    def with_gists(self, n_g: int) -> "Vocab":
        """Return a copy with ``n_g`` gist ids appended at the top."""
        if self.n_g != 0:
            raise VocabError("vocab already carries gist ids")
        if n_g < 0:
            raise VocabError("n_g must be >= 0")
        if n_g == 0:
            return self
        first = self.size
        gists = tuple((f"<g{k}>", first + k - 1) for k in range(1, n_g + 1))
        return replace(self, entries=self.entries + gists, gist_first=first, n_g=n_g)

    def base(self) -> "Vocab":
        """Return the vocab with gist ids removed."""
        if self.n_g == 0:
            return self
        return replace(self, entries=self.entries[: self.gist_first], n_g=0)

    # -- encode / decode ---------------------------------------------------

    def encode(self, text: str) -> list[int]:
        if self.scheme == BYTE:
            offset = len(_BYTE_SPECIALS)
            return [offset + b for b in text.encode("utf-8")]
        lookup = self._surface_to_id
        assert self.unk_id is not None
        return [lookup.get(t, self.unk_id) for t in _word_tokens(text)]

    def decode(self, ids: Iterable[int], *, errors: str = "strict") -> str:
        surfaces = self._id_to_surface
        if self.scheme == BYTE:
            offset = len(_BYTE_SPECIALS)
            pieces: list[str] = []
            buf = bytearray()
            for i in ids:
                if offset <= i < offset + 256:
                    buf.append(i - offset)
                else:
                    if buf:
                        pieces.append(buf.decode("utf-8", errors=errors))
                        buf = bytearray()
                    pieces.append(surfaces[i])
            if buf:
                pieces.append(buf.decode("utf-8", errors=errors))
            return "".join(pieces)
        out: list[str] = []
        for i in ids:
            s = surfaces[i]
            if s in SENTENCE_PUNCT or not out:
                out.append(s)
            else:
                out.append(" " + s)
        return "".join(out)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        special = {"bos": self.bos_id, "eos": self.eos_id, "pad": self.pad_id}
        if self.unk_id is not None:
            special["unk"] = self.unk_id
        return {
            "scheme": self.scheme,
            "entries": [[s, i] for s, i in self.entries],
            "special": special,
            "gist": [self.gist_first, self.n_g],
            "punct": sorted(self.punct_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        special = obj["special"]
        return cls(
            scheme=obj["scheme"],
            entries=tuple((s, i) for s, i in obj["entries"]),
            bos_id=special["bos"],
            eos_id=special["eos"],
            pad_id=special["pad"],
            unk_id=special.get("unk"),
            gist_first=obj["gist"][0],
            n_g=obj["gist"][1],
            punct_ids=frozenset(obj["punct"]),
        )

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(texts: Sequence[str], scheme: str = BYTE, n_g: int = 0) -> Vocab:
    """Build a deterministic vocab from UTF-8 documents.

    Gist ids are reserved at the top of the range when ``n_g`` > 0; their
    embedding rows are only populated later by the vocabulary-extension
    step of the model.
    """
    if scheme not in SCHEMES:
        raise VocabError(f"unknown scheme {scheme!r}")
    if not any(t for t in texts):
        raise VocabError("empty corpus")

    if scheme == BYTE:
        surfaces = list(_BYTE_SPECIALS) + [chr(b) for b in range(256)]
        offset = len(_BYTE_SPECIALS)
        punct = frozenset(offset + ord(p) for p in SENTENCE_PUNCT)
        unk = None
    else:
        seen: set[str] = set()
        for t in texts:
            seen.update(_word_tokens(t))
        seen.update(SENTENCE_PUNCT)
        surfaces = list(_WORD_SPECIALS) + sorted(seen)
        lookup = {s: i for i, s in enumerate(surfaces)}
        punct = frozenset(lookup[p] for p in SENTENCE_PUNCT)
        unk = surfaces.index("<unk>")

    entries = tuple((s, i) for i, s in enumerate(surfaces))
    vocab = Vocab(
        scheme=scheme,
        entries=entries,
        bos_id=0,
        eos_id=1,
        pad_id=2,
        unk_id=unk,
        gist_first=len(entries),
        n_g=0,
        punct_ids=punct,
    )
    return vocab.with_gists(n_g) if n_g else vocab


_LABEL_LINE = re.compile(r"^(\s*label:\s*\S+?)(\.?)\s*$")


def add_label_period(template_text: str) -> str:
    """Append a terminal '.' to every ``label: <token>`` line, once.

    Idempotent; lines that do not match the label pattern pass through
    unchanged.
    """
    out: list[str] = []
    for line in template_text.splitlines(keepends=True):
        body = line.rstrip("\r\n")
        tail = line[len(body):]
        m = _LABEL_LINE.match(body)
        if m:
            body = m.group(1) + "."
        out.append(body + tail)
    return "".join(out)


@dataclass(frozen=True)
class Corpus:
    """Encoded documents; never contains gist ids (those only appear
    after segmentation)."""

    documents: tuple[np.ndarray, ...]
    paths: tuple[str, ...]
    total_token_count: int

    def __post_init__(self) -> None:
        if len(self.documents) != len(self.paths):
            raise VocabError("documents and paths must align")


def load_corpus(directory: str | Path, vocab: Vocab) -> Corpus:
    """Read ``*.txt`` files (lexicographic path order) and encode them."""
    paths = sorted(Path(directory).glob("*.txt"))
    if not paths:
        raise VocabError(f"no .txt documents under {directory}")
    docs: list[np.ndarray] = []
    kept: list[str] = []
    total = 0
    for p in paths:
        ids = vocab.encode(p.read_text(encoding="utf-8"))
        if not ids:
            continue
        if any(vocab.is_gist_id(i) for i in ids):
            raise VocabError(f"document {p} encodes to a reserved gist id")
        docs.append(np.asarray(ids, dtype=np.int32))
        kept.append(str(p))
        total += len(ids)
    if not docs:
        raise VocabError("empty corpus")
    return Corpus(documents=tuple(docs), paths=tuple(kept), total_token_count=total)
