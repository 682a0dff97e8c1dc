"""Annotated-shard file format used by the preprocess step.

A shard is one file: a JSON header line, then a flat binary stream of
(id: u32, role: u8, sent_idx: u32) triples for all documents back to
back. The header records n_g, the vocab hash, and per-document triple
offsets.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .segment import AnnotatedSequence

SCHEMA = "gistlm-shard-v1"

_TRIPLE = np.dtype([("id", "<u4"), ("role", "u1"), ("sent", "<u4")])


class ShardError(ValueError):
    pass


def write_shard(path: str | Path, docs: list[AnnotatedSequence], n_g: int, vocab_hash: str) -> Path:
    path = Path(path)
    offsets = []
    total = 0
    for d in docs:
        if d.n_g != n_g:
            raise ShardError("document n_g does not match shard n_g")
        offsets.append(total)
        total += len(d)
    header = {
        "schema": SCHEMA,
        "n_g": n_g,
        "vocab_hash": vocab_hash,
        "doc_offsets": offsets,
        "n_triples": total,
    }
    stream = np.empty(total, dtype=_TRIPLE)
    for d, off in zip(docs, offsets):
        stream["id"][off: off + len(d)] = d.ids
        stream["role"][off: off + len(d)] = d.roles
        stream["sent"][off: off + len(d)] = d.sent_idx
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(stream.tobytes())
    return path


def read_shard(path: str | Path) -> tuple[dict, list[AnnotatedSequence]]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("schema") != SCHEMA:
            raise ShardError(f"unknown shard schema {header.get('schema')!r}")
        payload = f.read()
    if len(payload) != header["n_triples"] * _TRIPLE.itemsize:
        raise ShardError("shard payload truncated")
    stream = np.frombuffer(payload, dtype=_TRIPLE)
    n_g = header["n_g"]
    bounds = list(header["doc_offsets"]) + [header["n_triples"]]
    docs = []
    for lo, hi in zip(bounds, bounds[1:]):
        ids = stream["id"][lo:hi].astype(np.int32)
        roles = stream["role"][lo:hi].astype(np.int16)
        sent = stream["sent"][lo:hi].astype(np.int32)
        closed = n_g > 0 and hi > lo and roles[-1] == n_g
        docs.append(
            AnnotatedSequence(
                ids=ids, roles=roles, sent_idx=sent, n_g=n_g,
                open_tail=hi > lo and not closed,
            )
        )
    return header, docs
