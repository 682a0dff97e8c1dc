"""Synthetic copy-chain corpus used by training-dependent tests.

Each document fixes a tuple of content words and repeats it as identical
sentences. Predicting any sentence after the first requires carrying the
tuple across sentence boundaries, so held-out quality directly measures
how much information survives the gist bottleneck.
"""

from __future__ import annotations

import numpy as np

from gistlm.vocab import Corpus, build_vocab


def make_copy_docs(n_docs, sentences, words_per, n_types, seed):
    rng = np.random.default_rng(seed)
    types = [f"w{i:02d}" for i in range(n_types)]
    docs = []
    for _ in range(n_docs):
        tup = rng.choice(types, words_per, replace=False)
        sent = " ".join(tup) + " ."
        docs.append(" ".join([sent] * sentences))
    return docs


def corpus_from_texts(texts, vocab):
    enc = tuple(np.asarray(vocab.encode(t), dtype=np.int32) for t in texts)
    return Corpus(
        documents=enc,
        paths=tuple(f"mem://{i}" for i in range(len(enc))),
        total_token_count=sum(len(e) for e in enc),
    )


def write_corpus_dir(path, texts):
    path.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(texts):
        (path / f"doc{i:05d}.txt").write_text(t, encoding="utf-8")
    return path


def build_copy_setup(n_docs=200, sentences=8, words_per=6, n_types=32, n_g=8, seed=0):
    texts = make_copy_docs(n_docs, sentences, words_per, n_types, seed)
    vocab = build_vocab(texts, "word", n_g=n_g)
    return texts, vocab, corpus_from_texts(texts, vocab)
