"""Compressed-context inference.

Prefill is a single masked forward pass; the resulting cache keeps only
gist entries plus the open sentence. Decoding then proceeds one token at
a time: a sampled punctuation token triggers the forced insertion of the
full gist run (whose keys/values join the retained region) followed by
physical eviction of the closed sentence's entries. Because the mask
predicate makes evicted entries unreachable, decoding from the
compressed cache matches full-sequence recomputation.

Keys are stored post-rotation together with their original position
indices, so retained entries keep their absolute positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mask import build_mask
from .model import (
    ModelParams,
    _layer_names,
    _silu,
    forward,
    rmsnorm,
    rope_apply,
    rope_tables,
)
from .segment import REGULAR, AnnotatedSequence, annotate_causal, segment
from .vocab import Vocab


class DecodeError(RuntimeError):
    pass


@dataclass
class CompressionCounters:
    retained_entries: int = 0
    live_entries: int = 0
    peak_entries: int = 0
    evicted_entries: int = 0
    total_positions: int = 0

    @property
    def cache_ratio(self) -> float:
        return self.total_positions / self.peak_entries if self.peak_entries else 1.0

    def as_dict(self) -> dict:
        return {
            "retained_entries": self.retained_entries,
            "live_entries": self.live_entries,
            "peak_entries": self.peak_entries,
            "evicted_entries": self.evicted_entries,
            "total_positions": self.total_positions,
            "cache_ratio": self.cache_ratio,
        }


def _empty_kv(n_heads: int, head_dim: int, dtype):
    return np.zeros((n_heads, 0, head_dim), dtype=dtype)


@dataclass
class _LayerKV:
    k_ret: np.ndarray
    v_ret: np.ndarray
    k_cur: np.ndarray
    v_cur: np.ndarray


class GistKvCache:
    """Per-layer key/value storage split into a retained gist region and
    an evictable current-sentence region."""

    def __init__(self, params: ModelParams):
        cfg = params.config
        dtype = params.dtype
        self.layers = [
            _LayerKV(
                k_ret=_empty_kv(cfg.n_heads, cfg.head_dim, dtype),
                v_ret=_empty_kv(cfg.n_heads, cfg.head_dim, dtype),
                k_cur=_empty_kv(cfg.n_heads, cfg.head_dim, dtype),
                v_cur=_empty_kv(cfg.n_heads, cfg.head_dim, dtype),
            )
            for _ in range(cfg.n_layers)
        ]
        self.pos_ret: np.ndarray = np.zeros(0, dtype=np.int64)
        self.pos_cur: np.ndarray = np.zeros(0, dtype=np.int64)
        self.counters = CompressionCounters()

    @property
    def retained_entries(self) -> int:
        return len(self.pos_ret)

    @property
    def live_entries(self) -> int:
        return len(self.pos_ret) + len(self.pos_cur)

    def append(self, per_layer_kv, position: int, retained: bool) -> None:
        """Add one position's (k, v) per layer to a region; k is (H, dh)."""
        for layer, (k, v) in zip(self.layers, per_layer_kv):
            if retained:
                layer.k_ret = np.concatenate([layer.k_ret, k[:, None, :]], axis=1)
                layer.v_ret = np.concatenate([layer.v_ret, v[:, None, :]], axis=1)
            else:
                layer.k_cur = np.concatenate([layer.k_cur, k[:, None, :]], axis=1)
                layer.v_cur = np.concatenate([layer.v_cur, v[:, None, :]], axis=1)
        if retained:
            self.pos_ret = np.append(self.pos_ret, position)
        else:
            self.pos_cur = np.append(self.pos_cur, position)
        c = self.counters
        c.total_positions += 1
        if retained:
            c.retained_entries += 1
        c.live_entries = self.live_entries
        c.peak_entries = max(c.peak_entries, c.live_entries)

    def evict_current(self) -> int:
        """Drop the closed sentence's regular entries; returns the count."""
        dropped = len(self.pos_cur)
        for layer in self.layers:
            h, _, dh = layer.k_cur.shape
            layer.k_cur = _empty_kv(h, dh, layer.k_cur.dtype)
            layer.v_cur = _empty_kv(h, dh, layer.v_cur.dtype)
        self.pos_cur = np.zeros(0, dtype=np.int64)
        c = self.counters
        c.evicted_entries += dropped
        c.live_entries = self.live_entries
        return dropped


def prefill_counters(a: AnnotatedSequence) -> CompressionCounters:
    """Counter walk of the eviction discipline over a prompt, as if it
    had been processed incrementally."""
    c = CompressionCounters()
    cur = 0
    for role in a.roles.tolist():
        c.total_positions += 1
        if role == REGULAR:
            cur += 1
        else:
            c.retained_entries += 1
        c.live_entries = c.retained_entries + cur
        c.peak_entries = max(c.peak_entries, c.live_entries)
        if a.n_g > 0 and role == a.n_g:
            c.evicted_entries += cur
            cur = 0
    c.live_entries = c.retained_entries + cur
    return c


def prefill(params: ModelParams, a: AnnotatedSequence) -> tuple[GistKvCache, np.ndarray]:
    """Single masked forward over the prompt; the returned cache holds
    all gist entries plus the open-tail entries only."""
    if len(a) == 0:
        raise DecodeError("cannot prefill an empty sequence")
    m = build_mask(a)
    out = forward(params, a, m, want_kv=True)
    cache = GistKvCache(params)
    gist_mask = a.roles > REGULAR
    if a.open_tail:
        cur_mask = (a.sent_idx == a.sent_idx[-1]) & ~gist_mask
    else:
        cur_mask = np.zeros(len(a), dtype=bool)
    assert out.kv is not None
    for layer, (k, v) in zip(cache.layers, out.kv):
        layer.k_ret = k[:, gist_mask, :].copy()
        layer.v_ret = v[:, gist_mask, :].copy()
        layer.k_cur = k[:, cur_mask, :].copy()
        layer.v_cur = v[:, cur_mask, :].copy()
    positions = np.arange(len(a), dtype=np.int64)
    cache.pos_ret = positions[gist_mask].copy()
    cache.pos_cur = positions[cur_mask].copy()
    cache.counters = prefill_counters(a)
    return cache, out.logits[-1].copy()


@dataclass
class DecodeSession:
    params: ModelParams
    vocab: Vocab
    n_g: int
    cache: GistKvCache
    last_logits: np.ndarray
    next_pos: int
    sentence: int
    greedy: bool = True
    temperature: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    emitted: list[int] = field(default_factory=list)
    forced: list[int] = field(default_factory=list)


def start_session(
    params: ModelParams,
    vocab: Vocab,
    prompt_ids,
    *,
    add_bos: bool = False,
    greedy: bool = True,
    temperature: float = 1.0,
    seed: int = 0,
) -> DecodeSession:
    n_g = params.config.n_g
    raw = ([vocab.bos_id] if add_bos else []) + list(prompt_ids)
    if not raw:
        raise DecodeError("empty prompt; enable add_bos or provide text")
    a = segment(raw, vocab, n_g) if n_g >= 1 else annotate_causal(raw)
    cache, logits = prefill(params, a)
    sentence = int(a.sent_idx[-1]) + (0 if a.open_tail else 1)
    return DecodeSession(
        params=params,
        vocab=vocab,
        n_g=n_g,
        cache=cache,
        last_logits=logits,
        next_pos=len(a),
        sentence=sentence,
        greedy=greedy,
        temperature=temperature,
        rng=np.random.default_rng(seed),
    )


def _feed(s: DecodeSession, token_id: int, retained: bool) -> np.ndarray:
    """Run one position through the model against the live cache."""
    cfg = s.params.config
    t = s.params.tensors
    dtype = s.params.dtype
    pos = s.next_pos
    if pos >= cfg.max_seq_len:
        raise DecodeError(f"length overflow at position {pos}")
    x = t["embed"][token_id].copy()
    if cfg.pos_encoding == "learned":
        x = x + t["pos_embed"][pos]
        cos = sin = None
    else:
        cos, sin = rope_tables(np.array([pos]), cfg.head_dim, cfg.rope_base, dtype)
    scale = dtype.type(1.0 / np.sqrt(cfg.head_dim))

    new_kv = []
    for i, layer in enumerate(s.cache.layers):
        n = _layer_names(i)
        xn, _ = rmsnorm(x, t[n["g1"]], cfg.norm_eps)
        q = (xn @ t[n["wq"]]).reshape(cfg.n_heads, cfg.head_dim)
        k = (xn @ t[n["wk"]]).reshape(cfg.n_heads, cfg.head_dim)
        v = (xn @ t[n["wv"]]).reshape(cfg.n_heads, cfg.head_dim)
        if cfg.pos_encoding == "rotary":
            q = rope_apply(q, cos[0], sin[0])
            k = rope_apply(k, cos[0], sin[0])
        new_kv.append((k, v))
        k_all = np.concatenate([layer.k_ret, layer.k_cur, k[:, None, :]], axis=1)
        v_all = np.concatenate([layer.v_ret, layer.v_cur, v[:, None, :]], axis=1)
        scores = np.einsum("hd,hnd->hn", q, k_all) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hn,hnd->hd", p, v_all).reshape(cfg.d_model)
        x = x + ctx @ t[n["wo"]]
        yn, _ = rmsnorm(x, t[n["g2"]], cfg.norm_eps)
        x = x + _silu(yn @ t[n["w_in"]]) @ t[n["w_out"]]

    s.cache.append(new_kv, pos, retained)
    s.next_pos = pos + 1
    xf, _ = rmsnorm(x, t["final_norm"], cfg.norm_eps)
    head = t["embed"] if cfg.tied_lm_head else t["lm_head"]
    return xf @ head.T


def _sample(s: DecodeSession, logits: np.ndarray) -> int:
    z = logits.astype(np.float64).copy()
    if s.n_g > 0:
        z[s.vocab.gist_first: s.vocab.gist_first + s.vocab.n_g] = -np.inf
    if s.greedy:
        return int(np.argmax(z))
    z /= max(s.temperature, 1e-8)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(s.rng.choice(len(p), p=p))


def decode_step(s: DecodeSession) -> int:
    """Emit one token. Sampled punctuation force-feeds the gist run
    (atomically) and evicts the closed sentence's regular entries; gist
    ids themselves are never sampled."""
    token = _sample(s, s.last_logits)
    s.emitted.append(token)
    logits = _feed(s, token, retained=False)
    if s.n_g > 0 and token in s.vocab.punct_ids:
        for k in range(s.n_g):
            gid = s.vocab.gist_ids[k]
            logits = _feed(s, gid, retained=True)
            s.forced.append(gid)
        s.cache.evict_current()
        s.sentence += 1
    s.last_logits = logits
    return token


def generate_tokens(s: DecodeSession, max_new_tokens: int) -> list[int]:
    return [decode_step(s) for _ in range(max_new_tokens)]


def cache_report(s: DecodeSession) -> dict:
    return s.cache.counters.as_dict()
