"""Minimal decoder-only transformer with arbitrary attention masks.

Pre-norm blocks (RMSNorm), rotary or learned positions, SiLU MLP, and a
tied (default) or untied LM head. Parameters live in a flat name ->
array mapping so the optimizer, checkpointing, and finite-difference
oracles can walk every coordinate. Forward and backward are plain numpy;
all computation follows the parameter dtype (float32 for training,
float64 inside numerical checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .mask import SentenceMask
from .segment import REGULAR, AnnotatedSequence

LOSS_MODES = ("all", "regular_only", "final_gist")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    vocab_size: int
    n_g: int
    max_seq_len: int
    pos_encoding: str = "rotary"  # rotary | learned
    tied_lm_head: bool = True
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.pos_encoding == "rotary" and self.head_dim % 2:
            raise ModelError("rotary positions need an even head dim")
        if self.pos_encoding not in ("rotary", "learned"):
            raise ModelError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.n_g < 0 or self.vocab_size <= self.n_g:
            raise ModelError("vocab must include the gist ids")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "n_g": self.n_g,
            "max_seq_len": self.max_seq_len,
            "pos_encoding": self.pos_encoding,
            "tied_lm_head": self.tied_lm_head,
            "norm_eps": self.norm_eps,
            "rope_base": self.rope_base,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def gist_rows(self) -> range:
        cfg = self.config
        return range(cfg.vocab_size - cfg.n_g, cfg.vocab_size)

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["embed"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


@dataclass
class ForwardOutput:
    logits: np.ndarray                                 # (L, V)
    losses: np.ndarray | None = None                   # optional (L-1,)
    kv: list[tuple[np.ndarray, np.ndarray]] | None = None  # per layer (H, L, dh)


def _layer_names(i: int) -> dict[str, str]:
    p = f"layers.{i}."
    return {
        "g1": p + "attn_norm",
        "wq": p + "wq",
        "wk": p + "wk",
        "wv": p + "wv",
        "wo": p + "wo",
        "g2": p + "mlp_norm",
        "w_in": p + "w_in",
        "w_out": p + "w_out",
    }


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    std = 0.02
    out_std = std / math.sqrt(2 * cfg.n_layers)
    t: dict[str, np.ndarray] = {}
    t["embed"] = rng.normal(0.0, std, (cfg.vocab_size, cfg.d_model))
    if cfg.pos_encoding == "learned":
        t["pos_embed"] = rng.normal(0.0, std, (cfg.max_seq_len, cfg.d_model))
    for i in range(cfg.n_layers):
        n = _layer_names(i)
        t[n["g1"]] = np.ones(cfg.d_model)
        t[n["wq"]] = rng.normal(0.0, std, (cfg.d_model, cfg.d_model))
        t[n["wk"]] = rng.normal(0.0, std, (cfg.d_model, cfg.d_model))
        t[n["wv"]] = rng.normal(0.0, std, (cfg.d_model, cfg.d_model))
        t[n["wo"]] = rng.normal(0.0, out_std, (cfg.d_model, cfg.d_model))
        t[n["g2"]] = np.ones(cfg.d_model)
        t[n["w_in"]] = rng.normal(0.0, std, (cfg.d_model, cfg.d_ff))
        t[n["w_out"]] = rng.normal(0.0, out_std, (cfg.d_ff, cfg.d_model))
    t["final_norm"] = np.ones(cfg.d_model)
    if not cfg.tied_lm_head:
        t["lm_head"] = rng.normal(0.0, std, (cfg.vocab_size, cfg.d_model))
    return ModelParams(cfg, {k: v.astype(dtype) for k, v in t.items()})


# -- vocabulary extension ----------------------------------------------------

def extend_vocab_mean_resize(e_base: np.ndarray, n_g: int, eps: float, seed) -> np.ndarray:
    """Append n_g rows sampled from a normal fit to the existing rows.

    The new rows are drawn i.i.d. from N(mu, Sigma + eps*I) where mu and
    Sigma are the empirical mean and covariance of ``e_base``; the base
    rows are preserved bit-for-bit.
    """
    e_base = np.asarray(e_base)
    if e_base.ndim != 2 or e_base.shape[0] < 2:
        raise ModelError("need a (V0, d) matrix with V0 >= 2")
    if eps < 0:
        raise ModelError("eps must be >= 0")
    if n_g == 0:
        return e_base.copy()
    d = e_base.shape[1]
    x = e_base.astype(np.float64)
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    try:
        chol = np.linalg.cholesky(cov + eps * np.eye(d))
    except np.linalg.LinAlgError:
        raise ModelError("covariance not PD; set eps>0") from None
    rng = np.random.default_rng(seed)
    rows = mu + rng.standard_normal((n_g, d)) @ chol.T
    return np.concatenate([e_base, rows.astype(e_base.dtype)], axis=0)


def extend_params(params: ModelParams, n_g: int, eps: float = 1e-5, seed: int = 0) -> ModelParams:
    """Grow the vocabulary by n_g gist rows via mean-resizing.

    With a tied head the shared matrix is resized once; an untied head is
    resized with its own independent draws.
    """
    cfg = params.config
    if cfg.n_g != 0:
        raise ModelError("params already carry gist rows")
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    tensors["embed"] = extend_vocab_mean_resize(tensors["embed"], n_g, eps, seed)
    if not cfg.tied_lm_head:
        tensors["lm_head"] = extend_vocab_mean_resize(tensors["lm_head"], n_g, eps, seed + 1)
    new_cfg = replace(cfg, vocab_size=cfg.vocab_size + n_g, n_g=n_g)
    return ModelParams(new_cfg, tensors)


# -- numeric helpers ---------------------------------------------------------

def rmsnorm(x: np.ndarray, g: np.ndarray, eps: float):
    rstd = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * rstd * g, rstd


def _rmsnorm_bwd(dy, x, rstd, g):
    d = x.shape[-1]
    dg = (dy * x * rstd).sum(axis=tuple(range(x.ndim - 1)))
    dxhat = dy * g
    dot = (dxhat * x).sum(axis=-1, keepdims=True)
    dx = rstd * dxhat - (rstd ** 3 / d) * x * dot
    return dx, dg


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _silu_bwd(dy, x):
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    half = head_dim // 2
    inv = base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate (..., L, dh) by per-position angles; cos/sin are (L, dh/2)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_apply_inv(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos + x2 * sin, -x1 * sin + x2 * cos], axis=-1)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


# -- forward / backward ------------------------------------------------------

def _forward_full(
    params: ModelParams,
    ids: np.ndarray,        # (B, L) int
    allowed: np.ndarray,    # (B, L, L) bool
    positions: np.ndarray,  # (L,)
    *,
    want_cache: bool = False,
    want_kv: bool = False,
    kv_override: dict | None = None,
):
    cfg = params.config
    t = params.tensors
    dtype = t["embed"].dtype
    b, l = ids.shape
    scale = dtype.type(1.0 / math.sqrt(cfg.head_dim))
    neg_inf = dtype.type(-np.inf)

    x = t["embed"][ids]
    if cfg.pos_encoding == "learned":
        x = x + t["pos_embed"][positions][None, :, :]
        cos = sin = None
    else:
        cos, sin = rope_tables(positions, cfg.head_dim, cfg.rope_base, dtype)
    mask4 = allowed[:, None, :, :]

    layer_caches: list[dict] = []
    kv_out: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(cfg.n_layers):
        n = _layer_names(i)
        xn, rstd1 = rmsnorm(x, t[n["g1"]], cfg.norm_eps)
        qh = _split_heads(xn @ t[n["wq"]], cfg.n_heads)
        kh = _split_heads(xn @ t[n["wk"]], cfg.n_heads)
        vh = _split_heads(xn @ t[n["wv"]], cfg.n_heads)
        if cfg.pos_encoding == "rotary":
            qh = rope_apply(qh, cos, sin)
            kh = rope_apply(kh, cos, sin)
        if kv_override and i in kv_override:
            idx, k_fix, v_fix = kv_override[i]
            if k_fix is not None:
                kh[:, :, idx, :] = k_fix
            if v_fix is not None:
                vh[:, :, idx, :] = v_fix
        if want_kv:
            kv_out.append((kh.copy(), vh.copy()))
        scores = np.where(mask4, (qh @ kh.transpose(0, 1, 3, 2)) * scale, neg_inf)
        p = _softmax_rows(scores)
        ctx = _merge_heads(p @ vh)
        x2 = x + ctx @ t[n["wo"]]
        yn, rstd2 = rmsnorm(x2, t[n["g2"]], cfg.norm_eps)
        h = yn @ t[n["w_in"]]
        hs = _silu(h)
        x3 = x2 + hs @ t[n["w_out"]]
        if want_cache:
            layer_caches.append(
                dict(x=x, xn=xn, rstd1=rstd1, qh=qh, kh=kh, vh=vh, p=p,
                     cm=ctx, x2=x2, yn=yn, rstd2=rstd2, h=h, hs=hs)
            )
        x = x3

    xf, rstdf = rmsnorm(x, t["final_norm"], cfg.norm_eps)
    head = t["embed"] if cfg.tied_lm_head else t["lm_head"]
    logits = xf @ head.T

    cache = None
    if want_cache:
        cache = dict(ids=ids, positions=positions, cos=cos, sin=sin, scale=scale,
                     layers=layer_caches, x_last=x, xf=xf, rstdf=rstdf)
    return logits, cache, (kv_out if want_kv else None)


def _backward_full(params: ModelParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    t = params.tensors
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    ids = cache["ids"]
    cos, sin, scale = cache["cos"], cache["sin"], cache["scale"]
    b, l, _ = dlogits.shape

    head_name = "embed" if cfg.tied_lm_head else "lm_head"
    xf = cache["xf"]
    grads[head_name] += dlogits.reshape(b * l, -1).T @ xf.reshape(b * l, -1)
    dxf = dlogits @ t[head_name]
    dx, dgf = _rmsnorm_bwd(dxf, cache["x_last"], cache["rstdf"], t["final_norm"])
    grads["final_norm"] += dgf

    for i in reversed(range(cfg.n_layers)):
        n = _layer_names(i)
        c = cache["layers"][i]
        # mlp block: x3 = x2 + silu(yn @ w_in) @ w_out
        dx2 = dx
        grads[n["w_out"]] += c["hs"].reshape(b * l, -1).T @ dx.reshape(b * l, -1)
        dhs = dx @ t[n["w_out"]].T
        dh = _silu_bwd(dhs, c["h"])
        grads[n["w_in"]] += c["yn"].reshape(b * l, -1).T @ dh.reshape(b * l, -1)
        dyn = dh @ t[n["w_in"]].T
        dx2_norm, dg2 = _rmsnorm_bwd(dyn, c["x2"], c["rstd2"], t[n["g2"]])
        grads[n["g2"]] += dg2
        dx2 = dx2 + dx2_norm
        # attention block: x2 = x + merge(p @ vh) @ wo
        dx_in = dx2
        grads[n["wo"]] += c["cm"].reshape(b * l, -1).T @ dx2.reshape(b * l, -1)
        dcm = dx2 @ t[n["wo"]].T
        dctx = _split_heads(dcm, cfg.n_heads)
        dp = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["p"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["p"] * (dp - (dp * c["p"]).sum(axis=-1, keepdims=True))
        dscores *= scale
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        if cfg.pos_encoding == "rotary":
            dqh = _rope_apply_inv(dqh, cos, sin)
            dkh = _rope_apply_inv(dkh, cos, sin)
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        xn2 = c["xn"].reshape(b * l, -1)
        grads[n["wq"]] += xn2.T @ dq.reshape(b * l, -1)
        grads[n["wk"]] += xn2.T @ dk.reshape(b * l, -1)
        grads[n["wv"]] += xn2.T @ dv.reshape(b * l, -1)
        dxn = dq @ t[n["wq"]].T + dk @ t[n["wk"]].T + dv @ t[n["wv"]].T
        dx_norm, dg1 = _rmsnorm_bwd(dxn, c["x"], c["rstd1"], t[n["g1"]])
        grads[n["g1"]] += dg1
        dx = dx_in + dx_norm

    if cfg.pos_encoding == "learned":
        np.add.at(grads["pos_embed"], cache["positions"], dx.sum(axis=0))
    np.add.at(grads["embed"], ids, dx)
    return grads


# -- public operations -------------------------------------------------------

def forward(
    params: ModelParams,
    a: AnnotatedSequence,
    m: SentenceMask,
    *,
    want_kv: bool = False,
    kv_override: dict | None = None,
) -> ForwardOutput:
    """Masked forward pass over one annotated sequence.

    ``kv_override`` maps layer index -> (positions, K, V) with K/V of
    shape (n_heads, len(positions), head_dim); the given per-layer keys
    and values replace the computed ones before attention (keys are
    post-rotation). Used by cache equivalence and bottleneck probes.
    """
    cfg = params.config
    l = len(a)
    if l == 0:
        raise ModelError("empty sequence")
    if l > cfg.max_seq_len:
        raise ModelError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
    if m.n != l:
        raise ModelError("mask size does not match sequence")
    logits, _, kv = _forward_full(
        params,
        a.ids[None, :].astype(np.int64),
        m.allowed[None, :, :],
        np.arange(l),
        want_kv=want_kv,
        kv_override=kv_override,
    )
    kv_sq = [(k[0], v[0]) for k, v in kv] if kv is not None else None
    return ForwardOutput(logits=logits[0], kv=kv_sq)


def _mode_condition(roles: np.ndarray, n_g: int, mode: str) -> np.ndarray:
    if mode == "all":
        return np.ones_like(roles, dtype=bool)
    if mode == "regular_only":
        return roles == REGULAR
    if mode == "final_gist":
        return (roles == REGULAR) | ((roles == n_g) & (n_g > 0))
    raise ModelError(f"unknown loss mode {mode!r}")


def _positionwise_losses(logits: np.ndarray, ids: np.ndarray):
    """(B, L-1) next-token cross-entropy and the softmax probabilities."""
    z = logits[:, :-1, :]
    targets = ids[:, 1:]
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    zsum = e.sum(axis=-1, keepdims=True)
    logz = (m + np.log(zsum))[..., 0]
    tgt_logit = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    return logz - tgt_logit, e / zsum


def lm_loss(out: ForwardOutput, a: AnnotatedSequence, mode: str = "all"):
    """Next-token cross entropy over the processed sequence.

    Position ``t`` contributes when the mode admits its role; the target
    is always the next processed token. Returns (scalar, per-position
    losses of length L-1).
    """
    l = len(a)
    if l < 2:
        raise ModelError("nothing to predict")
    losses, _ = _positionwise_losses(out.logits[None], a.ids[None].astype(np.int64))
    losses = losses[0]
    w = _mode_condition(a.roles[:-1], a.n_g, mode)
    if not w.any():
        raise ModelError(f"no contributing positions for mode {mode!r}")
    return float(losses[w].astype(np.float64).mean()), losses


def grad(
    params: ModelParams,
    batch: Sequence[tuple[AnnotatedSequence, SentenceMask]],
    mode: str = "all",
):
    """Exact gradients of the mean lm_loss over a batch.

    Sequences are right-padded; padded positions attend to themselves
    only and carry zero loss weight, so their gradient contribution is
    exactly zero and the padding id is immaterial.
    """
    if not batch:
        raise ModelError("empty batch")
    n_gs = {a.n_g for a, _ in batch}
    if len(n_gs) != 1:
        raise ModelError("batch mixes n_g values")
    n_g = n_gs.pop()
    cfg = params.config
    lens = np.array([len(a) for a, _ in batch])
    if lens.min() < 2:
        raise ModelError("nothing to predict")
    lmax = int(lens.max())
    if lmax > cfg.max_seq_len:
        raise ModelError(f"sequence length {lmax} exceeds max_seq_len {cfg.max_seq_len}")
    b = len(batch)
    ids = np.zeros((b, lmax), dtype=np.int64)
    roles = np.zeros((b, lmax), dtype=np.int16)
    allowed = np.zeros((b, lmax, lmax), dtype=bool)
    for j, (a, m) in enumerate(batch):
        lj = len(a)
        if m.n != lj:
            raise ModelError("mask size does not match sequence")
        ids[j, :lj] = a.ids
        roles[j, :lj] = a.roles
        allowed[j, :lj, :lj] = m.allowed
        if lj < lmax:
            pad = np.arange(lj, lmax)
            allowed[j, pad, pad] = True

    logits, cache, _ = _forward_full(params, ids, allowed, np.arange(lmax), want_cache=True)
    losses, probs = _positionwise_losses(logits, ids)

    tpos = np.arange(lmax - 1)[None, :]
    valid = tpos < (lens[:, None] - 1)
    for j in range(b):
        if not np.isfinite(losses[j][valid[j]]).all():
            raise ModelError(f"non-finite loss at batch index {j}")

    def mode_mean(name: str) -> float:
        w = valid & _mode_condition(roles[:, :-1], n_g, name)
        return float(losses[w].mean()) if w.any() else float("nan")

    w_train = (valid & _mode_condition(roles[:, :-1], n_g, mode)).astype(logits.dtype)
    total = w_train.sum()
    if total == 0:
        raise ModelError(f"no contributing positions for mode {mode!r}")

    stats = {
        "loss": float((losses * w_train).sum() / total),
        "loss_all": mode_mean("all"),
        "loss_regular": mode_mean("regular_only"),
        "loss_final_gist": mode_mean("final_gist"),
        "tokens": int(lens.sum()),
        "contributing": int(total),
    }

    wnorm = (w_train / total).astype(logits.dtype)
    dz = probs * wnorm[..., None]
    flat = dz.reshape(-1, dz.shape[-1])
    flat[np.arange(flat.shape[0]), ids[:, 1:].reshape(-1)] -= wnorm.reshape(-1)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = dz
    grads = _backward_full(params, cache, dlogits)
    return grads, stats
