"""Three-stage training protocol: gist warm-up, full fine-tune, cold down.

Stage 1 freezes every base parameter and trains only the gist rows of
the (tied) embedding matrix; stages 2 and 3 train everything. Freezing
is implemented by restricting the optimizer and the gradient-norm
computation to the trainable set, so frozen tensors are bitwise
untouched. Each stage owns a fresh AdamW state and a data order fully
determined by (seed, stage index, step), which makes stage boundaries
byte-exact resume points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .mask import build_mask
from .model import ModelError, ModelParams, extend_params, grad
from .segment import AnnotatedSequence, annotate_causal, segment, slice_sentences, truncate_annotated
from .shards import read_shard
from .vocab import Corpus, Vocab

STAGE_NAMES = ("warmup_gist", "finetune", "cold_down")
METRICS_HEADER = "step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen"


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    name: str
    token_budget: int
    batch_size: int
    max_seq_len: int
    max_lr: float
    min_lr: float
    warmup_steps: int
    schedule: str = "cosine"          # cosine | linear
    max_grad_norm: float = 1.0
    freeze: str = "none"              # none | all_but_gist_rows
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    loss_mode: str = "all"

    def __post_init__(self) -> None:
        if self.name not in STAGE_NAMES:
            raise TrainError(f"unknown stage name {self.name!r}")
        if not (self.max_lr >= self.min_lr >= 0.0):
            raise TrainError("require max_lr >= min_lr >= 0")
        if self.schedule not in ("cosine", "linear"):
            raise TrainError(f"unknown schedule {self.schedule!r}")
        if self.freeze not in ("none", "all_but_gist_rows"):
            raise TrainError(f"unknown freeze set {self.freeze!r}")
        if self.freeze == "all_but_gist_rows" and self.name != "warmup_gist":
            raise TrainError("gist-only freezing is a stage-1 setting")
        if self.token_budget < 0 or self.batch_size < 1 or self.max_seq_len < 2:
            raise TrainError("invalid budget/batch/seq-len")

    def num_steps(self) -> int:
        return math.ceil(self.token_budget / (self.batch_size * self.max_seq_len))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "token_budget": self.token_budget,
            "batch_size": self.batch_size,
            "max_seq_len": self.max_seq_len,
            "max_lr": self.max_lr,
            "min_lr": self.min_lr,
            "warmup_steps": self.warmup_steps,
            "schedule": self.schedule,
            "max_grad_norm": self.max_grad_norm,
            "freeze": self.freeze,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "loss_mode": self.loss_mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StageConfig":
        return cls(**obj)


def lr_at(cfg: StageConfig, step: int) -> float:
    """Linear warmup to max_lr, then cosine or linear decay to min_lr at
    the stage's final step."""
    if step < 0:
        raise TrainError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    last = cfg.num_steps() - 1
    span = max(last - cfg.warmup_steps, 1)
    frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    if cfg.schedule == "cosine":
        return cfg.min_lr + 0.5 * (1.0 + math.cos(math.pi * frac)) * (cfg.max_lr - cfg.min_lr)
    return cfg.max_lr - (cfg.max_lr - cfg.min_lr) * frac


@dataclass
class TrainState:
    params: ModelParams
    seed: int
    vocab_hash: str
    step: int = 0
    tokens_seen: int = 0
    metrics: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class TrainData:
    """Annotated documents plus the provenance needed for hash checks."""

    docs: tuple[AnnotatedSequence, ...]
    n_g: int
    vocab_hash: str


def annotate_corpus(corpus: Corpus, vocab: Vocab, n_g: int) -> TrainData:
    """Segment (n_g >= 1) or causally wrap (n_g == 0) every document."""
    if n_g == 0:
        docs = tuple(annotate_causal(d) for d in corpus.documents)
    else:
        docs = tuple(segment(d, vocab, n_g) for d in corpus.documents)
    return TrainData(docs=docs, n_g=n_g, vocab_hash=vocab.content_hash())


def load_train_data(shard_path: str | Path) -> TrainData:
    header, docs = read_shard(shard_path)
    return TrainData(docs=tuple(docs), n_g=header["n_g"], vocab_hash=header["vocab_hash"])


class _AdamW:
    """AdamW over the trainable set; ``gist_rows`` restricts training to
    that row range of the embedding matrix (stage-1 freeze)."""

    def __init__(self, params: ModelParams, cfg: StageConfig, gist_rows: range | None):
        self.cfg = cfg
        self.t = 0
        self.gist_rows = gist_rows
        if gist_rows is None:
            shapes = {k: v for k, v in params.tensors.items()}
        else:
            shapes = {"embed": params.tensors["embed"][gist_rows.start: gist_rows.stop]}
        self.m = {k: np.zeros_like(v) for k, v in shapes.items()}
        self.v = {k: np.zeros_like(v) for k, v in shapes.items()}

    def _trainable_view(self, tensors: dict, name: str) -> np.ndarray:
        if self.gist_rows is None:
            return tensors[name]
        return tensors[name][self.gist_rows.start: self.gist_rows.stop]

    def clip(self, grads: dict) -> float:
        """Scale trainable grads to the max norm; return the post-clip norm."""
        sq = 0.0
        for name in self.m:
            g = self._trainable_view(grads, name)
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        limit = self.cfg.max_grad_norm
        if norm > limit:
            scale = limit / norm
            for name in self.m:
                if self.gist_rows is None:
                    grads[name] *= scale
                else:
                    grads[name][self.gist_rows.start: self.gist_rows.stop] *= scale
            sq = 0.0
            for name in self.m:
                g = self._trainable_view(grads, name)
                sq += float((g.astype(np.float64) ** 2).sum())
            norm = math.sqrt(sq)
        return norm

    def step(self, params: ModelParams, grads: dict, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name in self.m:
            g = self._trainable_view(grads, name)
            p = self._trainable_view(params.tensors, name)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            p -= (lr * (update + cfg.weight_decay * p)).astype(p.dtype)


def _sample_batch(docs, cfg: StageConfig, rng: np.random.Generator):
    batch = []
    n_docs = len(docs)
    for _ in range(cfg.batch_size):
        doc = docs[int(rng.integers(0, n_docs))]
        if len(doc) > cfg.max_seq_len:
            start = int(rng.integers(0, max(doc.n_sentences, 1)))
            a = truncate_annotated(slice_sentences(doc, start), cfg.max_seq_len)
            if len(a) < 2:
                a = truncate_annotated(doc, cfg.max_seq_len)
        else:
            a = doc
        batch.append((a, build_mask(a)))
    return batch


def run_stage(
    state: TrainState,
    cfg: StageConfig,
    data: TrainData,
    *,
    stage_index: int = 1,
    snapshot_dir: str | Path | None = None,
    quiet: bool = True,
) -> list[dict]:
    """Run one stage in place on ``state``; returns its metric rows."""
    if data.vocab_hash != state.vocab_hash:
        raise TrainError("vocab hash mismatch between shards and model")
    if data.n_g != state.params.config.n_g:
        raise TrainError(
            f"shards carry n_g={data.n_g}, model expects {state.params.config.n_g}"
        )
    gist_rows = state.params.gist_rows if cfg.freeze == "all_but_gist_rows" else None
    if gist_rows is not None and len(gist_rows) == 0:
        raise TrainError("gist-only stage on a model without gist rows")
    docs = [d for d in data.docs if len(d) >= 2]
    if not docs and cfg.num_steps() > 0:
        raise TrainError("no trainable documents (all shorter than 2 tokens)")
    opt = _AdamW(state.params, cfg, gist_rows)
    rng = np.random.default_rng([state.seed, stage_index])
    rows: list[dict] = []
    for step in range(cfg.num_steps()):
        lr = lr_at(cfg, step)
        batch = _sample_batch(docs, cfg, rng)
        try:
            grads, stats = grad(state.params, batch, cfg.loss_mode)
        except ModelError as e:
            if snapshot_dir is not None:
                save_checkpoint(
                    Path(snapshot_dir) / "aborted",
                    state.params,
                    extra={"aborted_at_step": state.step, "reason": str(e)},
                )
            raise TrainError(f"stage {cfg.name} aborted: {e}") from e
        gnorm = opt.clip(grads)
        opt.step(state.params, grads, lr)
        state.tokens_seen += stats["tokens"]
        row = {
            "step": state.step,
            "stage": cfg.name,
            "lr": lr,
            "loss_all": stats["loss_all"],
            "loss_regular": stats["loss_regular"],
            "grad_norm": gnorm,
            "tokens_seen": state.tokens_seen,
        }
        rows.append(row)
        state.metrics.append(row)
        state.step += 1
        if not quiet:
            print(
                f"[{cfg.name}] step {row['step']} lr {lr:.3g} "
                f"loss {stats['loss_all']:.4f} gnorm {gnorm:.3f}"
            )
    return rows


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r['step']},{r['stage']},{r['lr']!r},{r['loss_all']!r},"
            f"{r['loss_regular']!r},{r['grad_norm']!r},{r['tokens_seen']}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def pipeline_run_hash(base_config: dict, stages: Sequence[StageConfig], seed: int,
                      n_g: int, vocab_hash: str, extend_eps: float) -> str:
    return config_hash(
        {
            "model": base_config,
            "stages": [s.to_json() for s in stages],
            "seed": seed,
            "n_g": n_g,
            "vocab_hash": vocab_hash,
            "extend_eps": extend_eps,
        }
    )


def run_pipeline(
    base: ModelParams,
    stages: Sequence[StageConfig],
    data: TrainData,
    out_dir: str | Path,
    *,
    seed: int,
    vocab: Vocab,
    extend_eps: float = 1e-5,
    quiet: bool = True,
) -> tuple[ModelParams, Path]:
    """Run the stage sequence, persisting a checkpoint at each boundary.

    Boundary checkpoints embed the run hash; rerunning with the same
    config and seed resumes from the last completed stage and reproduces
    the uninterrupted run byte-for-byte. A differing run hash on an
    existing boundary is an error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_g = data.n_g
    run_hash = pipeline_run_hash(base.config.to_json(), stages, seed, n_g,
                                 data.vocab_hash, extend_eps)
    run_manifest = {
        "schema": "gistlm-run-v1",
        "run_hash": run_hash,
        "model": base.config.to_json(),
        "stages": [s.to_json() for s in stages],
        "seed": seed,
        "n_g": n_g,
        "vocab_hash": data.vocab_hash,
        "extend_eps": extend_eps,
    }
    run_path = out_dir / "run.json"
    if run_path.exists():
        previous = json.loads(run_path.read_text(encoding="utf-8"))
        if previous.get("run_hash") != run_hash:
            raise TrainError(f"resume config hash mismatch at {run_path}")
    run_path.write_text(
        json.dumps(run_manifest, indent=1, sort_keys=True), encoding="utf-8"
    )

    if n_g > 0 and base.config.n_g == 0:
        params = extend_params(base, n_g, eps=extend_eps, seed=seed)
    elif base.config.n_g == n_g:
        params = base.copy()
    else:
        raise TrainError(
            f"base checkpoint has n_g={base.config.n_g}, data needs n_g={n_g}"
        )

    vocab.save(out_dir / "vocab.json")
    state = TrainState(params=params, seed=seed, vocab_hash=data.vocab_hash)
    for i, scfg in enumerate(stages, start=1):
        ck = out_dir / f"stage{i}"
        metrics_path = out_dir / f"metrics_stage{i}.csv"
        if (ck / "manifest.json").exists():
            loaded, manifest = load_checkpoint(ck)
            extra = manifest.get("extra", {})
            if extra.get("run_hash") != run_hash:
                raise TrainError(f"resume config hash mismatch at {ck}")
            state.params = loaded
            state.step = extra["step"]
            state.tokens_seen = extra["tokens_seen"]
            if not quiet:
                print(f"resumed stage {i} from {ck}")
            continue
        rows = run_stage(state, scfg, data, stage_index=i, snapshot_dir=out_dir, quiet=quiet)
        write_metrics_csv(metrics_path, rows)
        save_checkpoint(
            ck,
            state.params,
            extra={
                "run_hash": run_hash,
                "stage": scfg.name,
                "step": state.step,
                "tokens_seen": state.tokens_seen,
                "vocab_hash": data.vocab_hash,
            },
            seed_lineage=[seed, i],
        )
        vocab.save(ck / "vocab.json")

    merged = [METRICS_HEADER]
    for i in range(1, len(stages) + 1):
        p = out_dir / f"metrics_stage{i}.csv"
        if p.exists():
            merged.extend(p.read_text(encoding="utf-8").strip().splitlines()[1:])
    (out_dir / "metrics.csv").write_text("\n".join(merged) + "\n", encoding="utf-8")

    final = out_dir / "final"
    save_checkpoint(
        final,
        state.params,
        extra={
            "run_hash": run_hash,
            "stage": "final",
            "step": state.step,
            "tokens_seen": state.tokens_seen,
            "vocab_hash": data.vocab_hash,
        },
        seed_lineage=[seed],
    )
    vocab.save(final / "vocab.json")
    return state.params, final
