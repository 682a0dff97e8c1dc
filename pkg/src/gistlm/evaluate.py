"""Measurement arithmetic: compression rates and multi-mode perplexity.

The compression rate of a processed sequence is the exact quotient
n_regular / n_gist; doubling the gist count per boundary halves it
exactly on fixed text, which is asserted with rational arithmetic.
Perplexity curves report exp(mean loss) over prefix windows for each
loss mode.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .decode import prefill_counters
from .mask import build_mask
from .model import LOSS_MODES, ModelParams, _mode_condition, forward, lm_loss
from .segment import AnnotatedSequence, annotate_causal, count_tokens, segment, truncate_annotated
from .vocab import Corpus, Vocab, load_corpus

REPORT_SCHEMA = "gistlm-report-v1"


class EvalError(ValueError):
    pass


def compression_rate(a: AnnotatedSequence) -> float:
    """Exact n_regular / n_gist of a processed sequence."""
    n_regular, n_gist = count_tokens(a)
    if n_gist == 0:
        raise EvalError("no gist tokens; rate undefined")
    return n_regular / n_gist


def halving_property_check(raw, vocab: Vocab, n_g_list: list[int]) -> list[dict]:
    """Rate table over n_g with the exact-halving verdict per doubling.

    Uses rational arithmetic: for fixed text the regular-token count and
    the number of gist runs are both independent of n_g, so
    R_c(2k) == R_c(k) / 2 identically.
    """
    counting_vocab = vocab.base().with_gists(max(n_g_list))
    rows: list[dict] = []
    exact: dict[int, Fraction] = {}
    for n_g in n_g_list:
        a = segment(raw, counting_vocab, n_g)
        n_regular, n_gist = count_tokens(a)
        if n_gist == 0:
            raise EvalError("no gist tokens; rate undefined")
        r = Fraction(n_regular, n_gist)
        exact[n_g] = r
        halved = None
        if n_g % 2 == 0 and n_g // 2 in exact:
            halved = exact[n_g] == exact[n_g // 2] / 2
        rows.append(
            {
                "n_g": n_g,
                "n_regular": n_regular,
                "n_gist": n_gist,
                "r_c": float(r),
                "r_c_2dp": f"{float(r):.2f}",
                "halving_exact": halved,
            }
        )
    return rows


@dataclass(frozen=True)
class PerplexityCurve:
    prefixes: tuple[int, ...]
    modes: tuple[str, ...]
    ppl: dict[str, tuple[float, ...]]  # mode -> value per prefix
    docs_used: tuple[int, ...]         # docs contributing per prefix

    def to_json(self) -> dict:
        return {
            "prefixes": list(self.prefixes),
            "modes": list(self.modes),
            "ppl": {m: list(v) for m, v in self.ppl.items()},
            "docs_used": list(self.docs_used),
        }


def perplexity_curve(
    params: ModelParams,
    docs: list[AnnotatedSequence],
    prefix_lengths: list[int],
    modes: list[str] = list(LOSS_MODES),
) -> PerplexityCurve:
    """exp(mean contributing loss) per (prefix, mode), pooled over docs.

    Logits at position t never depend on later positions, so each doc is
    run once at full length and prefixes only restrict which positions
    contribute. Prefixes no document can fill are skipped with a warning.
    """
    for mode in modes:
        if mode not in LOSS_MODES:
            raise EvalError(f"unknown loss mode {mode!r}")
    max_len = params.config.max_seq_len
    per_doc: list[tuple[np.ndarray, np.ndarray, int]] = []  # losses, roles, n_g
    for a in docs:
        a = truncate_annotated(a, max_len)
        if len(a) < 2:
            continue
        out = forward(params, a, build_mask(a))
        _, losses = lm_loss(out, a, "all")
        per_doc.append((losses.astype(np.float64), a.roles[:-1], a.n_g))

    kept: list[int] = []
    docs_used: list[int] = []
    sums = {m: [] for m in modes}
    counts = {m: [] for m in modes}
    for p in prefix_lengths:
        usable = [d for d in per_doc if len(d[0]) + 1 >= p]
        if not usable:
            warnings.warn(f"prefix {p} longer than every document; skipped")
            continue
        kept.append(p)
        docs_used.append(len(usable))
        for m in modes:
            s = 0.0
            c = 0
            for losses, roles, n_g in usable:
                w = _mode_condition(roles[: p - 1], n_g, m)
                s += float(losses[: p - 1][w].sum())
                c += int(w.sum())
            sums[m].append(s)
            counts[m].append(c)
    ppl = {
        m: tuple(float(np.exp(s / c)) for s, c in zip(sums[m], counts[m]))
        for m in modes
    }
    return PerplexityCurve(
        prefixes=tuple(kept), modes=tuple(modes), ppl=ppl, docs_used=tuple(docs_used)
    )


def curve_to_csv(curve: PerplexityCurve) -> str:
    lines = ["prefix,mode,ppl"]
    for m in curve.modes:
        for p, v in zip(curve.prefixes, curve.ppl[m]):
            lines.append(f"{p},{m},{v!r}")
    return "\n".join(lines) + "\n"


def _corpus_compression(corpus: Corpus, vocab: Vocab, n_g_list: list[int]) -> list[dict]:
    if not n_g_list:
        return []
    counting_vocab = vocab.base().with_gists(max(n_g_list))
    rows = []
    for n_g in n_g_list:
        n_regular = 0
        n_gist = 0
        ratios = []
        peak_max = 0
        total_positions = 0
        for doc in corpus.documents:
            a = segment(doc, counting_vocab, n_g)
            r, g = count_tokens(a)
            n_regular += r
            n_gist += g
            c = prefill_counters(a)
            ratios.append(c.cache_ratio)
            peak_max = max(peak_max, c.peak_entries)
            total_positions += c.total_positions
        row = {
            "n_g": n_g,
            "n_regular": n_regular,
            "n_gist": n_gist,
            "r_c": (n_regular / n_gist) if n_gist else None,
            "r_c_2dp": f"{n_regular / n_gist:.2f}" if n_gist else None,
            "kv": {
                "total_positions": total_positions,
                "peak_entries_max": peak_max,
                "mean_cache_ratio": float(np.mean(ratios)) if ratios else 1.0,
            },
        }
        rows.append(row)
    return rows


def eval_report(
    ckpt_dir: str | Path,
    corpus_dir: str | Path,
    n_g_list: list[int],
    prefixes: list[int],
    modes: list[str] = list(LOSS_MODES),
) -> dict:
    """Deterministic aggregation of compression rates, perplexity curves,
    and cache counters for one checkpoint over one corpus."""
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "manifest.json").exists():
        raise EvalError(f"missing checkpoint at {ckpt_dir}")
    params, manifest = load_checkpoint(ckpt_dir)
    vocab = Vocab.load(ckpt_dir / "vocab.json")
    corpus = load_corpus(corpus_dir, vocab.base())

    n_g_model = params.config.n_g
    if n_g_model >= 1:
        docs = [segment(d, vocab, n_g_model) for d in corpus.documents]
    else:
        docs = [annotate_causal(d) for d in corpus.documents]
    curve = perplexity_curve(params, docs, prefixes, modes)

    return {
        "schema": REPORT_SCHEMA,
        "config_hash": manifest["config_hash"],
        "vocab_hash": vocab.content_hash(),
        "n_g_model": n_g_model,
        "n_documents": len(corpus.documents),
        "compression": _corpus_compression(corpus, vocab, n_g_list),
        "perplexity": curve.to_json(),
    }


def write_report(report: dict, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(
        json.dumps(report, indent=1, sort_keys=True), encoding="utf-8"
    )
    curve = report["perplexity"]
    lines = ["prefix,mode,ppl"]
    for m in curve["modes"]:
        for p, v in zip(curve["prefixes"], curve["ppl"][m]):
            lines.append(f"{p},{m},{v!r}")
    curves_path = out_dir / "curves.csv"
    curves_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report_path, curves_path
