"""Command-line surface: preprocess / train / eval / generate / mask-dump.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 runtime
failure (diagnostic on stderr). Existing outputs are never overwritten
without --force; the GIST_SEED environment variable overrides any
configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .decode import cache_report, generate_tokens, start_session
from .evaluate import eval_report, write_report
from .mask import build_mask, mask_density, render_mask, sentence_block_table
from .model import LOSS_MODES, ModelConfig, init_params
from .segment import annotate_causal, segment
from .shards import write_shard
from .train import StageConfig, annotate_corpus, run_pipeline
from .vocab import BYTE, SCHEMES, Vocab, build_vocab, load_corpus


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise _UsageError(message)


def _env_seed(default: int) -> int:
    raw = os.environ.get("GIST_SEED")
    return int(raw) if raw else default


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise RuntimeError(f"refusing to overwrite {path} (use --force)")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _build_parser() -> _Parser:
    p = _Parser(prog="gistlm", description="sentence-gist context compression toolkit")
    sub = p.add_subparsers(dest="cmd")

    pp = sub.add_parser("preprocess", help="segment a corpus into annotated shards")
    pp.add_argument("--corpus", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--scheme", choices=SCHEMES, default=BYTE)
    pp.add_argument("--ng", type=int, default=1)
    pp.add_argument("--vocab", help="reuse an existing vocab.json")
    pp.add_argument("--force", action="store_true")
    pp.add_argument("--quiet", action="store_true")

    tr = sub.add_parser("train", help="run the staged training pipeline")
    tr.add_argument("--config", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--force", action="store_true")
    tr.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="compression rates and perplexity curves")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--ng", default="")
    ev.add_argument("--prefixes", default="64,128,256")
    ev.add_argument("--modes", default=",".join(LOSS_MODES))
    ev.add_argument("--out", required=True)
    ev.add_argument("--force", action="store_true")
    ev.add_argument("--quiet", action="store_true")

    ge = sub.add_parser("generate", help="decode with the compressed KV cache")
    ge.add_argument("--ckpt", required=True)
    src = ge.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt")
    src.add_argument("--prompt-file")
    ge.add_argument("--max-new-tokens", type=int, default=64)
    mode = ge.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", default=True)
    mode.add_argument("--temp", type=float)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--bos", action="store_true")
    ge.add_argument("--report-cache", action="store_true")
    ge.add_argument("--quiet", action="store_true")

    md = sub.add_parser("mask-dump", help="render the sentence-attention mask")
    md.add_argument("--text", required=True)
    md.add_argument("--ng", type=int, default=1)
    md.add_argument("--scheme", choices=SCHEMES, default=BYTE)
    md.add_argument("--format", choices=("ascii", "pgm"), default="ascii")
    md.add_argument("--out", help="output path (required for pgm)")
    md.add_argument("--force", action="store_true")
    md.add_argument("--quiet", action="store_true")
    return p


def _cmd_preprocess(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shard_path = out / "shard.bin"
    vocab_path = out / "vocab.json"
    _guard(shard_path, args.force)
    if args.vocab:
        vocab = Vocab.load(args.vocab)
        if vocab.n_g == 0 and args.ng > 0:
            vocab = vocab.with_gists(args.ng)
    else:
        texts = [p.read_text(encoding="utf-8") for p in sorted(Path(args.corpus).glob("*.txt"))]
        vocab = build_vocab(texts, args.scheme, n_g=args.ng)
    corpus = load_corpus(args.corpus, vocab)
    data = annotate_corpus(corpus, vocab, args.ng)
    vocab.save(vocab_path)
    write_shard(shard_path, list(data.docs), args.ng, data.vocab_hash)
    if not args.quiet:
        total = sum(len(d) for d in data.docs)
        print(f"wrote {shard_path} ({len(data.docs)} docs, {total} positions, n_g={args.ng})")
    return 0


def _cmd_train(args) -> int:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    seed = _env_seed(cfg.get("seed", 0))
    n_g = cfg["n_g"]
    scheme = cfg.get("scheme", BYTE)
    out = Path(args.out)
    if args.force and out.exists():
        shutil.rmtree(out)

    texts = [p.read_text(encoding="utf-8") for p in sorted(Path(args.corpus).glob("*.txt"))]
    vocab = build_vocab(texts, scheme, n_g=n_g)
    corpus = load_corpus(args.corpus, vocab)
    data = annotate_corpus(corpus, vocab, n_g)

    if cfg.get("base_ckpt"):
        base, _ = load_checkpoint(cfg["base_ckpt"])
    else:
        model_spec = dict(cfg["model"])
        for derived in ("vocab_size", "n_g"):
            if derived in model_spec:
                raise RuntimeError(
                    f"model.{derived} is derived from the corpus and the top-level "
                    "n_g; remove it from the config"
                )
        model_cfg = ModelConfig(vocab_size=vocab.base_size, n_g=0, **model_spec)
        base = init_params(model_cfg, seed=seed)
    stages = [StageConfig.from_json(s) for s in cfg["stages"]]
    _, final = run_pipeline(
        base, stages, data, out,
        seed=seed, vocab=vocab,
        extend_eps=cfg.get("extend_eps", 1e-5),
        quiet=args.quiet,
    )
    if not args.quiet:
        print(f"final checkpoint at {final}")
    return 0


def _cmd_eval(args) -> int:
    out = Path(args.out)
    _guard(out / "report.json", args.force)
    report = eval_report(
        args.ckpt,
        args.corpus,
        _int_list(args.ng),
        _int_list(args.prefixes),
        [m for m in args.modes.split(",") if m],
    )
    report_path, curves_path = write_report(report, out)
    if not args.quiet:
        print(f"wrote {report_path} and {curves_path}")
    return 0


def _cmd_generate(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    vocab = Vocab.load(Path(args.ckpt) / "vocab.json")
    if args.prompt_file:
        prompt = Path(args.prompt_file).read_text(encoding="utf-8")
    else:
        prompt = args.prompt or ""
    seed = _env_seed(args.seed)
    session = start_session(
        params,
        vocab,
        vocab.encode(prompt),
        add_bos=args.bos,
        greedy=args.temp is None,
        temperature=args.temp if args.temp is not None else 1.0,
        seed=seed,
    )
    tokens = generate_tokens(session, args.max_new_tokens)
    print(vocab.decode(tokens, errors="replace"))
    if args.report_cache:
        print(json.dumps(cache_report(session), sort_keys=True))
    return 0


def _cmd_mask_dump(args) -> int:
    vocab = build_vocab([args.text], args.scheme, n_g=max(args.ng, 0))
    raw = vocab.encode(args.text)
    a = segment(raw, vocab, args.ng) if args.ng >= 1 else annotate_causal(raw)
    m = build_mask(a)
    rendered = render_mask(m, args.format)
    if args.out:
        path = Path(args.out)
        _guard(path, args.force)
        path.write_bytes(rendered)
    elif args.format == "ascii":
        sys.stdout.write(rendered.decode("ascii") + "\n")
    else:
        raise RuntimeError("pgm output needs --out")
    if not args.quiet:
        print(f"n={m.n} density={mask_density(m)!r}")
        for row in sentence_block_table(a, m):
            print(
                f"sentence {row['sentence']}: positions [{row['start']},{row['stop']}) "
                f"regular={row['regular']} gist={row['gist']}"
            )
    return 0


_DISPATCH = {
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "generate": _cmd_generate,
    "mask-dump": _cmd_mask_dump,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"gistlm: error: {e}", file=sys.stderr)
        return 1
    if args.cmd is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _DISPATCH[args.cmd](args)
    except Exception as e:  # runtime failure -> diagnostic, exit 2
        print(f"gistlm: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
