"""Throwaway calibration sweep for the n_g trend experiment (not shipped)."""
import time
import numpy as np
from gistlm import *
from gistlm.train import annotate_corpus, run_stage, StageConfig, TrainState
from gistlm.vocab import build_vocab, Corpus
from gistlm.evaluate import perplexity_curve
from gistlm.segment import segment

t0 = time.time()

def make_docs(n_docs, sentences, words_per, n_types, seed):
    rng = np.random.default_rng(seed)
    types = [f"w{i:02d}" for i in range(n_types)]
    docs = []
    for _ in range(n_docs):
        tup = rng.choice(types, words_per, replace=False)
        sent = " ".join(tup) + " ."
        docs.append(" ".join([sent] * sentences))
    return docs

train_texts = make_docs(18000, 12, 8, 40, seed=123)
eval_texts = make_docs(80, 12, 8, 40, seed=9999)
v = build_vocab(train_texts, "word", n_g=8)
enc = lambda ts: tuple(np.asarray(v.encode(t), dtype=np.int32) for t in ts)
train_corpus = Corpus(enc(train_texts), tuple(map(str, range(len(train_texts)))), 1)
eval_corpus = Corpus(enc(eval_texts), tuple(map(str, range(len(eval_texts)))), 1)
print("V0:", v.base_size, "corpus raw tokens:", sum(len(d) for d in train_corpus.documents), flush=True)

mcfg = ModelConfig(d_model=64, n_layers=3, n_heads=4, d_ff=192,
                   vocab_size=v.base_size, n_g=0, max_seq_len=256)
base = init_params(mcfg, seed=5)
vb = v.base()
st = TrainState(params=base, seed=42, vocab_hash=vb.content_hash())
rows = run_stage(st, StageConfig(name="finetune", token_budget=800_000, batch_size=16, max_seq_len=256,
                                 max_lr=5e-3, min_lr=5e-4, warmup_steps=20),
                 annotate_corpus(train_corpus, vb, 0), stage_index=1)
print(f"base: loss {rows[-1]['loss_all']:.3f} [{time.time()-t0:.0f}s]", flush=True)

res = {}
for n_g in (1, 2, 4, 8):
    vk = v.base().with_gists(n_g)
    data = annotate_corpus(train_corpus, vk, n_g)
    params = extend_params(st.params, n_g, eps=1e-4, seed=100 + n_g)
    sk = TrainState(params=params, seed=1000 + n_g, vocab_hash=vk.content_hash())
    run_stage(sk, StageConfig(name="warmup_gist", token_budget=100_000, batch_size=16, max_seq_len=256,
                              max_lr=5e-3, min_lr=5e-4, warmup_steps=10, freeze="all_but_gist_rows"),
              data, stage_index=1)
    r2 = run_stage(sk, StageConfig(name="finetune", token_budget=4_000_000, batch_size=16, max_seq_len=256,
                                   max_lr=5e-3, min_lr=2e-3, warmup_steps=30), data, stage_index=2)
    r3 = run_stage(sk, StageConfig(name="cold_down", token_budget=1_600_000, batch_size=16, max_seq_len=256,
                                   max_lr=2e-3, min_lr=0.0, warmup_steps=10, schedule="linear"), data, stage_index=3)
    ev = [segment(d, vk, n_g) for d in eval_corpus.documents]
    lmin = min(len(d) for d in ev)
    curve = perplexity_curve(sk.params, ev, [lmin // 2, lmin], ["all", "regular_only", "final_gist"])
    res[n_g] = curve.ppl
    print(f"n_g={n_g}: s2_end reg {r2[-1]['loss_regular']:.3f} s3_end reg {r3[-1]['loss_regular']:.3f} | "
          f"ppl_reg@{lmin} {curve.ppl['regular_only'][-1]:.4f} all {curve.ppl['all'][-1]:.4f} "
          f"fg {curve.ppl['final_gist'][-1]:.4f} [{time.time()-t0:.0f}s]", flush=True)

regs = [res[k]["regular_only"][-1] for k in (1, 2, 4, 8)]
print("regular-only ppl:", [f"{x:.4f}" for x in regs])
print("monotone decreasing:", all(a > b for a, b in zip(regs, regs[1:])))
print("all<=fg:", [res[k]["all"][-1] <= res[k]["final_gist"][-1] for k in (1, 2, 4, 8)])
print("total", time.time() - t0)
