import pytest

from gistlm.model import ModelConfig, extend_params, init_params
from gistlm.segment import segment
from gistlm.train import StageConfig, TrainState, annotate_corpus, run_stage

from synthdata import build_copy_setup


@pytest.fixture(scope="session")
def mini_trained():
    """A quickly trained n_g=2 checkpoint on the copy-chain corpus.

    Big enough that gist transitions are learned (loss ordering tests,
    punctuation-emitting decodes); small enough to build in seconds.
    """
    texts, vocab, corpus = build_copy_setup(
        n_docs=150, sentences=8, words_per=5, n_types=24, n_g=2, seed=77
    )
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    cfg = ModelConfig(
        d_model=48, n_layers=2, n_heads=4, d_ff=128,
        vocab_size=vk.base_size, n_g=0, max_seq_len=384,
    )
    base = init_params(cfg, seed=1)
    params = extend_params(base, 2, eps=1e-4, seed=2)
    state = TrainState(params=params, seed=3, vocab_hash=vk.content_hash())
    stage = StageConfig(
        name="finetune", token_budget=120 * 16 * 64, batch_size=16, max_seq_len=64,
        max_lr=5e-3, min_lr=5e-4, warmup_steps=10,
    )
    run_stage(state, stage, data, stage_index=1)
    eval_texts = build_copy_setup(
        n_docs=10, sentences=8, words_per=5, n_types=24, n_g=2, seed=991
    )[0]
    docs = [segment(vk.encode(t), vk, 2) for t in eval_texts]
    return state.params, vk, docs
