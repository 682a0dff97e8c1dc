import math

import numpy as np
import pytest

from gistlm.checkpoint import load_checkpoint
from gistlm.model import ModelConfig, extend_params, init_params
from gistlm.train import (
    StageConfig,
    TrainError,
    TrainState,
    annotate_corpus,
    load_train_data,
    lr_at,
    run_pipeline,
    run_stage,
    write_metrics_csv,
)
from gistlm.shards import write_shard

from synthdata import build_copy_setup


@pytest.fixture(scope="module")
def setup():
    texts, vocab, corpus = build_copy_setup(
        n_docs=24, sentences=6, words_per=4, n_types=16, n_g=2, seed=5
    )
    return texts, vocab, corpus


def small_model(vocab, n_g=0):
    cfg = ModelConfig(
        d_model=24, n_layers=2, n_heads=2, d_ff=48,
        vocab_size=vocab.base_size + n_g, n_g=n_g, max_seq_len=96,
    )
    return init_params(cfg, seed=1)


def stage(name="finetune", budget=2 * 4 * 48, **kw):
    base = dict(
        name=name, token_budget=budget, batch_size=4, max_seq_len=48,
        max_lr=1e-2, min_lr=1e-3, warmup_steps=1,
    )
    base.update(kw)
    return StageConfig(**base)


# -- learning-rate schedule ----------------------------------------------------

def lr_cfg(**kw):
    # 101 steps with a 10-step warmup puts the cosine midpoint on step 55
    base = dict(
        name="finetune", token_budget=101 * 8 * 32, batch_size=8, max_seq_len=32,
        max_lr=1e-3, min_lr=1e-4, warmup_steps=10,
    )
    base.update(kw)
    return StageConfig(**base)


def test_lr_warmup_starts_at_zero():
    assert lr_at(lr_cfg(), 0) == 0.0


def test_lr_cosine_midpoint():
    cfg = lr_cfg()
    steps = cfg.num_steps()
    assert steps == 101
    mid = cfg.warmup_steps + (steps - 1 - cfg.warmup_steps) // 2
    assert lr_at(cfg, mid) == pytest.approx((cfg.max_lr + cfg.min_lr) / 2, rel=1e-12)


def test_lr_linear_stage3_ends_at_zero():
    cfg = lr_cfg(name="cold_down", schedule="linear", min_lr=0.0, warmup_steps=5)
    assert lr_at(cfg, cfg.num_steps() - 1) == 0.0


def test_lr_cosine_floors_at_min():
    cfg = lr_cfg()
    assert lr_at(cfg, cfg.num_steps() - 1) == pytest.approx(cfg.min_lr)
    assert lr_at(cfg, cfg.num_steps() + 50) == pytest.approx(cfg.min_lr)


def test_lr_peak_after_warmup():
    cfg = lr_cfg()
    assert lr_at(cfg, cfg.warmup_steps) == pytest.approx(cfg.max_lr)


# -- stage config validation ---------------------------------------------------

def test_freeze_only_in_stage_one():
    with pytest.raises(TrainError, match="stage-1"):
        StageConfig(
            name="finetune", token_budget=1, batch_size=1, max_seq_len=8,
            max_lr=1e-3, min_lr=0.0, warmup_steps=0, freeze="all_but_gist_rows",
        )


def test_lr_ordering_validated():
    with pytest.raises(TrainError):
        StageConfig(
            name="finetune", token_budget=1, batch_size=1, max_seq_len=8,
            max_lr=1e-4, min_lr=1e-3, warmup_steps=0,
        )


def test_scaled_reference_ratios_accepted():
    # budget ratio 0.1 : 2 : 2 with batch sizes 64 : 128 : 512, scaled by 1/64
    stages = [
        StageConfig(name="warmup_gist", token_budget=100_000, batch_size=1,
                    max_seq_len=4096, max_lr=1e-4, min_lr=5e-5, warmup_steps=100,
                    schedule="cosine", max_grad_norm=1.0, freeze="all_but_gist_rows"),
        StageConfig(name="finetune", token_budget=2_000_000, batch_size=2,
                    max_seq_len=4096, max_lr=1e-4, min_lr=5e-5, warmup_steps=1000,
                    schedule="cosine", max_grad_norm=2.0),
        StageConfig(name="cold_down", token_budget=2_000_000, batch_size=8,
                    max_seq_len=4096, max_lr=5e-5, min_lr=0.0, warmup_steps=100,
                    schedule="linear", max_grad_norm=2.0),
    ]
    assert [s.num_steps() for s in stages] == [
        math.ceil(100_000 / 4096), math.ceil(2_000_000 / (2 * 4096)),
        math.ceil(2_000_000 / (8 * 4096)),
    ]


def test_step_count_is_exact_ceiling(setup):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    params = extend_params(small_model(vocab), 2, seed=2)
    state = TrainState(params=params, seed=0, vocab_hash=vk.content_hash())
    cfg = stage(budget=3 * 4 * 48 + 1)  # one token over three full batches
    rows = run_stage(state, cfg, data, stage_index=1)
    assert len(rows) == 4 == cfg.num_steps()

    empty = stage(budget=0)
    before = {k: v.copy() for k, v in state.params.tensors.items()}
    assert run_stage(state, empty, data, stage_index=2) == []
    assert all(np.array_equal(before[k], state.params.tensors[k]) for k in before)


# -- freeze and clipping --------------------------------------------------------

def test_stage1_freeze_bitwise(setup):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    params = extend_params(small_model(vocab), 2, seed=3)
    before = {k: v.copy() for k, v in params.tensors.items()}
    state = TrainState(params=params, seed=1, vocab_hash=vk.content_hash())
    cfg = stage(name="warmup_gist", freeze="all_but_gist_rows", budget=2 * 4 * 48)
    run_stage(state, cfg, data, stage_index=1)
    rows = params.gist_rows
    for name, arr in state.params.tensors.items():
        if name == "embed":
            assert np.array_equal(arr[: rows.start], before["embed"][: rows.start])
            assert not np.array_equal(arr[rows.start:], before["embed"][rows.start:])
        else:
            assert np.array_equal(arr, before[name])


def test_grad_norm_clipped(setup):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    params = extend_params(small_model(vocab), 2, seed=4)
    state = TrainState(params=params, seed=2, vocab_hash=vk.content_hash())
    cfg = stage(budget=6 * 4 * 48, max_grad_norm=0.01)
    rows = run_stage(state, cfg, data, stage_index=1)
    for r in rows:
        assert r["grad_norm"] <= 0.01 + 1e-6


def test_vocab_hash_mismatch_rejected(setup):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    params = extend_params(small_model(vocab), 2, seed=5)
    state = TrainState(params=params, seed=3, vocab_hash="deadbeef")
    with pytest.raises(TrainError, match="vocab hash"):
        run_stage(state, stage(), data, stage_index=1)


def test_n_g_mismatch_rejected(setup):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    params = small_model(vocab)  # n_g = 0
    state = TrainState(params=params, seed=3, vocab_hash=vk.content_hash())
    with pytest.raises(TrainError, match="n_g"):
        run_stage(state, stage(), data, stage_index=1)


def test_divergence_aborts_with_snapshot(setup, tmp_path):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    params = extend_params(small_model(vocab), 2, seed=6)
    state = TrainState(params=params, seed=4, vocab_hash=vk.content_hash())
    cfg = stage(budget=30 * 4 * 48, max_lr=1e6, min_lr=1e5, warmup_steps=0,
                max_grad_norm=1e9)
    with np.errstate(all="ignore"), pytest.raises(TrainError, match="aborted"):
        run_stage(state, cfg, data, stage_index=1, snapshot_dir=tmp_path)
    assert (tmp_path / "aborted" / "manifest.json").exists()


# -- determinism and the pipeline ----------------------------------------------

def test_identical_runs_produce_identical_metrics(setup):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)

    def one_run():
        params = extend_params(small_model(vocab), 2, seed=7)
        state = TrainState(params=params, seed=9, vocab_hash=vk.content_hash())
        return run_stage(state, stage(budget=5 * 4 * 48), data, stage_index=1)

    assert one_run() == one_run()


def test_pipeline_zero_budget_identity(setup, tmp_path):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    base = small_model(vocab)
    stages = [
        stage(name="warmup_gist", budget=0, freeze="all_but_gist_rows"),
        stage(name="finetune", budget=0),
        stage(name="cold_down", budget=0, schedule="linear", min_lr=0.0),
    ]
    final, final_dir = run_pipeline(
        base, stages, data, tmp_path / "run", seed=11, vocab=vk, extend_eps=1e-5,
    )
    expected = extend_params(base, 2, eps=1e-5, seed=11)
    for name in expected.tensors:
        assert np.array_equal(final.tensors[name], expected.tensors[name])
    assert (tmp_path / "run" / "metrics.csv").read_text().strip() == (
        "step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen"
    )
    loaded, manifest = load_checkpoint(final_dir)
    assert manifest["extra"]["stage"] == "final"


def pipeline_stages():
    return [
        stage(name="warmup_gist", budget=2 * 4 * 48, freeze="all_but_gist_rows"),
        stage(name="finetune", budget=4 * 4 * 48),
        stage(name="cold_down", budget=2 * 4 * 48, schedule="linear", min_lr=0.0),
    ]


def test_pipeline_resume_is_bit_exact(setup, tmp_path):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    base = small_model(vocab)

    a_dir = tmp_path / "a"
    run_pipeline(base, pipeline_stages(), data, a_dir, seed=21, vocab=vk)

    # simulate an interruption after stage 1: copy only that boundary over
    b_dir = tmp_path / "b"
    b_dir.mkdir()
    import shutil

    shutil.copytree(a_dir / "stage1", b_dir / "stage1")
    shutil.copy(a_dir / "metrics_stage1.csv", b_dir / "metrics_stage1.csv")
    run_pipeline(base, pipeline_stages(), data, b_dir, seed=21, vocab=vk)

    assert (a_dir / "metrics.csv").read_bytes() == (b_dir / "metrics.csv").read_bytes()
    assert (a_dir / "final" / "params.bin").read_bytes() == (
        b_dir / "final" / "params.bin"
    ).read_bytes()
    assert (a_dir / "final" / "manifest.json").read_bytes() == (
        b_dir / "final" / "manifest.json"
    ).read_bytes()


def test_pipeline_resume_rejects_config_change(setup, tmp_path):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    base = small_model(vocab)
    out = tmp_path / "run"
    run_pipeline(base, pipeline_stages(), data, out, seed=21, vocab=vk)
    with pytest.raises(TrainError, match="hash mismatch"):
        run_pipeline(base, pipeline_stages(), data, out, seed=22, vocab=vk)


def test_stage2_improves_on_stage1(setup, tmp_path):
    # descent across the unfreeze boundary on a small pipeline
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    base = small_model(vocab)
    stages = [
        stage(name="warmup_gist", budget=4 * 4 * 48, freeze="all_but_gist_rows",
              max_lr=5e-3, min_lr=5e-4),
        stage(name="finetune", budget=40 * 4 * 48, max_lr=5e-3, min_lr=5e-4,
              warmup_steps=3),
        stage(name="cold_down", budget=0, schedule="linear", min_lr=0.0),
    ]
    run_pipeline(base, stages, data, tmp_path / "run", seed=31, vocab=vk)
    lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()[1:]
    rows = [line.split(",") for line in lines]
    s1_final = float([r for r in rows if r[1] == "warmup_gist"][-1][3])
    s2_final = float([r for r in rows if r[1] == "finetune"][-1][3])
    assert s2_final < s1_final


def test_metrics_csv_schema(tmp_path):
    rows = [
        {"step": 0, "stage": "finetune", "lr": 1e-3, "loss_all": 2.5,
         "loss_regular": 2.25, "grad_norm": 0.5, "tokens_seen": 128},
    ]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    text = path.read_text().splitlines()
    assert text[0] == "step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen"
    assert text[1] == "0,finetune,0.001,2.5,2.25,0.5,128"


def test_shard_round_trip_feeds_training(setup, tmp_path):
    _, vocab, corpus = setup
    vk = vocab.base().with_gists(2)
    data = annotate_corpus(corpus, vk, 2)
    path = tmp_path / "shard.bin"
    write_shard(path, list(data.docs), 2, data.vocab_hash)
    loaded = load_train_data(path)
    assert loaded.n_g == 2 and loaded.vocab_hash == data.vocab_hash
    assert len(loaded.docs) == len(data.docs)
    for a, b in zip(loaded.docs, data.docs):
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.roles, b.roles)
        assert np.array_equal(a.sent_idx, b.sent_idx)
        assert a.open_tail == b.open_tail
