"""Sentence-boundary gist-token context compression, desk scale."""

from .vocab import Vocab, Corpus, build_vocab, add_label_period, load_corpus
from .segment import (
    AnnotatedSequence,
    REGULAR,
    segment,
    annotate_causal,
    strip_gists,
    count_tokens,
    truncate_annotated,
)
from .mask import SentenceMask, build_mask, mask_density, render_mask
from .model import (
    ModelConfig,
    ModelParams,
    ForwardOutput,
    init_params,
    extend_vocab_mean_resize,
    extend_params,
    forward,
    lm_loss,
    grad,
)
from .train import StageConfig, TrainState, TrainData, lr_at, run_stage, run_pipeline
from .decode import (
    GistKvCache,
    DecodeSession,
    CompressionCounters,
    prefill,
    start_session,
    decode_step,
    generate_tokens,
    cache_report,
)
from .evaluate import (
    compression_rate,
    halving_property_check,
    perplexity_curve,
    eval_report,
    PerplexityCurve,
)

__version__ = "0.1.0"
