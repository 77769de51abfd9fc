"""Desk-scale lab for two-stage fine-tuning experiments on parallel corpora:
domain divergence over token distributions, subword BLEU, a from-scratch
encoder-decoder trainer, and a deterministic experiment grid runner."""

__version__ = "0.1.0"

from .corpus import (
    ParallelCorpus,
    SampleSpec,
    VerseKeyedText,
    align_verses,
    ingest_line_aligned,
    load_corpus,
    sample_subset,
    save_corpus,
)
from .divergence import (
    DivergenceMatrix,
    TokenDistribution,
    build_distribution,
    divergence_matrix,
    js_divergence,
    kl_divergence,
    matrix_from_corpora,
)
from .errors import ItftLabError
from .metrics import (
    BleuScore,
    CorrelationReport,
    bleu,
    correlate_divergence,
    correlation_table,
    pearson,
    sp_bleu,
)
from .orchestrator import (
    ExperimentPlan,
    RunRecord,
    StageSpec,
    TestSpec,
    ToyBackend,
    aggregate,
    plan_grid,
    run_grid,
    run_plan,
)
from .textprep import (
    DivergencePrepConfig,
    SubwordModel,
    decode,
    encode,
    load_subword,
    normalize_token,
    prep_for_divergence,
    save_subword,
    train_subword,
    word_tokenize,
)
from .toytrainer import (
    ModelCheckpoint,
    ModelConfig,
    TrainConfig,
    fine_tune,
    forward,
    gen_synthetic_domains,
    greedy_decode,
    init_model,
    synthetic_domain_family,
)
