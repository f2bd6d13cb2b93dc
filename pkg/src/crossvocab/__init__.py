"""Decoding-time ensembling of language models across mismatched vocabularies."""

from .backends import (
    Backend,
    BigramBackend,
    Context,
    NextTokenDistribution,
    TableBackend,
    make_toy_model,
    next_logprobs,
    score_tokens,
)
from .constraint import (
    ConstraintState,
    JsonSchemaConstraint,
    TokenMask,
    advance,
    allowed_tokens,
    apply_point,
    fresh_state,
    load_constraint,
)
from .ensemble import (
    CandidateScore,
    EnsembleConfig,
    GenerationResult,
    StepRecord,
    capt_step,
    generate,
    proxy_tuning_step,
    single_step,
    unite_step,
)
from .tokenizers import (
    CrossVocabMap,
    GreedyTokenizer,
    build_map,
    load_toy_tokenizer,
    map_token,
)
from .analysis import (
    AnnotatedText,
    OffsetReport,
    TokenCategoryMap,
    aggregate_by_category,
    annotate_output,
    load_category_map,
    render_html,
)
from .harness import (
    ExampleRecord,
    MetricsReport,
    TaskSpec,
    load_dataset,
    macro_f1,
    run_task,
)

__version__ = "0.1.0"
