"""Dynamic attention-guided context decoding toolkit."""

from .attention import (
    AttentionSnapshot,
    ContextSpan,
    FeatureVector,
    HeadId,
    PromptLayout,
    attention_ratio,
    context_mask,
    full_feature_vector,
    topk_feature_vector,
)
from .decoder import (
    DecoderConfig,
    GenerationResult,
    UtilizationDistribution,
    adjust_distribution,
    decode,
    top_rank_restrict,
    utilization_distribution,
    utilization_scores,
)
from .detector import (
    AttentionProbe,
    LabeledExample,
    TrainConfig,
    UtilizationDetector,
    build_training_set,
    classify,
    evaluate,
    head_weights,
    load_detector,
    predict_proba,
    save_detector,
    select_top_heads,
    train,
)
from .distributions import (
    LogitVector,
    TokenDistribution,
    max_softmax_probability,
    normalized_entropy,
    probability_gap,
    rank_of_token,
    softmax,
    spearman,
    top_r_token_set,
)
from .traceio import (
    QAExample,
    StepTrace,
    TraceFile,
    em,
    f1,
    normalize_answer,
    read_qa_dataset,
    read_trace,
    record_trace,
    replay_oracle,
    write_trace,
)

__version__ = "0.1.0"
