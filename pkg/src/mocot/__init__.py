"""Modular plan-execute-verify reasoning over chat backends, structured
rewards with group-relative optimization, faithfulness metrics, and a
numerical laboratory for the underlying probability and information bounds.
"""

from .backend import (
    Backend,
    BackendConfig,
    ChatMessage,
    ChatResponse,
    ContentPart,
    HttpBackend,
    ImageRef,
    RetryPolicy,
    RetryRecord,
    ScriptedMockBackend,
    build_backend,
    canonical_request_key,
    complete,
    complete_with_retry,
    decode_messages,
    encode_messages,
    load_mock_script,
)
from .engine import (
    CVQAInstance,
    MoCoTTrace,
    MocotEngine,
    StageBackends,
    StageConfig,
    run_direct,
    run_pipeline,
)
from .grpo import (
    AdvantageSet,
    GrpoConfig,
    RewardGroup,
    ToyPolicy,
    TrainingLog,
    default_toy_task,
    gradient_coefficient,
    grpo_step,
    normalize_group,
    train_toy,
    vera_reward_fn,
)
from .metrics import (
    CasRecord,
    ClaimRecord,
    EvalReport,
    SampleRow,
    UsrResult,
    accuracy,
    aggregate,
    bleu4,
    cas,
    rouge_l,
    select_counterfactual,
    tokenize,
    usr,
)
from .parsing import (
    CheckerVerdict,
    CuesIntent,
    MetaOutput,
    Plan,
    SubQuestion,
    SubResult,
    TaggedOutput,
    extract_fenced_json,
    normalize_option_label,
    parse_cues_intent,
    parse_meta,
    parse_plan,
    parse_subresult,
    parse_tagged_output,
    parse_verdict,
)
from .vera import (
    DEFAULT_WEIGHTS,
    ReferenceRecord,
    RewardBreakdown,
    VeraWeights,
    reward_accuracy,
    reward_format,
    reward_logic,
    reward_reasoning,
    score_output,
    vera_total,
)

__version__ = "0.1.0"
