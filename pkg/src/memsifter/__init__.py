"""memsifter: session-memory retrieval via a reasoning proxy, with an
outcome-driven reward stack and RL data-preparation utilities."""

from .backends import (
    BackendPolicy,
    CachedChatBackend,
    ChatBackend,
    ChatRequest,
    EmbeddingBackend,
    HttpChatBackend,
    HttpEmbeddingBackend,
    InstrumentedChatBackend,
    KeywordEmbeddingBackend,
    KeywordProxyBackend,
    OracleWorkingLLM,
    ScriptedChatBackend,
    cosine_similarity,
    oracle_answer,
)
from .bench import (
    EvalReport,
    SyntheticConfig,
    Task,
    TaskRow,
    generate_synthetic,
    load_dataset,
    oracle_for_tasks,
    run_eval,
    save_dataset,
)
from .config import PipelineConfig, load_config
from .errors import (
    BackendError,
    ConfigError,
    ContextOverflowError,
    EmptyHistory,
    FormatError,
    IntegrityError,
    InvalidArgument,
    IoError,
    MemSifterError,
    MissingRankingError,
    ParseError,
    ShapeError,
    TemplateError,
)
from .prefilter import FilteredBank, prefilter
from .ranker import (
    PromptTemplate,
    RankingResult,
    build_prompt,
    default_template,
    parse_ranking,
    rank,
)
from .rewards import (
    AblationScores,
    CutoffSchedule,
    RewardBreakdown,
    WeightVector,
    anneal_beta,
    discount,
    evaluate_ablation,
    fibonacci_cutoffs,
    full_reward,
    hybrid_reward,
    outcome_reward,
    outcome_reward_marginal,
    retrieval_reward_ndcg,
    score_answer_exact,
    score_answer_f1,
    weights,
)
from .store import (
    BoundaryPolicy,
    FixedSizePolicy,
    GapPolicy,
    MemoryBank,
    Session,
    Turn,
    estimate_tokens,
    load_bank,
    render_sessions,
    save_bank,
    segment_history,
)
from .training import (
    CurriculumConfig,
    ParamMap,
    RolloutGroup,
    TrajectoryRecord,
    attach_advantages,
    export_trajectories,
    filter_groups,
    grpo_advantages,
    load_param_map,
    load_trajectories,
    merge_checkpoints,
    save_param_map,
    select_curriculum,
)

__version__ = "0.1.0"
