"""scentnav: scent-driven, memory-bounded navigation in hierarchical menus.

A POMDP simulator of goal-directed menu navigation under noisy scent
perception and decaying working memory, a masked policy-gradient agent
trained on it, behavioral metrics, and an experiment harness for benchmark
studies, ablations, parameter sweeps, sensitivity analysis, and calibration.
"""

__version__ = "0.1.0"

from .ia import (  # noqa: F401
    ConditionSpec,
    EmbeddingTable,
    GenerationConfig,
    Layout,
    Node,
    ScentProfile,
    action_path_cost,
    build_layout,
    generate_benchmark_layout,
    layout_from_json,
    layout_to_json,
    load_embedding_table,
    load_layout,
    make_menu_layout,
    propagate_internal_scent,
    save_layout,
    scent_from_embeddings,
)
from .memory import (  # noqa: F401
    MemoryParams,
    MemoryStore,
    MemoryTrace,
    accessible,
    priority,
    select_global_panel,
    strength,
)
from .env import (  # noqa: F401
    EnvConfig,
    EpisodeLog,
    NavigationEnv,
    Observation,
    StepOutcome,
    replay_episode,
    rollout,
)
from .agent import (  # noqa: F401
    Policy,
    PolicySpec,
    TrainConfig,
    discounted_returns,
    evaluate,
    evaluate_random,
    load_checkpoint,
    policy_forward,
    save_checkpoint,
    train,
)
from .metrics import (  # noqa: F401
    CompareResult,
    MetricRecord,
    aggregate,
    compare,
    episode_metrics,
    lostness,
)
from .config import ExperimentConfig, load_config, save_config  # noqa: F401
from .experiments import (  # noqa: F401
    AgreementScores,
    ReferenceTrends,
    agreement_scores,
    calibrate,
    run_benchmark,
    run_component_ablation,
    run_gamma_ablation,
    run_parameter_sweeps,
    run_sensitivity,
)
