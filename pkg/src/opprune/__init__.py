"""Budget-aware operation pruning for transformer decoder prefill.

Decomposes a decoder's prefill computation into (token group, layer, module)
operations, greedily sorts them by redundancy against a pluggable evaluator,
and truncates the sorted sequence to meet any FLOPs budget.
"""

from .errors import (
    AttentionDegenerateError,
    BudgetInfeasibleError,
    ConfigError,
    EmptyOperationSpaceError,
    EvaluatorFailure,
    HandshakeTimeoutError,
    OpPruneError,
    ProtocolError,
    ScheduleError,
    StalePolicyError,
    VersionMismatchError,
    WorkerLaunchError,
)
from .evaluators import (
    Evaluator,
    SyntheticOracle,
    SyntheticOracleSpec,
    ToyDecoder,
    ToyDecoderSpec,
    oracle_evaluate,
)
from .flops import (
    FlopsReport,
    PerLayerCounts,
    flops_reduction,
    layer_flops,
    layer_flops_split,
    module_proportions,
    policy_counts,
    policy_flops,
    truncate_to_budget,
)
from .model import (
    ConstraintFlags,
    DecoderConfig,
    DecoderShape,
    GroupKind,
    GroupSpec,
    ModuleKind,
    Operation,
    Policy,
    SortedSequence,
    StepRecord,
    TokenLayout,
    ValidationReport,
    admissible_candidates,
    all_operations,
    canonical_order,
    operation_sort_key,
    validate_policy,
)
from .search import (
    PipelineResult,
    PresortResult,
    SearchConfig,
    ThresholdSchedule,
    TraceWriter,
    binary_search_free,
    default_thresholds,
    greedy_sort,
    presort_filter,
    run_pipeline,
)

__version__ = "0.1.0"
