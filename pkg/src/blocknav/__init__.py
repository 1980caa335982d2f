"""blocknav: block-structured street-graph navigation from language.

Synthetic street worlds, a small reverse-mode autodiff core, an
instruction-following agent with block-progress and sentence-relevance
heads, and a deterministic training/evaluation harness.
"""

from blocknav.graph import (
    Action,
    AgentState,
    BlockIndex,
    EnvGraph,
    TERMINAL,
    TurnSignals,
    UNREACHABLE,
    block_progress_label,
    load_world,
    long_term_angle,
    normalize_heading_delta,
    save_world,
    segment_blocks,
    turn_signals,
)
from blocknav.harness import (
    EvalResult,
    TrainConfig,
    evaluate,
    metric_sed,
    metric_spd,
    metric_tc,
    run_ablation_suite,
    train,
)
from blocknav.model import Agent, AgentConfig, act_greedy
from blocknav.tensor import Tensor
from blocknav.worldgen import (
    Dataset,
    InstructionRecord,
    WorldParams,
    build_records,
    generate_world,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Agent",
    "AgentConfig",
    "AgentState",
    "BlockIndex",
    "Dataset",
    "EnvGraph",
    "EvalResult",
    "InstructionRecord",
    "TERMINAL",
    "Tensor",
    "TrainConfig",
    "TurnSignals",
    "UNREACHABLE",
    "WorldParams",
    "act_greedy",
    "block_progress_label",
    "build_records",
    "evaluate",
    "generate_world",
    "load_dataset",
    "load_world",
    "long_term_angle",
    "metric_sed",
    "metric_spd",
    "metric_tc",
    "normalize_heading_delta",
    "run_ablation_suite",
    "save_dataset",
    "save_world",
    "segment_blocks",
    "train",
    "turn_signals",
    "__version__",
]
