from .bench import BenchRow, bench_attention, bench_csv, monotone_inversions
from .experiment import (
    SCHEMA_VERSION,
    SUMMARY_COLUMNS,
    ExperimentSpec,
    RequestReport,
    RunReport,
    read_prompts,
    run_experiment,
    write_prompts,
)
from .metrics import (
    StabilityReport,
    cosine,
    flop_model,
    jaccard,
    measure_support_stability,
    run_violations,
    segment_prompt,
    stability_sweep,
)

__all__ = [
    "SCHEMA_VERSION",
    "SUMMARY_COLUMNS",
    "BenchRow",
    "ExperimentSpec",
    "RequestReport",
    "RunReport",
    "StabilityReport",
    "bench_attention",
    "bench_csv",
    "cosine",
    "flop_model",
    "jaccard",
    "measure_support_stability",
    "monotone_inversions",
    "read_prompts",
    "run_experiment",
    "run_violations",
    "segment_prompt",
    "stability_sweep",
    "write_prompts",
]
