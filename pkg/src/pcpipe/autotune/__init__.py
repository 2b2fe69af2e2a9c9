"""Pipeline autotuning: monitoring, bottleneck check, random seeding plus Bayesian optimisation, persistence."""
from pcpipe.autotune.metrics import MetricsSample, Monitor, collect_metrics, detect_bottleneck
from pcpipe.autotune.persist import apply_best, load_best, persist_best
from pcpipe.autotune.search import (
    CAPACITIES,
    GaussianProcess,
    SearchSpace,
    SurrogateState,
    TuneConfig,
    default_config,
    expected_improvement,
    optimize,
    propose_config,
)
from pcpipe.autotune.tuner import (
    Drain,
    TuneResult,
    apply_and_measure,
    apply_config,
    build_tuned_graph,
    predicted_bytes,
    tune,
    tune_offline,
)

__all__ = [
    "CAPACITIES", "Drain", "GaussianProcess", "MetricsSample", "Monitor", "SearchSpace", "SurrogateState",
    "TuneConfig", "TuneResult", "apply_and_measure", "apply_best", "apply_config", "build_tuned_graph",
    "collect_metrics", "default_config", "detect_bottleneck", "expected_improvement", "load_best", "optimize",
    "persist_best", "predicted_bytes", "propose_config", "tune", "tune_offline",
]
