"""Neural bridge sampling for rare-event probabilities."""

from .engine import AmsConfig, SurrogateConfig, estimate, extract_curve, run_ams, run_mc, run_neural_bridge
from .model import EstimateReport, ProblemSpec, RunConfig, make_problem, query

__all__ = [
    "AmsConfig",
    "EstimateReport",
    "ProblemSpec",
    "RunConfig",
    "SurrogateConfig",
    "estimate",
    "extract_curve",
    "make_problem",
    "query",
    "run_ams",
    "run_mc",
    "run_neural_bridge",
]
