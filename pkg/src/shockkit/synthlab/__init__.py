"""Synthetic activity generator and brute-force reference oracles."""

from .generator import (
    ChangepointInjection,
    GroundTruth,
    SynthSpec,
    generate,
    generate_store,
    random_corpus,
    simulate_weekly_counts,
)
from .oracles import oracle_changepoint_exact, oracle_permutation_exact, oracle_recount

__all__ = [
    "ChangepointInjection",
    "GroundTruth",
    "SynthSpec",
    "generate",
    "generate_store",
    "oracle_changepoint_exact",
    "oracle_permutation_exact",
    "oracle_recount",
    "random_corpus",
    "simulate_weekly_counts",
]
