"""
Datasets, splits and benchmark results.
"""

from .datasets import Dataset, NormStats, SplitPlan, StandardizedSplit, gen_toy_step, load_csv, make_split
from .results import ResultRow, summarize_results, write_results

__all__ = [
    "Dataset",
    "NormStats",
    "SplitPlan",
    "StandardizedSplit",
    "gen_toy_step",
    "load_csv",
    "make_split",
    "ResultRow",
    "summarize_results",
    "write_results"
]
