"""
Benchmark result rows and their aggregation (mean and standard error over
split seeds).
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union
import json
import logging
import re

import numpy as np
import pandas as pd

from ..core.errors import ContractError

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["dataset", "model_tag", "nll_mean", "nll_err", "rmse_mean", "rmse_err", "n"]
_TAG_PATTERN = re.compile(r"^(\d+)-")


@dataclass
class ResultRow:
    dataset: str
    split_seed: int
    model_tag: str
    flow: str
    layers: int
    m_inducing: int
    iterations: int
    nll: float
    rmse: float
    elapsed_s: float

    def __post_init__(self):
        match = _TAG_PATTERN.match(self.model_tag)
        if not match or int(match.group(1)) != self.layers:
            raise ContractError(f"model tag '{self.model_tag}' does not encode {self.layers} layers")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "ResultRow":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def read_results(path: Union[str, Path]) -> List[ResultRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                rows.append(ResultRow.from_dict(json.loads(line)))
    return rows


def summarize_results(rows: Sequence[ResultRow]) -> pd.DataFrame:
    """Mean and std / sqrt(n) (population std) per (dataset, model_tag)."""
    if not rows:
        raise ContractError("no result rows to summarize")
    frame = pd.DataFrame([asdict(r) for r in rows])

    def stderr(values: pd.Series) -> float:
        return float(np.std(values.to_numpy(), ddof=0) / np.sqrt(len(values)))

    grouped = frame.groupby(["dataset", "model_tag"], sort=True)
    summary = grouped.agg(
        nll_mean=("nll", "mean"),
        nll_err=("nll", stderr),
        rmse_mean=("rmse", "mean"),
        rmse_err=("rmse", stderr),
        n=("nll", "size"),
    ).reset_index()
    return summary[SUMMARY_COLUMNS]


def summary_path_for(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_summary.csv")


def write_results(rows: Iterable[ResultRow], path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write JSON lines to ``path`` and the summary CSV next to it."""
    rows = list(rows)
    if not rows:
        raise ContractError("no result rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(row.to_json() + "\n")
    summary_path = summary_path_for(path)
    summarize_results(rows).to_csv(summary_path, index=False, float_format="%.6g")
    logger.info(f"Wrote {len(rows)} result rows to {path} (summary: {summary_path})")
    return path, summary_path
