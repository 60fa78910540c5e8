"""
Regression datasets: CSV ingestion, train/test splits, standardization and
the toy step-function generator.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import logging

import numpy as np
import pandas as pd

from ..core.errors import ContractError, IngestionError

logger = logging.getLogger(__name__)

DEFAULT_TEST_FRACTION = 0.1
MIN_SPLIT_SIZE = 10
TOY_STEP_EDGE = 0.67


@dataclass
class Dataset:
    """Features and targets in raw units."""
    x: np.ndarray
    y: np.ndarray
    feature_names: List[str] = field(default_factory=list)
    target_name: str = "y"
    name: str = "dataset"

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractError(f"{self.name}: {self.x.shape[0]} feature rows but {self.y.shape[0]} targets")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.x.shape[1])]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


@dataclass
class NormStats:
    mean_x: np.ndarray
    std_x: np.ndarray
    mean_y: float
    std_y: float

    @classmethod
    def from_train(cls, x: np.ndarray, y: np.ndarray) -> "NormStats":
        std_x = x.std(axis=0)
        constant = std_x <= 0.0
        if np.any(constant):
            logger.warning(f"Constant feature column(s) {np.flatnonzero(constant).tolist()}: using std 1")
            std_x = np.where(constant, 1.0, std_x)
        std_y = float(y.std())
        if std_y <= 0.0:
            logger.warning("Constant target on the training rows: using std 1")
            std_y = 1.0
        return cls(x.mean(axis=0), std_x, float(y.mean()), std_y)

    def standardize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean_x) / self.std_x

    def standardize_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean_y) / self.std_y

    def unstandardize_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.std_y + self.mean_y

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_x": [float(v) for v in self.mean_x],
            "std_x": [float(v) for v in self.std_x],
            "mean_y": float(self.mean_y),
            "std_y": float(self.std_y),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(
            np.asarray(data["mean_x"], dtype=np.float64),
            np.asarray(data["std_x"], dtype=np.float64),
            float(data["mean_y"]),
            float(data["std_y"]),
        )


@dataclass
class SplitPlan:
    seed: int
    test_fraction: float
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def sizes(self):
        return len(self.train_idx), len(self.test_idx)


@dataclass
class StandardizedSplit:
    """Train and test arrays standardized with statistics of the train rows only."""
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    norm: NormStats
    plan: SplitPlan
    name: str = "dataset"

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.x_test.shape[0]


def load_csv(path: Union[str, Path], target: Optional[Union[str, int]] = None) -> Dataset:
    """
    Read a headed, comma-separated numeric file.

    ``target`` is a column name or position; the last column by default.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError("Data file not found", path=path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True, skip_blank_lines=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise IngestionError(f"Cannot parse CSV: {e}", path=path)

    if frame.shape[1] < 2:
        raise IngestionError(f"Need at least 2 columns, found {frame.shape[1]}", path=path)
    cells = frame.fillna("").apply(lambda column: column.str.strip())
    # Row i of the unfiltered frame sits on line i + 2 (line 1 is the header).
    cells = cells[~cells.eq("").all(axis=1)]
    if cells.shape[0] == 0:
        raise IngestionError("No data rows", path=path)

    numeric = cells.apply(lambda column: pd.to_numeric(column, errors="coerce"))
    bad = ~np.isfinite(numeric.to_numpy(dtype=np.float64))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise IngestionError(
            f"Non-numeric or non-finite value {cells.iat[row, col]!r} in column '{cells.columns[col]}'",
            path=path, line=int(cells.index[row]) + 2,
        )

    columns = list(frame.columns)
    if target is None:
        target_col = columns[-1]
    elif isinstance(target, int) or (isinstance(target, str) and target.lstrip("-").isdigit()
                                     and target not in columns):
        try:
            target_col = columns[int(target)]
        except IndexError:
            raise IngestionError(f"Target column index {target} out of range", path=path)
    elif target in columns:
        target_col = target
    else:
        raise IngestionError(f"Target column '{target}' not found (columns: {', '.join(columns)})", path=path)

    features = [c for c in columns if c != target_col]
    dataset = Dataset(
        numeric[features].to_numpy(dtype=np.float64),
        numeric[target_col].to_numpy(dtype=np.float64),
        feature_names=features,
        target_name=target_col,
        name=path.stem,
    )
    logger.info(f"Loaded {path}: N={dataset.n}, D={dataset.input_dim}, target='{target_col}'")
    return dataset


def write_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write features then target with 17 significant digits (exact float64 round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.x, columns=dataset.feature_names)
    frame[dataset.target_name] = dataset.y
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {dataset.n} rows to {path}")
    return path


def make_split(n: int, seed: int, test_fraction: float = DEFAULT_TEST_FRACTION) -> SplitPlan:
    """Seeded uniform permutation; the first round(test_fraction * n) indices are the test set."""
    if n < MIN_SPLIT_SIZE:
        raise ContractError(f"Need at least {MIN_SPLIT_SIZE} rows to split, got {n}")
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    permutation = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return SplitPlan(seed, test_fraction, np.sort(permutation[n_test:]), np.sort(permutation[:n_test]))


def standardize(dataset: Dataset, plan: SplitPlan) -> StandardizedSplit:
    x_train, y_train = dataset.x[plan.train_idx], dataset.y[plan.train_idx]
    norm = NormStats.from_train(x_train, y_train)
    return StandardizedSplit(
        norm.standardize_x(x_train),
        norm.standardize_y(y_train),
        norm.standardize_x(dataset.x[plan.test_idx]),
        norm.standardize_y(dataset.y[plan.test_idx]),
        norm,
        plan,
        name=dataset.name,
    )


def unstandardize_y(values: np.ndarray, norm: NormStats) -> np.ndarray:
    return norm.unstandardize_y(np.asarray(values, dtype=np.float64))


def toy_step_function(x: np.ndarray) -> np.ndarray:
    """-1 below -0.67, 0 on [-0.67, 0.67), +1 from 0.67 on."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < -TOY_STEP_EDGE, -1.0, np.where(x < TOY_STEP_EDGE, 0.0, 1.0))


def gen_toy_step(n: int = 100, noise_sd: float = 0.05, seed: int = 0) -> Dataset:
    """Inputs uniform on [-2, 2], targets a three-level step plus Gaussian noise."""
    if n < 20:
        raise ContractError(f"Toy dataset needs n >= 20, got {n}")
    if noise_sd < 0.0:
        raise ContractError("noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=n)
    y = toy_step_function(x) + noise_sd * rng.standard_normal(n)
    return Dataset(x[:, None], y, feature_names=["x"], target_name="y", name="toy_step")
