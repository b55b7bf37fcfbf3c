"""Analysis-ready trial data: per-patient treatment, outcomes at the five
visits, initiation indicators, and an optional counterfactual channel that
only the oracle and benchmark comparator may read."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

OBSERVED_TIMES = (0.0, 0.5, 1.0, 1.5, 2.0)
IE_TIMES = (0.5, 1.0, 1.5)

CSV_COLUMNS = [
    "patient_id", "treat", "y0", "y05", "y1", "y15", "y2",
    "sym05", "sym1", "sym15",
]


@dataclass
class TrialData:
    treat: np.ndarray
    y0: np.ndarray
    y05: np.ndarray
    y1: np.ndarray
    y15: np.ndarray
    y2: np.ndarray
    sym05: np.ndarray
    sym1: np.ndarray
    sym15: np.ndarray
    y2_star: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for name in ("treat", "y0", "y05", "y1", "y15", "y2", "sym05", "sym1", "sym15"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.y2_star is not None:
            self.y2_star = np.asarray(self.y2_star, dtype=float)
        validate_trial(self)

    @property
    def n(self) -> int:
        return self.treat.shape[0]

    def y_at(self, t: float) -> np.ndarray:
        return {0.0: self.y0, 0.5: self.y05, 1.0: self.y1, 1.5: self.y15, 2.0: self.y2}[t]

    def sym_at(self, t: float) -> np.ndarray:
        return {0.5: self.sym05, 1.0: self.sym1, 1.5: self.sym15}[t]

    def to_frame(self, include_y2_star: bool | None = None) -> pd.DataFrame:
        if include_y2_star is None:
            include_y2_star = self.y2_star is not None
        d = pd.DataFrame({
            "patient_id": np.arange(self.n, dtype=int),
            "treat": self.treat.astype(int),
            "y0": _maybe_int(self.y0),
            "y05": _maybe_int(self.y05),
            "y1": _maybe_int(self.y1),
            "y15": _maybe_int(self.y15),
            "y2": _maybe_int(self.y2),
            "sym05": self.sym05.astype(int),
            "sym1": self.sym1.astype(int),
            "sym15": self.sym15.astype(int),
        })
        if include_y2_star:
            if self.y2_star is None:
                raise ValueError("no counterfactual channel present")
            d["y2_star"] = _maybe_int(self.y2_star)
        return d

    def to_csv(self, path, include_y2_star: bool | None = None) -> None:
        self.to_frame(include_y2_star).to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "TrialData":
        missing = [c for c in CSV_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"dataset is missing columns: {', '.join(missing)}")
        kwargs = {c: frame[c].to_numpy(dtype=float) for c in CSV_COLUMNS if c != "patient_id"}
        if "y2_star" in frame.columns:
            kwargs["y2_star"] = frame["y2_star"].to_numpy(dtype=float)
        return cls(**kwargs)

    @classmethod
    def from_csv(cls, path) -> "TrialData":
        return cls.from_frame(pd.read_csv(path))


def _maybe_int(a: np.ndarray):
    """Write integer-valued score columns as integers, others verbatim."""
    rounded = np.round(a)
    if np.allclose(a, rounded, atol=0, rtol=0):
        return rounded.astype(int)
    return a


def validate_trial(trial: TrialData) -> None:
    """Structural checks shared by every estimator entry point."""
    n = trial.treat.shape[0]
    for name in ("y0", "y05", "y1", "y15", "y2", "sym05", "sym1", "sym15"):
        arr = getattr(trial, name)
        if arr.shape != (n,):
            raise ValueError(f"field {name} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"field {name} contains non-finite values")
    if trial.y2_star is not None and trial.y2_star.shape != (n,):
        raise ValueError("y2_star length mismatch")
    for name in ("treat", "sym05", "sym1", "sym15"):
        arr = getattr(trial, name)
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError(f"field {name} must be 0/1")
    totals = trial.sym05 + trial.sym1 + trial.sym15
    if np.any(totals > 1):
        raise ValueError("initiation indicators must be one-hot per patient")
