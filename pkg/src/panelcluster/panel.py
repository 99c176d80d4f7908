"""Balanced panel representation, CSV ingestion, and within-transformation.

A panel holds an outcome ``y`` indexed by (unit, period) and a regressor
tensor ``x`` indexed by (unit, period, regressor). Everything downstream
assumes the panel is balanced: every (unit, period) cell present and finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import InvalidSpecError, PanelFormatError


@dataclass(frozen=True)
class PanelData:
    """Balanced N x T panel with p regressors per observation.

    Parameters
    ----------
    y : ndarray, shape (N, T)
        Outcome, row i = unit i in canonical order.
    x : ndarray, shape (N, T, p)
        Regressors.
    unit_ids : tuple of str, optional
        Unit labels in row order.
    period_ids : tuple, optional
        Period labels in column order.
    """

    y: np.ndarray
    x: np.ndarray
    unit_ids: tuple[str, ...] | None = None
    period_ids: tuple | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if y.ndim != 2:
            raise PanelFormatError(f"y must be 2-D (N, T), got shape {y.shape}")
        if x.ndim != 3:
            raise PanelFormatError(f"x must be 3-D (N, T, p), got shape {x.shape}")
        if x.shape[:2] != y.shape:
            raise PanelFormatError(
                f"x leading dims {x.shape[:2]} do not match y shape {y.shape}"
            )
        n, t = y.shape
        p = x.shape[2]
        if n < 1 or t < 1 or p < 1:
            raise PanelFormatError(f"need N, T, p >= 1, got N={n}, T={t}, p={p}")
        if not np.isfinite(y).all():
            raise PanelFormatError("y contains non-finite values")
        if not np.isfinite(x).all():
            raise PanelFormatError("x contains non-finite values")
        if self.unit_ids is not None and len(self.unit_ids) != n:
            raise PanelFormatError("unit_ids length does not match N")
        if self.period_ids is not None and len(self.period_ids) != t:
            raise PanelFormatError("period_ids length does not match T")
        y = y.copy()
        x = x.copy()
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if self.unit_ids is not None:
            object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        if self.period_ids is not None:
            object.__setattr__(self, "period_ids", tuple(self.period_ids))

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class Grouping:
    """Group membership vector: labels[i] in 1..k for each of N units."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise InvalidSpecError("labels must be a 1-D vector")
        if self.k < 1:
            raise InvalidSpecError(f"k must be >= 1, got {self.k}")
        if labels.size and (labels.min() < 1 or labels.max() > self.k):
            raise InvalidSpecError(
                f"labels must lie in 1..{self.k}, found range "
                f"[{labels.min()}, {labels.max()}]"
            )
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_units(self) -> int:
        return self.labels.size

    def sizes(self) -> np.ndarray:
        """Group sizes indexed 0..k-1 for labels 1..k."""
        return np.bincount(self.labels, minlength=self.k + 1)[1:]

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class ColumnSchema:
    """Column mapping for long-format CSV panels."""

    unit: str
    period: str
    outcome: str
    regressors: Sequence[str]

    def __post_init__(self):
        if not self.regressors:
            raise PanelFormatError("schema needs at least one regressor column")
        object.__setattr__(self, "regressors", tuple(self.regressors))


def _to_float(series: pd.Series, column: str) -> np.ndarray:
    out = pd.to_numeric(series, errors="coerce")
    bad = out.isna() & ~series.isna()
    bad |= series.isna()
    if bad.any():
        row = int(bad.idxmax()) + 2  # header is line 1
        raise PanelFormatError(
            f"column '{column}': non-numeric or missing value at CSV row {row}"
        )
    return out.to_numpy(dtype=np.float64)


def _sorted_periods(values: pd.Series) -> list:
    """Ascending period order; numeric when every period parses as a number."""
    uniq = pd.unique(values)
    numeric = pd.to_numeric(pd.Series(uniq), errors="coerce")
    if not numeric.isna().any():
        order = np.argsort(numeric.to_numpy(), kind="stable")
        return [uniq[i] for i in order]
    return sorted(uniq, key=str)


def load_panel_csv(path: str | Path, schema: ColumnSchema) -> PanelData:
    """Read a long-format CSV into a balanced panel.

    Units are sorted lexicographically by id and periods ascending; all
    downstream indices refer to this canonical order. Missing (unit, period)
    cells and duplicates are hard errors, no imputation.
    """
    path = Path(path)
    if not path.exists():
        raise PanelFormatError(f"no such file: {path}")
    df = pd.read_csv(path, keep_default_na=True, float_precision="round_trip")
    needed = [schema.unit, schema.period, schema.outcome, *schema.regressors]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise PanelFormatError(f"missing columns in {path.name}: {missing}")

    units = df[schema.unit].astype(str)
    periods = df[schema.period]

    dup = df.duplicated(subset=[schema.unit, schema.period], keep=False)
    if dup.any():
        i = int(dup.idxmax())
        raise PanelFormatError(
            f"duplicate (unit, period) = ({units.iloc[i]}, {periods.iloc[i]})"
        )

    unit_order = sorted(pd.unique(units))
    period_order = _sorted_periods(periods)
    n, t = len(unit_order), len(period_order)
    if len(df) != n * t:
        # locate one offending hole for the error message
        have = set(zip(units, periods.astype(str)))
        for u in unit_order:
            for per in period_order:
                if (u, str(per)) not in have:
                    raise PanelFormatError(
                        f"unbalanced panel: missing (unit={u}, period={per})"
                    )
        raise PanelFormatError("unbalanced panel")

    y_flat = _to_float(df[schema.outcome], schema.outcome)
    x_flat = np.column_stack(
        [_to_float(df[c], c) for c in schema.regressors]
    )

    uind = {u: i for i, u in enumerate(unit_order)}
    pind = {str(per): j for j, per in enumerate(period_order)}
    rows = units.map(uind).to_numpy()
    cols = periods.astype(str).map(pind).to_numpy()

    filled = np.zeros((n, t), dtype=bool)
    filled[rows, cols] = True
    if not filled.all():
        i, j = np.argwhere(~filled)[0]
        raise PanelFormatError(
            f"unbalanced panel: missing (unit={unit_order[i]}, period={period_order[j]})"
        )

    p = len(schema.regressors)
    y = np.empty((n, t))
    x = np.empty((n, t, p))
    y[rows, cols] = y_flat
    x[rows, cols, :] = x_flat
    return PanelData(y=y, x=x, unit_ids=tuple(unit_order), period_ids=tuple(period_order))


def save_panel_csv(panel: PanelData, path: str | Path,
                   schema: ColumnSchema | None = None) -> None:
    """Write a panel back to long-format CSV in canonical order."""
    n, t, p = panel.n_units, panel.n_periods, panel.n_regressors
    if schema is None:
        schema = ColumnSchema(
            unit="unit", period="period", outcome="y",
            regressors=tuple(f"x{j + 1}" for j in range(p)),
        )
    if len(schema.regressors) != p:
        raise PanelFormatError(
            f"schema has {len(schema.regressors)} regressors, panel has {p}"
        )
    units = panel.unit_ids or tuple(f"u{i + 1}" for i in range(n))
    periods = panel.period_ids or tuple(range(1, t + 1))
    data = {
        schema.unit: np.repeat(units, t),
        schema.period: np.tile(periods, n),
        schema.outcome: panel.y.reshape(-1),
    }
    for j, col in enumerate(schema.regressors):
        data[col] = panel.x[:, :, j].reshape(-1)
    pd.DataFrame(data).to_csv(path, index=False)


def within_transform(panel: PanelData) -> PanelData:
    """Subtract each unit's time mean from the outcome and every regressor.

    Removes additive individual fixed effects. Requires T >= 2; with a single
    period the transform would zero out the data.
    """
    if panel.n_periods < 2:
        raise PanelFormatError("degenerate within-transform: T must be >= 2")
    y = panel.y - panel.y.mean(axis=1, keepdims=True)
    x = panel.x - panel.x.mean(axis=1, keepdims=True)
    return PanelData(y=y, x=x, unit_ids=panel.unit_ids, period_ids=panel.period_ids)


# Scaling constants keeping the middle group comfortably sized at high alpha
# while the third group stays strictly increasing in alpha.
def default_scaling(alpha: float) -> float:
    if abs(alpha - 1.0) < 1e-9:
        return 0.4
    if abs(alpha - 0.9) < 1e-9:
        return 0.6
    if abs(alpha - 0.8) < 1e-9:
        return 0.8
    return 1.0


@dataclass(frozen=True)
class GroupSizeSpec:
    """Three-group size rule: N1 = N/k0, N3 = floor(c_alpha * N**alpha)."""

    n_total: int
    alpha: float
    k0: int = 3
    c_alpha: float | None = field(default=None)

    def __post_init__(self):
        if self.k0 != 3:
            raise InvalidSpecError("group-size rule is defined for k0 = 3 groups")
        if self.n_total < self.k0:
            raise InvalidSpecError(f"N={self.n_total} too small for {self.k0} groups")
        if self.n_total % self.k0 != 0:
            raise InvalidSpecError(
                f"N={self.n_total} must be divisible by k0={self.k0}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidSpecError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.c_alpha is not None and self.c_alpha <= 0:
            raise InvalidSpecError("c_alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.c_alpha if self.c_alpha is not None else default_scaling(self.alpha)


def simulated_group_sizes(spec: GroupSizeSpec) -> tuple[int, int, int]:
    """Group sizes (N1, N2, N3) summing exactly to N."""
    n = spec.n_total
    n1 = n // spec.k0
    n3 = math.floor(spec.scaling * n ** spec.alpha)
    n2 = n - n1 - n3
    if min(n1, n2, n3) < 1:
        raise InvalidSpecError(
            f"invalid group sizes (N1={n1}, N2={n2}, N3={n3}) for N={n}, "
            f"alpha={spec.alpha}"
        )
    return n1, n2, n3
