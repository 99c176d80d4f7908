"""Information criterion over a range of group counts and penalty variants.

IC(K) = sigma2_hat(K) + n(K) * sigma_tilde2 * h, minimized over K. Four
penalty schedules are provided; they differ only in how fast h shrinks with
the panel dimensions, which is what governs under- versus over-estimation of
the number of groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import EstimationError, SelectionError
from .estimator import FitConfig, FitResult, fit
from .panel import PanelData

# ICs that differ by less than this relative share of the outcome's second
# moment are treated as ties (broken toward the smallest K). This makes the
# argmin well defined when several K values fit exactly, where raw SSRs are
# rounding noise.
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class PenaltyKind:
    """Penalty schedule: one of bn, bic, mic1, mic2, or a custom constant."""

    name: str
    custom_h: float | None = None

    _KNOWN = ("bn", "bic", "mic1", "mic2", "custom")

    def __post_init__(self):
        if self.name not in self._KNOWN:
            raise SelectionError(
                f"unknown penalty '{self.name}', expected one of {self._KNOWN}"
            )
        if self.name == "custom":
            if self.custom_h is None or not self.custom_h > 0:
                raise SelectionError("custom penalty requires h > 0")
        elif self.custom_h is not None:
            raise SelectionError("custom_h is only valid with name='custom'")

    @classmethod
    def parse(cls, text: str) -> "PenaltyKind":
        return cls(name=text.strip().lower())


BN = PenaltyKind("bn")
BIC = PenaltyKind("bic")
MIC1 = PenaltyKind("mic1")
MIC2 = PenaltyKind("mic2")


def penalty_value(kind: PenaltyKind, n: int, t: int) -> float:
    """Evaluate the penalty h at panel dimensions (N, T). Requires N, T >= 2."""
    if n < 2 or t < 2:
        raise SelectionError(f"penalty needs N, T >= 2, got N={n}, T={t}")
    if kind.name == "custom":
        return float(kind.custom_h)
    nt = float(n) * float(t)
    if kind.name == "bn":
        m = min(n, t)
        return math.log(m) / m
    if kind.name == "bic":
        return math.log(nt) / nt
    if kind.name == "mic1":
        return math.log(n) / n if n <= t else 0.5 * math.log(nt) / n
    # mic2: the mic1 schedule divided by T
    return 2.0 * math.log(n) / nt if n <= t else math.log(nt) / nt


def n_params(k: int, n: int, p: int, t: int, gfe: bool,
             include_unit_count: bool = True) -> int:
    """Parameter count under K groups: N + pK, or N + (p+T)K with GFE.

    The N term never changes the argmin over K; ``include_unit_count=False``
    drops it for callers who prefer the slope-only count.
    """
    if min(k, n, p, t) < 1:
        raise SelectionError("n_params requires all counts >= 1")
    base = n if include_unit_count else 0
    per_group = p + t if gfe else p
    return base + per_group * k


def sigma_tilde2(fit_at_kmax: FitResult, n: int, t: int, p: int, k_max: int,
                 gfe: bool, include_unit_count: bool = True) -> float:
    """Variance scale for the penalty, from the most generous fit:
    NT * sigma2_hat(K_max) / (NT - n(K_max))."""
    nt = n * t
    nk = n_params(k_max, n, p, t, gfe, include_unit_count)
    if nt <= nk:
        raise SelectionError(
            f"infeasible K_max: NT={nt} <= n(K_max)={nk}; "
            "reduce k_max or use a longer panel"
        )
    return nt * fit_at_kmax.sigma2_hat / (nt - nk)


@dataclass(frozen=True)
class ICRow:
    k: int
    sigma2_hat: float
    n_params: int
    h: float
    ic: float
    failed: bool = False


@dataclass(frozen=True)
class ICTable:
    """Per-K criterion values and the selected group count."""

    rows: tuple[ICRow, ...]
    selected_k: int
    k_min: int
    k_max: int
    penalty: str
    sigma_tilde2: float

    def row(self, k: int) -> ICRow:
        return self.rows[k - self.k_min]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "k": [r.k for r in self.rows],
                "sigma2_hat": [r.sigma2_hat for r in self.rows],
                "n_params": [r.n_params for r in self.rows],
                "h": [r.h for r in self.rows],
                "ic": [r.ic for r in self.rows],
                "failed": [r.failed for r in self.rows],
            }
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_dict(self) -> dict:
        return {
            "penalty": self.penalty,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "selected_k": self.selected_k,
            "sigma_tilde2": self.sigma_tilde2,
            "rows": [
                {
                    "k": r.k,
                    "sigma2_hat": r.sigma2_hat,
                    "n_params": r.n_params,
                    "h": r.h,
                    "ic": r.ic,
                    "failed": r.failed,
                }
                for r in self.rows
            ],
        }


def _table_from_sigma2(sigma2_by_k: dict[int, float], k_min: int, k_max: int,
                       n: int, t: int, p: int, gfe: bool, kind: PenaltyKind,
                       s_tilde2: float, tie_scale: float,
                       include_unit_count: bool = True) -> ICTable:
    """Assemble the IC table given per-K averaged SSRs (NaN marks a failed K)."""
    h = penalty_value(kind, n, t)
    rows = []
    for k in range(k_min, k_max + 1):
        s2 = sigma2_by_k.get(k, float("nan"))
        nk = n_params(k, n, p, t, gfe, include_unit_count)
        if not math.isfinite(s2):
            rows.append(ICRow(k=k, sigma2_hat=float("nan"), n_params=nk,
                              h=h, ic=float("inf"), failed=True))
        else:
            rows.append(ICRow(k=k, sigma2_hat=s2, n_params=nk, h=h,
                              ic=s2 + nk * s_tilde2 * h))
    finite = [r for r in rows if not r.failed]
    if not finite:
        raise EstimationError("every K in the range failed to fit")
    best = min(r.ic for r in finite)
    tol = _TIE_RTOL * max(tie_scale, 1e-300)
    selected = next(r.k for r in rows if not r.failed and r.ic <= best + tol)
    return ICTable(rows=tuple(rows), selected_k=selected, k_min=k_min,
                   k_max=k_max, penalty=kind.name, sigma_tilde2=s_tilde2)


def select_k_detailed(panel: PanelData, k_min: int, k_max: int,
                      kind: PenaltyKind, config: FitConfig, jobs: int = 1,
                      include_unit_count: bool = True,
                      ) -> tuple[ICTable, dict[int, FitResult]]:
    """Like :func:`select_k` but also returns the per-K fits."""
    if not 1 <= k_min <= k_max <= panel.n_units:
        raise SelectionError(
            f"need 1 <= k_min <= k_max <= N, got [{k_min}, {k_max}] with "
            f"N={panel.n_units}"
        )
    n, t, p = panel.n_units, panel.n_periods, panel.n_regressors
    fits: dict[int, FitResult] = {}
    sigma2: dict[int, float] = {}
    for k in range(k_min, k_max + 1):
        try:
            fits[k] = fit(panel, replace(config, k=k), jobs=jobs)
            sigma2[k] = fits[k].sigma2_hat
        except EstimationError:
            sigma2[k] = float("nan")
    if k_max not in fits:
        raise EstimationError(
            "the K_max fit failed, so sigma_tilde2 cannot be formed"
        )
    s_tilde2 = sigma_tilde2(fits[k_max], n, t, p, k_max, config.gfe,
                            include_unit_count)
    tie_scale = float(np.einsum("nt,nt->", panel.y, panel.y)) / (n * t)
    table = _table_from_sigma2(sigma2, k_min, k_max, n, t, p, config.gfe,
                               kind, s_tilde2, tie_scale, include_unit_count)
    return table, fits


def select_k(panel: PanelData, k_min: int, k_max: int, kind: PenaltyKind,
             config: FitConfig, jobs: int = 1,
             include_unit_count: bool = True) -> ICTable:
    """Fit every K in [k_min, k_max] and pick the IC minimizer.

    sigma_tilde2 comes from the single K_max fit; IC ties go to the smallest
    K. A K whose every start is degenerate is reported with IC = +inf and
    flagged, and excluded from the argmin.
    """
    table, _ = select_k_detailed(panel, k_min, k_max, kind, config, jobs,
                                 include_unit_count)
    return table
