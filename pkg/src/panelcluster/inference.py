"""Post-clustering standard errors, treating estimated memberships as true.

Slope covariances are plug-in sandwiches with a unit-clustered score
covariance, which stays consistent under arbitrary within-unit serial
correlation. For the GFE model the regressors are demeaned by group-period
cross-sectional means, and the per-period path variances come from the
cross-sectional average of squared residuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import EmptyGroupError, InvalidSpecError, SingularDesignError, SmallGroupWarning
from .estimator import FitResult, residuals
from .panel import PanelData

STAR_10, STAR_5, STAR_1 = 1.645, 1.960, 2.576


def _stars(t: float) -> str:
    a = abs(t)
    if a > STAR_1:
        return "***"
    if a > STAR_5:
        return "**"
    if a > STAR_10:
        return "*"
    return ""


def _invert_psd(s: np.ndarray, what: str) -> np.ndarray:
    ev = np.linalg.eigvalsh(s)
    if ev[-1] <= 0 or ev[0] <= ev[-1] * 1e-12:
        raise SingularDesignError(f"singular second-moment matrix for {what}")
    return np.linalg.inv(s)


def _sandwich(xg: np.ndarray, eg: np.ndarray, what: str) -> np.ndarray:
    nk, t, _ = xg.shape
    sig = np.einsum("itp,itq->pq", xg, xg) / (nk * t)
    sig_inv = _invert_psd(sig, what)
    scores = np.einsum("itp,it->ip", xg, eg)
    omega = scores.T @ scores / (nk * t)
    cov = sig_inv @ omega @ sig_inv / (nk * t)
    return (cov + cov.T) / 2.0


def slope_covariance(panel: PanelData, fit: FitResult, k: int) -> np.ndarray:
    """p x p sandwich covariance of the slope estimate for group k."""
    members = fit.grouping.members(k)
    if members.size == 0:
        raise EmptyGroupError(f"group {k} is empty")
    if members.size == 1:
        warnings.warn(
            f"group {k} has a single unit; its covariance estimate is "
            "unreliable", SmallGroupWarning, stacklevel=2,
        )
    e = residuals(panel, fit.grouping, fit.params)[members]
    return _sandwich(panel.x[members], e, f"group {k}")


def gfe_covariance(panel: PanelData, fit: FitResult,
                   k: int) -> tuple[np.ndarray, np.ndarray]:
    """Slope covariance on group-period demeaned regressors plus the
    T-vector of per-period path variances omega_kt."""
    if not fit.params.gfe:
        raise InvalidSpecError("gfe_covariance requires a GFE fit")
    members = fit.grouping.members(k)
    if members.size == 0:
        raise EmptyGroupError(f"group {k} is empty")
    xg = panel.x[members]
    xd = xg - xg.mean(axis=0)
    e = residuals(panel, fit.grouping, fit.params)[members]
    cov = _sandwich(xd, e, f"group {k} (demeaned)")
    omega_t = np.einsum("it,it->t", e, e) / members.size
    return cov, omega_t


@dataclass(frozen=True)
class CoefRow:
    group: int
    source_label: int
    n_k: int
    theta_hat: tuple[float, ...]
    se: tuple[float, ...]
    t_stat: tuple[float, ...]
    star: tuple[str, ...]


@dataclass(frozen=True)
class CoefTable:
    """Per-group estimates ordered so that group 1 is the largest."""

    rows: tuple[CoefRow, ...]
    regressor_names: tuple[str, ...]

    def to_frame(self) -> pd.DataFrame:
        recs = []
        for row in self.rows:
            for j, name in enumerate(self.regressor_names):
                recs.append(
                    {
                        "group": row.group,
                        "n_k": row.n_k,
                        "regressor": name,
                        "theta_hat": row.theta_hat[j],
                        "se": row.se[j],
                        "t_stat": row.t_stat[j],
                        "star": row.star[j],
                    }
                )
        return pd.DataFrame(recs)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_text(self) -> str:
        """Aligned table: one estimates line and one (se) line per group."""
        width = 14
        names = self.regressor_names
        lines = ["".join(["group".ljust(10)] + [n.rjust(width) for n in names])]
        for row in self.rows:
            est = "".join(
                [f"{row.group} (n={row.n_k})".ljust(10)]
                + [f"{th:.3f}{st}".rjust(width)
                   for th, st in zip(row.theta_hat, row.star)]
            )
            ses = "".join(
                [" ".ljust(10)] + [f"({s:.3f})".rjust(width) for s in row.se]
            )
            lines.append(est)
            lines.append(ses)
        return "\n".join(lines)


def display_order(fit: FitResult) -> list[int]:
    """Source labels sorted by descending group size (ties: smaller label)."""
    sizes = fit.grouping.sizes()
    return sorted(range(1, fit.params.k + 1), key=lambda g: (-sizes[g - 1], g))


def coef_table(panel: PanelData, fit: FitResult,
               regressor_names: tuple[str, ...] | None = None) -> CoefTable:
    """Slopes, standard errors, t-statistics, and significance stars.

    Groups are displayed largest first. Zero standard errors with nonzero
    estimates report an infinite t-statistic.
    """
    p = panel.n_regressors
    if regressor_names is None:
        regressor_names = tuple(f"x{j + 1}" for j in range(p))
    sizes = fit.grouping.sizes()
    rows = []
    for rank, g in enumerate(display_order(fit), start=1):
        if fit.params.gfe:
            cov, _ = gfe_covariance(panel, fit, g)
        else:
            cov = slope_covariance(panel, fit, g)
        theta = fit.params.thetas[g - 1]
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
        t_stat = np.empty(p)
        for j in range(p):
            if se[j] > 0:
                t_stat[j] = theta[j] / se[j]
            else:
                t_stat[j] = np.inf if theta[j] != 0 else 0.0
        rows.append(
            CoefRow(
                group=rank,
                source_label=g,
                n_k=int(sizes[g - 1]),
                theta_hat=tuple(float(v) for v in theta),
                se=tuple(float(v) for v in se),
                t_stat=tuple(float(v) for v in t_stat),
                star=tuple(_stars(v) for v in t_stat),
            )
        )
    return CoefTable(rows=tuple(rows), regressor_names=tuple(regressor_names))


@dataclass(frozen=True)
class GfeBands:
    """Pointwise path estimates with se = sqrt(omega_kt / N_k)."""

    labels: tuple[int, ...]
    mu_hat: np.ndarray  # (K, T), row order follows `labels`
    se: np.ndarray      # (K, T)

    def to_frame(self) -> pd.DataFrame:
        recs = []
        for i, g in enumerate(self.labels):
            for t in range(self.mu_hat.shape[1]):
                recs.append(
                    {
                        "group": g,
                        "period": t + 1,
                        "mu_hat": self.mu_hat[i, t],
                        "se": self.se[i, t],
                    }
                )
        return pd.DataFrame(recs)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def gfe_bands(panel: PanelData, fit: FitResult) -> GfeBands:
    """Standard errors for every group-period path value of a GFE fit."""
    if not fit.params.gfe:
        raise InvalidSpecError("gfe_bands requires a GFE fit")
    sizes = fit.grouping.sizes()
    k, t = fit.params.mus.shape
    mu = np.empty((k, t))
    se = np.empty((k, t))
    labels = []
    for i, g in enumerate(range(1, k + 1)):
        _, omega_t = gfe_covariance(panel, fit, g)
        mu[i] = fit.params.mus[g - 1]
        se[i] = np.sqrt(np.maximum(omega_t, 0.0) / sizes[g - 1])
        labels.append(g)
    return GfeBands(labels=tuple(labels), mu_hat=mu, se=se)
