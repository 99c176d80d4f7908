"""Data generating processes, evaluation metrics, and the replication runner.

Three DGPs with three latent groups: a static panel, a dynamic panel with a
lagged outcome regressor, and a static panel with group-by-period effects.
Group sizes follow the N1 = N/3, N3 = floor(c_alpha * N**alpha) rule, so the
third group can be made asymptotically negligible.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import EstimationError, InvalidSpecError
from .estimator import FitConfig, FitResult, fit, match_labels
from .panel import Grouping, GroupSizeSpec, PanelData, simulated_group_sizes, within_transform
from .selection import PenaltyKind, _table_from_sigma2, sigma_tilde2

_U64 = (1 << 64) - 1

DGP_STATIC = "static1"
DGP_DYNAMIC = "dynamic2"
DGP_GFE = "gfe3"
_DGPS = (DGP_STATIC, DGP_DYNAMIC, DGP_GFE)

_STATIC_THETAS = np.array([[3.0, -3.0], [1.0, -2.0], [4.0, -1.0]])
_DYNAMIC_THETAS = np.array([[3.0, 0.2], [1.0, 0.5], [4.0, 0.8]])


def _default_mu_paths(t: int) -> np.ndarray:
    grid = np.arange(1, t + 1) / t
    return np.vstack([4.0 * grid, 2.0 * grid, np.full(t, 4.0)])


def derive_seed(base: int, *key: int) -> int:
    """Stable 64-bit seed derived from a base seed and an integer key path."""
    ss = np.random.SeedSequence(
        entropy=int(base) & _U64, spawn_key=tuple(int(k) for k in key)
    )
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design: DGP family, dimensions, and group-size rule."""

    dgp: str
    n: int
    t: int
    alpha: float
    thetas: np.ndarray | None = None
    mus: np.ndarray | None = None
    burn_in: int = 100
    within: bool | None = None  # None: on for static1/gfe3, off for dynamic2
    noise_scale: float = 1.0
    c_alpha: float | None = None

    def __post_init__(self):
        if self.dgp not in _DGPS:
            raise InvalidSpecError(f"unknown dgp '{self.dgp}', expected {_DGPS}")
        if self.t < 2:
            raise InvalidSpecError("DGPs need T >= 2")
        if self.burn_in < 0:
            raise InvalidSpecError("burn_in must be >= 0")
        if self.noise_scale < 0:
            raise InvalidSpecError("noise_scale must be >= 0")
        if self.mus is not None and self.dgp != DGP_GFE:
            raise InvalidSpecError("mus only apply to the gfe3 DGP")
        th = self.resolved_thetas()
        if th.shape != (3, 2):
            raise InvalidSpecError("thetas must be a 3 x 2 matrix")
        if self.dgp == DGP_DYNAMIC and (np.abs(th[:, 1]) >= 1).any():
            raise InvalidSpecError(
                "dynamic2 requires |theta_k2| < 1 for stationarity"
            )
        if self.mus is not None:
            mus = np.asarray(self.mus, dtype=np.float64)
            if mus.shape != (3, self.t):
                raise InvalidSpecError("mus must be a 3 x T matrix")

    def resolved_thetas(self) -> np.ndarray:
        if self.thetas is not None:
            return np.asarray(self.thetas, dtype=np.float64)
        return _DYNAMIC_THETAS if self.dgp == DGP_DYNAMIC else _STATIC_THETAS

    def resolved_mus(self) -> np.ndarray | None:
        if self.dgp != DGP_GFE:
            return None
        if self.mus is not None:
            return np.asarray(self.mus, dtype=np.float64)
        return _default_mu_paths(self.t)

    def resolved_within(self) -> bool:
        if self.within is not None:
            return self.within
        return self.dgp != DGP_DYNAMIC

    def uses_gfe_model(self) -> bool:
        return self.dgp == DGP_GFE

    def group_sizes(self) -> tuple[int, int, int]:
        return simulated_group_sizes(
            GroupSizeSpec(n_total=self.n, alpha=self.alpha, c_alpha=self.c_alpha)
        )


def generate(spec: DgpSpec, rep_seed: int, return_noise: bool = False):
    """Draw one panel and its true grouping.

    Returns (panel, truth) or (panel, truth, eps) with ``return_noise``; eps
    is the drawn disturbance matrix before any within-transformation.
    """
    sizes = spec.group_sizes()
    labels = np.repeat([1, 2, 3], sizes)
    truth = Grouping(labels=labels, k=3)
    th_rows = spec.resolved_thetas()[labels - 1]
    rng = np.random.default_rng(int(rep_seed) & _U64)
    n, t = spec.n, spec.t

    if spec.dgp == DGP_DYNAMIC:
        total = t + spec.burn_in
        x1 = rng.standard_normal((n, total))
        eps = spec.noise_scale * rng.standard_normal((n, total))
        y_path = np.zeros((n, total + 1))  # column 0: value before the burn-in
        for s in range(total):
            y_path[:, s + 1] = (
                th_rows[:, 0] * x1[:, s]
                + th_rows[:, 1] * y_path[:, s]
                + eps[:, s]
            )
        b = spec.burn_in
        x = np.stack([x1[:, b:], y_path[:, b:b + t]], axis=2)
        y = y_path[:, b + 1:]
        eps = eps[:, b:]
    else:
        x = rng.standard_normal((n, t, 2))
        eps = spec.noise_scale * rng.standard_normal((n, t))
        y = np.einsum("ntp,np->nt", x, th_rows) + eps
        if spec.dgp == DGP_GFE:
            y = y + spec.resolved_mus()[labels - 1]

    panel = PanelData(y=y, x=x)
    if spec.resolved_within():
        panel = within_transform(panel)
    if return_noise:
        return panel, truth, eps
    return panel, truth


def rmse_group3(fit_result: FitResult, truth: Grouping, spec: DgpSpec) -> float:
    """Root mean squared error over the units of the true third group.

    Each unit contributes the parameters of its own estimated group, so
    misclassified units carry wrong-group parameters. For the GFE DGP the
    path error enters under the same square root; when the data were
    within-transformed the comparable true path is demeaned over time.
    """
    if fit_result.params.k != 3:
        raise InvalidSpecError("rmse_group3 requires a K=3 fit")
    match_labels(fit_result.grouping, truth)  # validates dimensions
    members = truth.members(3)
    th_true = spec.resolved_thetas()[2]
    th_unit = fit_result.params.thetas[fit_result.grouping.labels[members] - 1]
    total = float(((th_unit - th_true) ** 2).sum(axis=1).mean())
    if spec.dgp == DGP_GFE:
        if not fit_result.params.gfe:
            raise InvalidSpecError("gfe3 RMSE needs a GFE fit")
        mu_true = spec.resolved_mus()[2]
        if spec.resolved_within():
            mu_true = mu_true - mu_true.mean()
        mu_unit = fit_result.params.mus[fit_result.grouping.labels[members] - 1]
        total += float(((mu_unit - mu_true) ** 2).mean())
    return math.sqrt(total)


@dataclass(frozen=True)
class ScenarioResult:
    """Aggregated Monte Carlo metrics for one simulation design."""

    spec: DgpSpec
    penalties: tuple[str, ...]
    n_reps: int
    n_failed: int
    mean_k_hat: dict[str, float]
    rmse_mean: float
    ppc: float
    per_rep: tuple[dict, ...]

    def replications_frame(self) -> pd.DataFrame:
        recs = []
        for rec in self.per_rep:
            for pen in self.penalties:
                recs.append(
                    {
                        "dgp": self.spec.dgp,
                        "n": self.spec.n,
                        "t": self.spec.t,
                        "alpha": self.spec.alpha,
                        "penalty": pen,
                        "rep": rec["rep"],
                        "failed": rec["failed"],
                        "k_hat": rec["k_hat"].get(pen, float("nan")),
                        "rmse": rec["rmse"],
                        "perfect": rec["perfect"],
                        "n_misclassified": rec["n_misclassified"],
                        "sigma2_k3": rec["sigma2_k3"],
                    }
                )
        return pd.DataFrame(recs)

    def summary_frame(self) -> pd.DataFrame:
        recs = []
        for pen in self.penalties:
            recs.append(
                {
                    "dgp": self.spec.dgp,
                    "n": self.spec.n,
                    "t": self.spec.t,
                    "alpha": self.spec.alpha,
                    "penalty": pen,
                    "n_reps": self.n_reps,
                    "n_failed": self.n_failed,
                    "mean_k_hat": self.mean_k_hat.get(pen, float("nan")),
                    "rmse_mean": self.rmse_mean,
                    "ppc": self.ppc,
                }
            )
        return pd.DataFrame(recs)


def _run_one_rep(args: tuple) -> dict:
    (spec, penalty_names, config, base_seed, rep, k_min, k_max) = args
    out = {
        "rep": rep,
        "failed": False,
        "k_hat": {},
        "rmse": float("nan"),
        "perfect": False,
        "n_misclassified": -1,
        "sigma2_k3": float("nan"),
    }
    try:
        panel, truth = generate(spec, derive_seed(base_seed, rep))
        rep_config = replace(config, seed=derive_seed(config.seed, rep, 1))
        n, t, p = panel.n_units, panel.n_periods, panel.n_regressors

        fits: dict[int, FitResult] = {}
        sigma2: dict[int, float] = {}
        for k in range(k_min, k_max + 1):
            try:
                fits[k] = fit(panel, replace(rep_config, k=k))
                sigma2[k] = fits[k].sigma2_hat
            except EstimationError:
                sigma2[k] = float("nan")
        if k_max not in fits:
            raise EstimationError("K_max fit failed")
        s_tilde2 = sigma_tilde2(fits[k_max], n, t, p, k_max, config.gfe)
        tie_scale = float(np.einsum("nt,nt->", panel.y, panel.y)) / (n * t)
        for pen in penalty_names:
            table = _table_from_sigma2(
                sigma2, k_min, k_max, n, t, p, config.gfe,
                PenaltyKind.parse(pen), s_tilde2, tie_scale,
            )
            out["k_hat"][pen] = table.selected_k

        fit3 = fits.get(3)
        if fit3 is None:
            fit3 = fit(panel, replace(rep_config, k=3))
        perm = match_labels(fit3.grouping, truth)
        relabeled = perm[fit3.grouping.labels - 1]
        mis = int((relabeled != truth.labels).sum())
        out["n_misclassified"] = mis
        out["perfect"] = mis == 0
        out["rmse"] = rmse_group3(fit3, truth, spec)
        out["sigma2_k3"] = fit3.sigma2_hat
    except Exception as exc:  # noqa: BLE001 - replication failures are data
        out["failed"] = True
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def run_scenario(spec: DgpSpec, penalties: list[PenaltyKind], n_reps: int,
                 config: FitConfig, base_seed: int, k_min: int = 2,
                 k_max: int = 5, jobs: int = 1) -> ScenarioResult:
    """Monte Carlo over independent replications of one design.

    Every replication draws its own derived seed, fits all K in
    [k_min, k_max] once, evaluates each penalty on the shared fits, and
    scores classification and accuracy metrics on the K=3 fit. Failed
    replications are recorded, not fatal.
    """
    if n_reps < 1:
        raise InvalidSpecError("n_reps must be >= 1")
    names = [p.name for p in penalties]
    gfe = spec.uses_gfe_model()
    if config.gfe != gfe:
        config = replace(config, gfe=gfe)
    tasks = [
        (spec, names, config, base_seed, rep, k_min, k_max)
        for rep in range(n_reps)
    ]
    if jobs > 1 and n_reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_one_rep, tasks))
    else:
        records = [_run_one_rep(t) for t in tasks]

    ok = [r for r in records if not r["failed"]]
    mean_k_hat = {}
    for pen in names:
        vals = [r["k_hat"][pen] for r in ok if pen in r["k_hat"]]
        mean_k_hat[pen] = float(np.mean(vals)) if vals else float("nan")
    rmses = [r["rmse"] for r in ok if math.isfinite(r["rmse"])]
    return ScenarioResult(
        spec=spec,
        penalties=tuple(names),
        n_reps=n_reps,
        n_failed=len(records) - len(ok),
        mean_k_hat=mean_k_hat,
        rmse_mean=float(np.mean(rmses)) if rmses else float("nan"),
        ppc=sum(1 for r in ok if r["perfect"]) / n_reps,
        per_rep=tuple(records),
    )
