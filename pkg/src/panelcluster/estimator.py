"""Group-wise OLS, the assignment step, and the iterative k-means estimator.

The estimator alternates two exact steps: pooled OLS within each group
(optionally with group-by-period intercepts) and reassignment of every unit
to the group whose parameters give it the smallest time-summed squared
residual. Multi-start wraps the alternation in many independent random
initial groupings and keeps the best run.

All multi-start work runs through a batched engine that carries every start
of a block through the same vectorized iteration; per-unit sufficient
statistics make the slopes-only update independent of T.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateStartError,
    EmptyGroupError,
    EstimationError,
    InvalidSpecError,
    SingularDesignError,
)
from .panel import Grouping, PanelData

# Starts are processed in fixed-size blocks so that batched floating-point
# reductions see identical operands no matter how many worker processes the
# caller uses; this is what makes results byte-identical across --jobs.
_BLOCK_SIZE = 256
_EIG_RTOL = 1e-12
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class GroupParams:
    """Per-group slopes (K x p) and, for the GFE model, paths (K x T)."""

    thetas: np.ndarray
    mus: np.ndarray | None = None
    gfe: bool = False

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=np.float64)
        if thetas.ndim != 2:
            raise InvalidSpecError("thetas must be a K x p matrix")
        if not np.isfinite(thetas).all():
            raise InvalidSpecError("thetas contain non-finite values")
        if self.gfe != (self.mus is not None):
            raise InvalidSpecError("mus must be present exactly when gfe is set")
        thetas = thetas.copy()
        thetas.setflags(write=False)
        object.__setattr__(self, "thetas", thetas)
        if self.mus is not None:
            mus = np.asarray(self.mus, dtype=np.float64)
            if mus.ndim != 2 or mus.shape[0] != thetas.shape[0]:
                raise InvalidSpecError("mus must be a K x T matrix")
            if not np.isfinite(mus).all():
                raise InvalidSpecError("mus contain non-finite values")
            mus = mus.copy()
            mus.setflags(write=False)
            object.__setattr__(self, "mus", mus)

    @property
    def k(self) -> int:
        return self.thetas.shape[0]

    @property
    def p(self) -> int:
        return self.thetas.shape[1]


@dataclass(frozen=True)
class FitConfig:
    """Settings for one multi-start k-means estimation."""

    k: int
    gfe: bool = False
    n_starts: int = 1000
    max_iter: int = 1000
    seed: int = 0
    ssr_tol: float = 1e-12

    def __post_init__(self):
        if self.k < 1:
            raise InvalidSpecError(f"k must be >= 1, got {self.k}")
        if self.n_starts < 1:
            raise InvalidSpecError(f"n_starts must be >= 1, got {self.n_starts}")
        if self.max_iter < 1:
            raise InvalidSpecError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.ssr_tol < 0:
            raise InvalidSpecError("ssr_tol must be >= 0")


@dataclass(frozen=True)
class FitResult:
    """Best-of-multistart estimate with convergence diagnostics."""

    params: GroupParams
    grouping: Grouping
    ssr: float
    sigma2_hat: float
    converged: bool
    iterations_used: int
    start_index_of_best: int
    n_starts_failed: int = 0
    n_repairs: int = 0
    ssr_trace: tuple[tuple[float, float], ...] | None = None


def residuals(panel: PanelData, grouping: Grouping, params: GroupParams) -> np.ndarray:
    """N x T residual matrix of the grouped model at the given parameters."""
    th = params.thetas[grouping.labels - 1]  # (N, p)
    fitted = np.einsum("ntp,np->nt", panel.x, th)
    if params.gfe:
        fitted = fitted + params.mus[grouping.labels - 1]
    return panel.y - fitted


def _check_pd(s: np.ndarray, what: str) -> None:
    ev = np.linalg.eigvalsh(s)
    if ev[-1] <= 0 or ev[0] <= ev[-1] * _EIG_RTOL:
        raise SingularDesignError(f"singular design matrix for {what}")


def group_ols(panel: PanelData, grouping: Grouping, gfe: bool = False) -> GroupParams:
    """Exact least-squares parameters for a fixed grouping.

    Without GFE each group's slope solves the pooled normal equations over
    its members. With GFE the slopes come from OLS on group-by-period
    demeaned data and the paths are recovered as mu_kt = ybar_kt -
    xbar_kt' theta_k, where the bars are cross-sectional means within the
    group at period t.
    """
    if grouping.n_units != panel.n_units:
        raise InvalidSpecError("grouping length does not match panel N")
    k, p, t = grouping.k, panel.n_regressors, panel.n_periods
    thetas = np.empty((k, p))
    mus = np.empty((k, t)) if gfe else None
    for g in range(1, k + 1):
        members = grouping.members(g)
        if members.size == 0:
            raise EmptyGroupError(f"group {g} is empty")
        xg = panel.x[members]
        yg = panel.y[members]
        if gfe:
            xbar = xg.mean(axis=0)
            ybar = yg.mean(axis=0)
            xg = xg - xbar
            yg = yg - ybar
        s = np.einsum("itp,itq->pq", xg, xg)
        v = np.einsum("itp,it->p", xg, yg)
        _check_pd(s, f"group {g}")
        thetas[g - 1] = np.linalg.solve(s, v)
        if gfe:
            mus[g - 1] = ybar - xbar @ thetas[g - 1]
    return GroupParams(thetas=thetas, mus=mus, gfe=gfe)


def assign(panel: PanelData, params: GroupParams) -> Grouping:
    """Give each unit the label minimizing its time-summed squared residual.

    Ties go to the smallest label.
    """
    res = panel.y[:, :, None] - np.einsum("ntp,kp->ntk", panel.x, params.thetas)
    if params.gfe:
        res = res - params.mus.T[None, :, :]
    ssr_nk = np.einsum("ntk,ntk->nk", res, res)
    return Grouping(labels=ssr_nk.argmin(axis=1) + 1, k=params.k)


def match_labels(estimated: Grouping, truth: Grouping) -> np.ndarray:
    """Permutation of 1..K aligning estimated labels with the truth.

    Entry e-1 is the true-space label assigned to estimated label e; the
    permutation minimizes the number of misclassified units, found by
    enumerating all K! permutations (exact for K <= 8).
    """
    if estimated.k != truth.k:
        raise InvalidSpecError(
            f"group counts differ: {estimated.k} vs {truth.k}"
        )
    if estimated.n_units != truth.n_units:
        raise InvalidSpecError("groupings have different N")
    k = estimated.k
    if k > 8:
        raise InvalidSpecError("exact label matching supports K <= 8")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (estimated.labels - 1, truth.labels - 1), 1)
    best_perm, best_agree = None, -1
    for perm in itertools.permutations(range(k)):
        agree = int(confusion[np.arange(k), perm].sum())
        if agree > best_agree:
            best_agree = agree
            best_perm = perm
    return np.asarray(best_perm, dtype=np.int64) + 1


# ---------------------------------------------------------------------------
# Batched multi-start engine
# ---------------------------------------------------------------------------


def _prepare_stats(panel: PanelData, gfe: bool) -> dict:
    x, y = panel.x, panel.y
    n, t, p = x.shape
    stats = {
        "n": n,
        "t": t,
        "p": p,
        "gfe": gfe,
        "A2": np.einsum("ntp,ntq->npq", x, x).reshape(n, p * p),
        "b": np.einsum("ntp,nt->np", x, y),
        "c": np.einsum("nt,nt->n", y, y),
    }
    if gfe:
        stats["y"] = np.ascontiguousarray(y)
        stats["Xf"] = np.ascontiguousarray(x.reshape(n, t * p))
        stats["yT"] = np.ascontiguousarray(y.T)
        stats["XnpT"] = np.ascontiguousarray(
            x.transpose(0, 2, 1).reshape(n * p, t).T
        )
    return stats


def _row_counts(labels: np.ndarray, k: int) -> np.ndarray:
    s = labels.shape[0]
    flat = labels + k * np.arange(s)[:, None]
    return np.bincount(flat.ravel(), minlength=s * k).reshape(s, k)


def _repair_row(labels_row: np.ndarray, counts_row: np.ndarray,
                contrib_row: np.ndarray) -> int:
    """Fill empty groups in place; returns repair count, -1 if unrepairable.

    The donor is the largest group (ties: smallest label) and the moved unit
    is its largest current SSR contributor (ties: lowest unit index).
    """
    repairs = 0
    while True:
        empties = np.flatnonzero(counts_row == 0)
        if empties.size == 0:
            return repairs
        donor = int(np.argmax(counts_row))
        if counts_row[donor] < 2:
            return -1
        members = np.flatnonzero(labels_row == donor)
        mover = members[int(np.argmax(contrib_row[members]))]
        labels_row[mover] = empties[0]
        counts_row[donor] -= 1
        counts_row[empties[0]] += 1
        repairs += 1


def _lloyd_block(stats: dict, k: int, labels: np.ndarray, max_iter: int,
                 ssr_tol: float, trace: bool = False) -> dict:
    """Run the alternation on a block of starts; labels are 0-based (S, N)."""
    n, p, gfe = stats["n"], stats["p"], stats["gfe"]
    a2, b, c = stats["A2"], stats["b"], stats["c"]
    s_total = labels.shape[0]
    eye = np.eye(p)

    out_labels = labels.copy()
    out_ssr = np.full(s_total, np.inf)
    out_iters = np.zeros(s_total, dtype=np.int64)
    out_conv = np.zeros(s_total, dtype=bool)
    out_fail = np.zeros(s_total, dtype=bool)
    out_repairs = np.zeros(s_total, dtype=np.int64)
    traces = [[] for _ in range(s_total)] if trace else None

    active = np.arange(s_total)
    cur = labels.astype(np.int64, copy=True)
    prev_ssr = np.full(s_total, np.inf)

    for it in range(1, max_iter + 1):
        lab = cur[active]
        sa = lab.shape[0]
        onehot = (lab[:, :, None] == np.arange(k)).astype(np.float64)
        mt = np.ascontiguousarray(onehot.transpose(0, 2, 1)).reshape(sa * k, n)
        counts = mt.sum(axis=1).reshape(sa, k)

        sxx = (mt @ a2).reshape(sa, k, p, p)
        sxy = (mt @ b).reshape(sa, k, p)
        if gfe:
            ybar = (mt @ stats["y"]).reshape(sa, k, -1) / counts[:, :, None]
            xbar = (mt @ stats["Xf"]).reshape(sa, k, -1, p) / counts[:, :, None, None]
            sxx = sxx - counts[:, :, None, None] * np.einsum(
                "sktp,sktq->skpq", xbar, xbar
            )
            sxy = sxy - counts[:, :, None] * np.einsum("sktp,skt->skp", xbar, ybar)

        ev = np.linalg.eigvalsh(sxx)
        bad_sk = (ev[..., -1] <= 0.0) | (ev[..., 0] <= ev[..., -1] * _EIG_RTOL)
        bad_s = bad_sk.any(axis=1)
        if bad_s.any():
            sxx = np.where(bad_sk[:, :, None, None], eye, sxx)
            sxy = np.where(bad_sk[:, :, None], 0.0, sxy)

        th = np.linalg.solve(sxx, sxy[..., None])[..., 0]
        if gfe:
            mus = ybar - np.einsum("sktp,skp->skt", xbar, th)

        # SSR of every unit under every group's parameters, via per-unit
        # sufficient statistics: ssr = c - 2 theta'b + theta'A theta (+ GFE
        # terms involving the paths).
        thth = np.einsum("skp,skq->skpq", th, th).reshape(sa * k, p * p)
        quad = (thth @ a2.T).reshape(sa, k, n)
        lin = (th.reshape(sa * k, p) @ b.T).reshape(sa, k, n)
        ssr_kn = c[None, None, :] - 2.0 * lin + quad
        if gfe:
            mus_f = mus.reshape(sa * k, -1)
            u = (mus_f @ stats["yT"]).reshape(sa, k, n)
            w = (mus_f @ stats["XnpT"]).reshape(sa, k, n, p)
            v = np.einsum("sknp,skp->skn", w, th)
            ssr_kn += -2.0 * u + 2.0 * v + (mus * mus).sum(-1)[:, :, None]
        np.maximum(ssr_kn, 0.0, out=ssr_kn)

        if trace:
            at_old = np.take_along_axis(ssr_kn, lab[:, None, :], axis=1)[:, 0, :]
            ssr_after_ols = at_old.sum(axis=1)

        new_lab = ssr_kn.argmin(axis=1)
        unit_best = np.take_along_axis(ssr_kn, new_lab[:, None, :], axis=1)[:, 0, :]
        ssr_new = unit_best.sum(axis=1)

        same = (new_lab == lab).all(axis=1)
        prev = prev_ssr[active]
        plateau = np.isfinite(prev) & (
            (prev - ssr_new) <= ssr_tol * np.maximum(1.0, prev)
        )

        counts_new = _row_counts(new_lab, k)
        needs_repair = np.flatnonzero((counts_new == 0).any(axis=1) & ~bad_s)
        repair_fail = np.zeros(sa, dtype=bool)
        for s_loc in needs_repair:
            done = _repair_row(new_lab[s_loc], counts_new[s_loc], unit_best[s_loc])
            if done < 0:
                repair_fail[s_loc] = True
            else:
                out_repairs[active[s_loc]] += done

        if trace:
            for s_loc in range(sa):
                traces[active[s_loc]].append(
                    (float(ssr_after_ols[s_loc]), float(ssr_new[s_loc]))
                )

        failed_now = bad_s | repair_fail
        finished = same | plateau | failed_now
        idx = active
        out_labels[idx] = new_lab
        out_ssr[idx] = ssr_new
        out_iters[idx] = it
        sel = idx[finished]
        out_conv[sel] = ~failed_now[finished]
        out_fail[sel] = failed_now[finished]
        out_ssr[idx[failed_now]] = np.inf

        keep = ~finished
        active = idx[keep]
        if active.size == 0:
            break
        cur[active] = new_lab[keep]
        prev_ssr[active] = ssr_new[keep]

    # leftovers hit max_iter: converged stays False, labels/ssr already stored
    return {
        "labels": out_labels,
        "ssr": out_ssr,
        "iterations": out_iters,
        "converged": out_conv,
        "failed": out_fail,
        "repairs": out_repairs,
        "traces": traces,
    }


def _lloyd_worker(args):
    stats, k, labels, max_iter, ssr_tol = args
    res = _lloyd_block(stats, k, labels, max_iter, ssr_tol)
    res.pop("traces")
    return res


def _draw_initial_labels(seed: int, k: int, n_starts: int, n: int) -> np.ndarray:
    """(S, N) matrix of 0-based uniform labels, redrawn until every start
    uses all K labels."""
    ss = np.random.SeedSequence(entropy=int(seed) & _U64, spawn_key=(k,))
    rng = np.random.default_rng(ss)
    labels = rng.integers(0, k, size=(n_starts, n))
    if k == 1:
        return labels
    for _ in range(100000):
        present = (labels[:, :, None] == np.arange(k)).any(axis=1)
        bad = ~present.all(axis=1)
        if not bad.any():
            return labels
        labels[bad] = rng.integers(0, k, size=(int(bad.sum()), n))
    raise EstimationError("could not draw initial groupings covering all labels")


def _finalize(panel: PanelData, config: FitConfig, labels0: np.ndarray,
              iterations: int, converged: bool, start_index: int,
              n_failed: int, n_repairs: int,
              trace: tuple | None) -> FitResult:
    grouping = Grouping(labels=labels0 + 1, k=config.k)
    params = group_ols(panel, grouping, gfe=config.gfe)
    e = residuals(panel, grouping, params)
    ssr = float(np.einsum("nt,nt->", e, e))
    nt = panel.n_units * panel.n_periods
    return FitResult(
        params=params,
        grouping=grouping,
        ssr=ssr,
        sigma2_hat=ssr / nt,
        converged=converged,
        iterations_used=iterations,
        start_index_of_best=start_index,
        n_starts_failed=n_failed,
        n_repairs=n_repairs,
        ssr_trace=trace,
    )


def kmeans_once(panel: PanelData, config: FitConfig, init: Grouping) -> FitResult:
    """One run of the alternation from a given initial grouping.

    Stops when the membership vector repeats, when the SSR improvement drops
    below ``ssr_tol``, or at ``max_iter`` (only then is ``converged`` False).
    The result carries a per-iteration (post-OLS, post-assignment) SSR trace.
    """
    if init.n_units != panel.n_units:
        raise InvalidSpecError("init grouping length does not match panel N")
    if init.k != config.k:
        raise InvalidSpecError("init grouping K does not match config.k")
    if config.k > panel.n_units:
        raise InvalidSpecError("k cannot exceed the number of units")
    stats = _prepare_stats(panel, config.gfe)
    labels = (init.labels - 1).astype(np.int64)[None, :].copy()
    counts = _row_counts(labels, config.k)[0]
    repairs0 = 0
    if (counts == 0).any():
        # no parameters exist yet, so "current SSR contribution" is the
        # unit's outcome energy
        repairs0 = _repair_row(labels[0], counts, stats["c"])
        if repairs0 < 0:
            raise DegenerateStartError("initial grouping cannot be repaired")
    res = _lloyd_block(stats, config.k, labels, config.max_iter,
                       config.ssr_tol, trace=True)
    if res["failed"][0]:
        raise DegenerateStartError(
            "start reached a singular or unrepairable configuration"
        )
    return _finalize(
        panel, config, res["labels"][0],
        int(res["iterations"][0]), bool(res["converged"][0]), 0,
        n_failed=0, n_repairs=int(res["repairs"][0]) + repairs0,
        trace=tuple(res["traces"][0]),
    )


def fit(panel: PanelData, config: FitConfig, jobs: int = 1) -> FitResult:
    """Best-of-multistart estimate over ``config.n_starts`` random starts.

    Initial groupings are i.i.d. uniform over the labels (redrawn if a label
    is absent), drawn once up front from a stream seeded by (seed, k), so the
    result does not depend on scheduling. Ties on SSR go to the smallest
    start index. Starts hitting singular designs or unrepairable empty groups
    are discarded; if every start fails, estimation fails.
    """
    if config.k > panel.n_units:
        raise InvalidSpecError(
            f"k={config.k} exceeds the number of units N={panel.n_units}"
        )
    stats = _prepare_stats(panel, config.gfe)
    inits = _draw_initial_labels(config.seed, config.k, config.n_starts,
                                 panel.n_units)
    blocks = [
        inits[lo:lo + _BLOCK_SIZE]
        for lo in range(0, config.n_starts, _BLOCK_SIZE)
    ]
    if jobs > 1 and len(blocks) > 1:
        tasks = [(stats, config.k, blk, config.max_iter, config.ssr_tol)
                 for blk in blocks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_lloyd_worker, tasks))
    else:
        results = []
        for blk in blocks:
            res = _lloyd_block(stats, config.k, blk, config.max_iter,
                               config.ssr_tol)
            res.pop("traces")
            results.append(res)

    ssr = np.concatenate([r["ssr"] for r in results])
    failed = np.concatenate([r["failed"] for r in results])
    labels = np.concatenate([r["labels"] for r in results])
    iters = np.concatenate([r["iterations"] for r in results])
    conv = np.concatenate([r["converged"] for r in results])
    reps = np.concatenate([r["repairs"] for r in results])

    if failed.all():
        raise EstimationError("estimation failed: every start was degenerate")
    best = int(np.argmin(np.where(failed, np.inf, ssr)))
    return _finalize(
        panel, config, labels[best], int(iters[best]), bool(conv[best]),
        best, n_failed=int(failed.sum()), n_repairs=int(reps[best]),
        trace=None,
    )
