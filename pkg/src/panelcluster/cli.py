"""Command-line interface: fit, select, simulate, demean, report.

Every command writes its outputs plus a ``manifest.json`` recording the
resolved inputs, a digest over them, the seed, and per-phase timings. Result
files are a pure function of the manifest inputs; timings are the only
nondeterministic content and live in the manifest alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import pandas as pd

from . import __version__
from .errors import PanelClusterError
from .estimator import FitConfig, fit
from .inference import coef_table, display_order
from .panel import ColumnSchema, load_panel_csv, save_panel_csv, within_transform
from .report import render_report
from .selection import PenaltyKind, select_k_detailed
from .simulate import DgpSpec, derive_seed, run_scenario

_PENALTY_CHOICES = ("bn", "bic", "mic1", "mic2")


def _default_seed() -> int:
    return int(os.environ.get("PANELCLUSTER_SEED", "0"))


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


class _Timer:
    def __init__(self):
        self.phases: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def lap(self, name: str) -> None:
        t1 = time.perf_counter()
        self.phases[name] = round(t1 - self._t0, 6)
        self._t0 = t1


def _write_manifest(out_dir: Path, command: str, inputs: dict,
                    seed: int, timer: _Timer) -> Path:
    body = {"command": command, "inputs": inputs, "seed": seed,
            "artifact_version": __version__}
    digest = _sha256_bytes(json.dumps(body, sort_keys=True).encode())
    manifest = {**body, "config_hash": digest, "timings": timer.phases}
    path = out_dir / "manifest.json"
    _write_json(path, manifest)
    return path


def _report_written(paths: list[Path]) -> None:
    for p in paths:
        print(f"wrote {p}")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise PanelClusterError("config file must hold a JSON object")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    if flag is not None:
        return flag
    if key in cfg and cfg[key] is not None:
        return cfg[key]
    return default


def _resolve_schema(panel_path: Path, args, cfg: dict) -> ColumnSchema:
    unit = _pick(args.unit_col, cfg, "unit_col", "unit")
    period = _pick(args.period_col, cfg, "period_col", "period")
    outcome = _pick(args.outcome_col, cfg, "outcome_col", "y")
    raw = _pick(args.regressor_cols, cfg, "regressor_cols", None)
    if raw is None:
        header = list(pd.read_csv(panel_path, nrows=0).columns)
        regressors = [c for c in header if c not in (unit, period, outcome)]
    elif isinstance(raw, str):
        regressors = [c.strip() for c in raw.split(",") if c.strip()]
    else:
        regressors = list(raw)
    return ColumnSchema(unit=unit, period=period, outcome=outcome,
                        regressors=regressors)


def _panel_arguments(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--panel", help="long-format panel CSV")
    sub.add_argument("--unit-col", default=None)
    sub.add_argument("--period-col", default=None)
    sub.add_argument("--outcome-col", default=None)
    sub.add_argument("--regressor-cols", default=None,
                     help="comma-separated regressor columns "
                          "(default: every remaining column)")
    sub.add_argument("--config", default=None,
                     help="JSON config file; flags override its entries")


def _common_fit_arguments(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--gfe", action=argparse.BooleanOptionalAction,
                     default=None, help="group-by-period fixed effects")
    sub.add_argument("--within", action=argparse.BooleanOptionalAction,
                     default=None, help="within-transform before estimation")
    sub.add_argument("--starts", type=int, default=None,
                     help="number of random starts (default 1000)")
    sub.add_argument("--max-iter", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None,
                     help="default: $PANELCLUSTER_SEED or 0")
    sub.add_argument("--jobs", type=int, default=1)
    sub.add_argument("--output-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelcluster",
        description="Least-squares clustering of panel-data models with "
                    "latent group structure",
    )
    parser.add_argument("--version", action="version",
                        version=f"panelcluster {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="estimate a K-group model")
    _panel_arguments(p_fit)
    p_fit.add_argument("--k", type=int, default=None, help="number of groups")
    _common_fit_arguments(p_fit)

    p_sel = subs.add_parser("select", help="select the number of groups")
    _panel_arguments(p_sel)
    p_sel.add_argument("--kmin", type=int, default=None)
    p_sel.add_argument("--kmax", type=int, default=None)
    p_sel.add_argument("--penalty", choices=_PENALTY_CHOICES, default=None)
    _common_fit_arguments(p_sel)

    p_sim = subs.add_parser("simulate", help="run Monte Carlo scenarios")
    p_sim.add_argument("--config", required=True,
                       help="JSON scenario config (required)")
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--figures", action="store_true",
                       help="also render report figures")
    p_sim.add_argument("--output-dir", default=".")

    p_dem = subs.add_parser("demean", help="within-transform a panel CSV")
    _panel_arguments(p_dem)
    p_dem.add_argument("--output-dir", default=".")

    p_rep = subs.add_parser("report", help="render figures from a summary CSV")
    p_rep.add_argument("--summary", required=True, help="path to summary.csv")
    p_rep.add_argument("--output-dir", default=".")
    return parser


def _load_panel(args, cfg: dict, timer: _Timer):
    panel_path = _pick(args.panel, cfg, "panel", None)
    if panel_path is None:
        raise PanelClusterError("--panel (or a config entry) is required")
    panel_path = Path(panel_path)
    if not panel_path.exists():
        raise PanelClusterError(f"no such file: {panel_path}")
    schema = _resolve_schema(panel_path, args, cfg)
    panel = load_panel_csv(panel_path, schema)
    timer.lap("load")
    return panel_path, schema, panel


def _display_grouping_frame(panel, result) -> pd.DataFrame:
    order = display_order(result)
    rank_of = {src: i + 1 for i, src in enumerate(order)}
    units = panel.unit_ids or tuple(f"u{i + 1}" for i in range(panel.n_units))
    return pd.DataFrame(
        {"unit": list(units),
         "label": [rank_of[g] for g in result.grouping.labels]}
    )


def cmd_fit(args) -> int:
    timer = _Timer()
    cfg = _load_config_file(args.config)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel_path, schema, panel = _load_panel(args, cfg, timer)

    k = _pick(args.k, cfg, "k", None)
    if k is None:
        raise PanelClusterError("--k is required for fit")
    gfe = bool(_pick(args.gfe, cfg, "gfe", False))
    within = bool(_pick(args.within, cfg, "within", False))
    starts = int(_pick(args.starts, cfg, "starts", 1000))
    max_iter = int(_pick(args.max_iter, cfg, "max_iter", 1000))
    seed = int(_pick(args.seed, cfg, "seed", _default_seed()))

    if within:
        panel = within_transform(panel)
    fit_config = FitConfig(k=int(k), gfe=gfe, n_starts=starts,
                           max_iter=max_iter, seed=seed)
    result = fit(panel, fit_config, jobs=args.jobs)
    timer.lap("compute")

    table = coef_table(panel, result, regressor_names=tuple(schema.regressors))
    coef_path = out_dir / "coefficients.csv"
    table.to_csv(coef_path)
    grouping_path = out_dir / "grouping.csv"
    _display_grouping_frame(panel, result).to_csv(grouping_path, index=False)

    order = display_order(result)
    sizes = result.grouping.sizes()
    fit_json = {
        "k": int(k), "gfe": gfe, "within": within,
        "n_starts": starts, "max_iter": max_iter, "seed": seed,
        "ssr": result.ssr, "sigma2_hat": result.sigma2_hat,
        "converged": result.converged,
        "iterations_used": result.iterations_used,
        "start_index_of_best": result.start_index_of_best,
        "n_starts_failed": result.n_starts_failed,
        "group_sizes": [int(sizes[g - 1]) for g in order],
        "thetas": [list(map(float, result.params.thetas[g - 1])) for g in order],
        "mus": ([list(map(float, result.params.mus[g - 1])) for g in order]
                if result.params.gfe else None),
    }
    fit_path = out_dir / "fit.json"
    _write_json(fit_path, fit_json)

    inputs = {
        "panel": str(panel_path), "panel_sha256": _sha256_file(panel_path),
        "schema": {"unit": schema.unit, "period": schema.period,
                   "outcome": schema.outcome,
                   "regressors": list(schema.regressors)},
        "k": int(k), "gfe": gfe, "within": within, "starts": starts,
        "max_iter": max_iter,
    }
    timer.lap("write")
    manifest = _write_manifest(out_dir, "fit", inputs, seed, timer)
    _report_written([coef_path, grouping_path, fit_path, manifest])
    return 0


def cmd_select(args) -> int:
    timer = _Timer()
    cfg = _load_config_file(args.config)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel_path, schema, panel = _load_panel(args, cfg, timer)

    k_min = int(_pick(args.kmin, cfg, "k_min", 2))
    k_max = _pick(args.kmax, cfg, "k_max", None)
    if k_max is None:
        raise PanelClusterError("--kmax is required for select")
    pen_name = _pick(args.penalty, cfg, "penalty", None)
    if pen_name is None:
        raise PanelClusterError("--penalty is required for select")
    gfe = bool(_pick(args.gfe, cfg, "gfe", False))
    within = bool(_pick(args.within, cfg, "within", False))
    starts = int(_pick(args.starts, cfg, "starts", 1000))
    max_iter = int(_pick(args.max_iter, cfg, "max_iter", 1000))
    seed = int(_pick(args.seed, cfg, "seed", _default_seed()))

    if within:
        panel = within_transform(panel)
    fit_config = FitConfig(k=k_min, gfe=gfe, n_starts=starts,
                           max_iter=max_iter, seed=seed)
    table, fits = select_k_detailed(panel, k_min, int(k_max),
                                    PenaltyKind.parse(pen_name), fit_config,
                                    jobs=args.jobs)
    timer.lap("compute")

    ic_csv = out_dir / "ic_table.csv"
    table.to_csv(ic_csv)
    ic_json = out_dir / "ic_table.json"
    _write_json(ic_json, table.to_dict())
    grouping_path = out_dir / "grouping.csv"
    best = fits[table.selected_k]
    _display_grouping_frame(panel, best).to_csv(grouping_path, index=False)

    inputs = {
        "panel": str(panel_path), "panel_sha256": _sha256_file(panel_path),
        "schema": {"unit": schema.unit, "period": schema.period,
                   "outcome": schema.outcome,
                   "regressors": list(schema.regressors)},
        "k_min": k_min, "k_max": int(k_max), "penalty": pen_name,
        "gfe": gfe, "within": within, "starts": starts, "max_iter": max_iter,
    }
    timer.lap("write")
    manifest = _write_manifest(out_dir, "select", inputs, seed, timer)
    _report_written([ic_csv, ic_json, grouping_path, manifest])
    return 0


def _as_list(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def cmd_simulate(args) -> int:
    timer = _Timer()
    with open(args.config) as fh:
        cfg = json.load(fh)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dgp = cfg["dgp"]
    ns = [int(v) for v in _as_list(cfg["n"])]
    alphas = [float(v) for v in _as_list(cfg["alpha"])]
    penalties = [PenaltyKind.parse(p) for p in cfg["penalties"]]
    reps = int(args.reps if args.reps is not None else cfg.get("reps", 100))
    seed = int(args.seed if args.seed is not None else
               cfg.get("seed", _default_seed()))
    k_min = int(cfg.get("k_min", 2))
    k_max = int(cfg.get("k_max", 5))
    starts = int(cfg.get("starts", 1000))
    max_iter = int(cfg.get("max_iter", 1000))
    gfe = cfg.get("gfe")
    if gfe is None:
        gfe = dgp == "gfe3"
    timer.lap("load")

    def periods_for(n: int) -> list[int]:
        if "t" in cfg and cfg["t"] is not None:
            return [int(v) for v in _as_list(cfg["t"])]
        ratios = _as_list(cfg["t_over_n"])
        return [int(round(n * float(r))) for r in ratios]

    summaries, replications = [], []
    fully_failed = 0
    cell = 0
    for n in ns:
        for t in periods_for(n):
            for alpha in alphas:
                spec = DgpSpec(
                    dgp=dgp, n=n, t=t, alpha=alpha,
                    burn_in=int(cfg.get("burn_in", 100)),
                    within=cfg.get("within"),
                    noise_scale=float(cfg.get("noise_scale", 1.0)),
                    c_alpha=cfg.get("c_alpha"),
                )
                fit_config = FitConfig(
                    k=3, gfe=bool(gfe), n_starts=starts, max_iter=max_iter,
                    seed=derive_seed(seed, cell, 1),
                )
                result = run_scenario(
                    spec, penalties, reps, fit_config,
                    base_seed=derive_seed(seed, cell, 0),
                    k_min=k_min, k_max=k_max, jobs=args.jobs,
                )
                summaries.append(result.summary_frame())
                replications.append(result.replications_frame())
                if result.n_failed == result.n_reps:
                    fully_failed += 1
                cell += 1
    summary = pd.concat(summaries, ignore_index=True)
    repl = pd.concat(replications, ignore_index=True)
    timer.lap("compute")

    summary_path = out_dir / "summary.csv"
    summary.to_csv(summary_path, index=False)
    repl_path = out_dir / "replications.csv"
    repl.to_csv(repl_path, index=False)
    written = [summary_path, repl_path]
    if args.figures:
        written.extend(render_report(summary, out_dir))

    inputs = {"scenario_config": str(args.config),
              "scenario_sha256": _sha256_file(Path(args.config)),
              "reps": reps, "k_min": k_min, "k_max": k_max,
              "starts": starts, "gfe": bool(gfe)}
    timer.lap("write")
    written.append(_write_manifest(out_dir, "simulate", inputs, seed, timer))
    _report_written(written)
    if fully_failed:
        print(f"error: {fully_failed} scenario cell(s) fully failed",
              file=sys.stderr)
        return 1
    return 0


def cmd_demean(args) -> int:
    timer = _Timer()
    cfg = _load_config_file(args.config)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel_path, schema, panel = _load_panel(args, cfg, timer)
    demeaned = within_transform(panel)
    timer.lap("compute")
    out_path = out_dir / "demeaned.csv"
    save_panel_csv(demeaned, out_path, schema)
    inputs = {
        "panel": str(panel_path), "panel_sha256": _sha256_file(panel_path),
        "schema": {"unit": schema.unit, "period": schema.period,
                   "outcome": schema.outcome,
                   "regressors": list(schema.regressors)},
    }
    timer.lap("write")
    manifest = _write_manifest(out_dir, "demean", inputs, 0, timer)
    _report_written([out_path, manifest])
    return 0


def cmd_report(args) -> int:
    timer = _Timer()
    summary = pd.read_csv(args.summary)
    timer.lap("load")
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = render_report(summary, out_dir)
    inputs = {"summary": str(args.summary),
              "summary_sha256": _sha256_file(Path(args.summary))}
    timer.lap("write")
    written.append(_write_manifest(out_dir, "report", inputs, 0, timer))
    _report_written(written)
    return 0


_HANDLERS = {
    "fit": cmd_fit,
    "select": cmd_select,
    "simulate": cmd_simulate,
    "demean": cmd_demean,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (PanelClusterError, OSError, json.JSONDecodeError, KeyError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
