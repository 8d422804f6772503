"""Command-line entry point: ``fatigue-sr <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 unusable expression structure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import CRITERIA, load_material, predict_dataset
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config, with_search
from .constfit import EmptyData, FitConfig, NoFiniteStart
from .constraints import BUDGET, NCONST, ConstraintConfig, check_sequence
from .dataio import (DatasetUnavailable, SchemaMismatch, compute_metrics, design_matrix, kfold_split,
                     load_conditions, load_dataset, preprocess_dr)
from .symlib import ExpressionError, Expression, evaluate, parse_structure, render, serialize
from .trainer import refit_structure, run_search, write_stats

EXIT_CONFIG, EXIT_DATA, EXIT_STRUCTURE = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


class Run:
    """Output directory plus the manifest describing how it was produced."""

    def __init__(self, args, cfg: RunConfig):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.artifacts: list[str] = []
        self.manifest = {
            "command": args.command,
            "argv": sys.argv[1:],
            "config_hash": config_hash(cfg),
            "seed": cfg.search.seed,
            "dataset": getattr(args, "data", None) or getattr(args, "conditions", None),
            "material": getattr(args, "material", None),
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "version": __version__,
        }

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def text(self, name: str, content: str) -> None:
        self.path(name).write_text(content if content.endswith("\n") else content + "\n")

    def finish(self, **extra) -> None:
        self.text("config.ini", dump_config(self.cfg))
        self.manifest.update(extra)
        self.manifest["artifacts"] = sorted(set(self.artifacts))
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2) + "\n")


def _material(name: str):
    try:
        return load_material(name)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"material: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"material: {exc}") from exc


def _records(name: str):
    try:
        return load_dataset(name)
    except (SchemaMismatch, DatasetUnavailable, FileNotFoundError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"data: {exc}") from exc


def _arrays(args, cfg: RunConfig):
    mat = _material(args.material)
    records = _records(args.data)
    X, y = design_matrix(preprocess_dr(records, mat, cfg.features))
    return mat, records, X, y


def _structure(text: str, cfg: RunConfig, need_constants: bool = False) -> Expression:
    path = Path(text)
    if path.is_file():
        text = path.read_text().strip()
    try:
        expr = parse_structure(text, cfg.search.library())
    except (ExpressionError, ValueError, KeyError, SyntaxError) as exc:
        raise CliError(EXIT_STRUCTURE, f"structure: cannot parse {text!r}: {exc}") from exc
    # only the hard caps apply to supplied structures; search-shape rules do not
    ccfg = ConstraintConfig(max(cfg.search.l, expr.function_count), cfg.search.N_const,
                            max_tokens=max(4 * cfg.search.l + 1, len(expr.tokens)))
    broken = [v for v in check_sequence(expr, ccfg) if v.split("@")[0] in (NCONST, BUDGET)]
    if expr.n_constants > cfg.search.N_const:
        raise CliError(EXIT_STRUCTURE, f"structure: {expr.n_constants} constants exceed N_const = "
                                       f"{cfg.search.N_const} ({', '.join(broken)})")
    if need_constants and expr.n_constants and len(expr.constants) != expr.n_constants:
        raise CliError(EXIT_STRUCTURE, "structure: constants are required (use the tokens=...; constants=... form)")
    return expr


def _metrics_report(title: str, metrics) -> str:
    return f"# {title}\n{metrics.report()}\n"


def _scatter(run: Run, name: str, observed, predicted) -> None:
    _write_csv(run.path(name), ("observed_cycles", "predicted_cycles"), zip(observed, predicted))


def cmd_search(args, cfg: RunConfig) -> int:
    cfg = with_search(cfg, N_epoch=args.epochs, augment_factor=args.augment_factor, stop_r2=args.stop_r2)
    _, _, X, y = _arrays(args, cfg)
    run = Run(args, cfg)
    hof, trace = run_search(cfg.search, (X, y), log=None if args.quiet else _progress)
    write_stats(trace, run.path("stats.csv"))
    lines = [f"{c.rmse!r}\t{c.r2!r}\t{serialize(c.expression)}" for c in hof.entries]
    run.text("hall_of_fame.txt", "# rmse\tr2\texpression\n" + "\n".join(lines))
    best = hof.best
    if best is not None:
        pred = np.exp(evaluate(best.expression, X)) if cfg.search.target_transform == "log_life" \
            else evaluate(best.expression, X)
        m = compute_metrics(y, pred)
        run.text("metrics.txt", _metrics_report(render(best.expression), m))
        _scatter(run, "scatter.csv", y, pred)
        print(f"best R2 = {best.r2:.6f}  RMSE = {best.rmse:.6g}")
        print(f"best expression: {render(best.expression, digits=6)}")
    else:
        print("no finite-reward expression found")
    run.finish(n_epochs_run=len(trace), batch_sizes={"augmented": cfg.search.batch_size(0),
                                                    "standard": cfg.search.N_size})
    return 0


def _progress(stats) -> None:
    print(f"epoch {stats.epoch:3d}  batch {stats.batch_size:6d}  elites {stats.n_elite:4d}  "
          f"best RMSE {stats.best_rmse:12.6g}  R2 {stats.best_r2:.5f}", flush=True)


def _predict_cycles(expr: Expression, X: np.ndarray, cfg: RunConfig) -> np.ndarray:
    out = evaluate(expr, X)
    if cfg.search.target_transform == "log_life":
        with np.errstate(over="ignore"):
            out = np.exp(out)
    return np.where(np.isfinite(out), out, np.nan)


def _fit_cfg(cfg: RunConfig) -> FitConfig:
    return cfg.search.fit_config(final=True)


def cmd_refit(args, cfg: RunConfig) -> int:
    structure = _structure(args.structure, cfg)
    _, _, X, y = _arrays(args, cfg)
    try:
        fit = refit_structure(structure, (X, y), _fit_cfg(cfg))
    except (NoFiniteStart, EmptyData) as exc:
        raise CliError(EXIT_STRUCTURE, f"structure: {exc}") from exc
    fitted = structure.with_constants(fit.constants)
    pred = _predict_cycles(fitted, X, cfg)
    run = Run(args, cfg)
    run.text("expression.txt", serialize(fitted))
    run.text("metrics.txt", _metrics_report(render(fitted), compute_metrics(y, pred)))
    _scatter(run, "scatter.csv", y, pred)
    run.finish(converged=fit.converged, restarts_used=fit.n_restarts_used)
    print(f"RMSE = {fit.rmse:.6g}  R2 = {fit.r2:.6f}")
    print(serialize(fitted))
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    expr = _structure(args.structure, cfg, need_constants=True)
    mat = _material(args.material)
    try:
        conds = load_conditions(args.conditions)
    except (SchemaMismatch, DatasetUnavailable, FileNotFoundError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"conditions: {exc}") from exc
    X, _ = design_matrix(preprocess_dr(conds, mat, cfg.features))
    pred = _predict_cycles(expr, X, cfg) if len(conds) else np.zeros(0)
    rows = []
    for c, n in zip(conds, pred):
        flag = "" if np.isfinite(n) and n >= 1 else ("NonFinite" if not np.isfinite(n) else "OutOfRange")
        rows.append((c.condition, c.omega_profile, n, flag))
        print(f"{c.condition}\t{n:.6g}\t{flag}")
    run = Run(args, cfg)
    _write_csv(run.path("predictions.csv"), ("condition", "omega_profile", "nf_cycles", "flag"), rows)
    run.finish()
    return 0


def cmd_baseline(args, cfg: RunConfig) -> int:
    crit = args.criterion.lower()
    if crit != "all" and crit not in CRITERIA:
        raise CliError(EXIT_CONFIG, f"criterion: unknown {args.criterion!r}; valid: {', '.join(CRITERIA)}, all")
    mat = _material(args.material)
    records = _records(args.data)
    observed = np.array([r.nf_cycles for r in records], dtype=float)
    run = Run(args, cfg)
    summary = []
    for name in (CRITERIA if crit == "all" else (crit,)):
        res = predict_dataset(name, records, mat, bm_s0=cfg.bm_s0)
        m = compute_metrics(observed, res.predicted)
        _write_csv(run.path(f"predictions_{name}.csv"), ("observed_cycles", "predicted_cycles", "flag"),
                   zip(observed, res.predicted, res.flags))
        note = f"\nwhs_k = {res.whs_k!r}" if res.whs_k is not None else ""
        run.text(f"metrics_{name}.txt", _metrics_report(name, m) + note)
        summary.append((name, m.rmse_cycles, m.r2, m.frac_within_2x, m.frac_within_3x, m.n_excluded))
        print(f"{name:9s} RMSE {m.rmse_cycles:12.6g}  R2 {m.r2:9.4f}  2x {m.frac_within_2x:.3f}  "
              f"3x {m.frac_within_3x:.3f}  excluded {m.n_excluded}")
    _write_csv(run.path("summary.csv"),
               ("criterion", "rmse_cycles", "r2", "frac_within_2x", "frac_within_3x", "n_excluded"), summary)
    run.finish()
    return 0


def crossval(structure: Expression, X: np.ndarray, y: np.ndarray, k: int, seed: int, fit_cfg: FitConfig,
             target: str = "log_life"):
    """Pooled out-of-fold predictions, one per record, and the fold index of each."""
    pred = np.full(len(y), np.nan)
    fold_of = np.full(len(y), -1)
    for i, (train, val) in enumerate(kfold_split(len(y), k, seed)):
        try:
            fit = refit_structure(structure, (X[train], y[train]), fit_cfg)
        except NoFiniteStart:
            continue
        out = evaluate(structure.with_constants(fit.constants), X[val])
        if target == "log_life":
            with np.errstate(over="ignore"):
                out = np.exp(out)
        pred[val] = out
        fold_of[val] = i
    return pred, fold_of


def cmd_crossval(args, cfg: RunConfig) -> int:
    structure = _structure(args.structure, cfg)
    _, _, X, y = _arrays(args, cfg)
    try:
        pred, fold_of = crossval(structure, X, y, args.k, cfg.search.seed, _fit_cfg(cfg),
                                 cfg.search.target_transform)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"k: {exc}") from exc
    m = compute_metrics(y, pred)
    run = Run(args, cfg)
    _write_csv(run.path("cv_predictions.csv"), ("record", "fold", "observed_cycles", "predicted_cycles"),
               zip(range(len(y)), fold_of, y, pred))
    run.text("metrics.txt", _metrics_report(f"{args.k}-fold cross-validation", m))
    run.finish(k=args.k)
    print(m.report())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--threads", type=int, help="worker threads for constant fitting")

    p = argparse.ArgumentParser(prog="fatigue-sr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", parents=[common], help="search for a life formula")
    s.add_argument("--data", required=True, help="dataset CSV or bundled name (data1, data2, data3)")
    s.add_argument("--material", required=True, help="material file or bundled name")
    s.add_argument("--epochs", type=int, help="override N_epoch")
    s.add_argument("--augment-factor", type=int, help="override the enlarged-batch multiplier")
    s.add_argument("--stop-r2", type=float, help="stop once the best R2 reaches this value")
    s.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    s.set_defaults(func=cmd_search)

    r = sub.add_parser("refit", parents=[common], help="fit a fixed structure's constants")
    r.add_argument("--structure", required=True, help="prefix tokens, infix text, or a file holding either")
    r.add_argument("--data", required=True)
    r.add_argument("--material", required=True)
    r.set_defaults(func=cmd_refit)

    q = sub.add_parser("predict", parents=[common], help="predict lives for operating conditions")
    q.add_argument("--structure", required=True, help="fitted expression (tokens=...; constants=...)")
    q.add_argument("--conditions", default="table5", help="conditions CSV or bundled 'table5'")
    q.add_argument("--material", required=True)
    q.set_defaults(func=cmd_predict)

    b = sub.add_parser("baseline", parents=[common], help="empirical multiaxial criteria")
    b.add_argument("--criterion", required=True, help=f"one of {', '.join(CRITERIA)}, all")
    b.add_argument("--data", required=True)
    b.add_argument("--material", required=True)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("crossval", parents=[common], help="k-fold cross-validation of a structure")
    c.add_argument("--structure", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--material", required=True)
    c.add_argument("--k", type=int, default=10)
    c.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = with_search(load_config(args.config), seed=args.seed, threads=args.threads)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
