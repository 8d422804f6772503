"""Fitting the free constants of a fixed expression structure.

The objective is the RMSE between observed lives and predicted lives, in
cycles. With the default ``log_life`` target the expression models
``ln(N_f)`` and predictions are ``exp(output)``.

Each restart runs a damped Gauss-Newton (Levenberg-Marquardt) descent on the
residual vector and is then polished with L-BFGS on the RMSE itself. Both
stages use central-difference derivatives, evaluated in one vectorised call
by stacking the perturbed constant vectors.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from .symlib import Expression, compile_expression


class NoFiniteStart(RuntimeError):
    pass


class EmptyData(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    n_restarts: int = 8
    init_low: float = -10.0
    init_high: float = 10.0
    max_iter: int = 200
    gtol: float = 1e-8
    target: str = "log_life"
    objective: str = "cycles"
    seed: int = 0

    def __post_init__(self):
        if self.target not in ("log_life", "raw"):
            raise ValueError(f"target must be 'log_life' or 'raw', got {self.target!r}")
        if self.objective not in ("cycles", "log"):
            raise ValueError(f"objective must be 'cycles' or 'log', got {self.objective!r}")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass
class FitResult:
    constants: np.ndarray
    rmse: float
    r2: float
    converged: bool
    n_restarts_used: int
    start_rmses: list[float] = field(default_factory=list, repr=False)


def r2_score(observed: np.ndarray, predicted: np.ndarray) -> float:
    ss_res = np.sum((observed - predicted) ** 2)
    ss_tot = np.sum((observed - observed.mean()) ** 2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else -np.inf
    return float(1.0 - ss_res / ss_tot)


def _structure_seed(expr: Expression, seed: int) -> list[int]:
    return [seed, zlib.crc32(expr.structure_key.encode())]


class _Objective:
    def __init__(self, expr: Expression, X: np.ndarray, y: np.ndarray, cfg: FitConfig):
        self.f = compile_expression(expr)
        self.X = X
        self.y = y
        self.cfg = cfg
        self.k = expr.n_constants
        if cfg.objective == "log":
            self.obs = np.log(y) if cfg.target == "log_life" else y
        else:
            self.obs = y

    def predict(self, C: np.ndarray) -> np.ndarray:
        out = self.f(self.X, C)
        if self.cfg.target == "log_life":
            if self.cfg.objective == "log":
                return out
            with np.errstate(over="ignore", invalid="ignore"):
                return np.exp(out)
        return out

    def residuals(self, C: np.ndarray) -> np.ndarray:
        return self.predict(C) - self.obs

    def rmse(self, C: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.sqrt(np.mean(self.residuals(C) ** 2, axis=-1))
        return np.where(np.isfinite(r), r, np.inf)

    def _steps(self, c: np.ndarray) -> np.ndarray:
        return 1e-6 * np.maximum(1.0, np.abs(c))

    def _stencil(self, c: np.ndarray):
        h = self._steps(c)
        P = np.vstack([c, c + np.diag(h), c - np.diag(h)])
        return P, h

    def rmse_and_grad(self, c: np.ndarray):
        P, h = self._stencil(c)
        r = self.rmse(P)
        if not np.isfinite(r[0]):
            return np.inf, np.zeros(self.k)
        with np.errstate(invalid="ignore"):
            g = (r[1:self.k + 1] - r[self.k + 1:]) / (2 * h)
        return float(r[0]), np.where(np.isfinite(g), g, 0.0)

    # large but finite stand-in so the least-squares solver can back off
    _PENALTY = 1e150

    def lm_residuals(self, c: np.ndarray) -> np.ndarray:
        r = self.residuals(c)
        return np.where(np.isfinite(r), np.clip(r, -self._PENALTY, self._PENALTY), self._PENALTY)

    def lm_jacobian(self, c: np.ndarray) -> np.ndarray:
        P, h = self._stencil(c)
        R = self.residuals(P)
        with np.errstate(invalid="ignore", over="ignore"):
            J = (R[1:self.k + 1] - R[self.k + 1:]).T / (2 * h)
        return np.where(np.isfinite(J), J, 0.0)


def _canonical_order(X: np.ndarray, y: np.ndarray):
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    return X[order], y[order]


def fit_constants(structure: Expression, X: np.ndarray, y: np.ndarray, cfg: FitConfig = FitConfig(),
                  initial: np.ndarray | None = None) -> FitResult:
    """Fit the constants of ``structure`` to features ``X`` and lives ``y`` (cycles).

    Starts are ``initial`` (if given), the all-ones vector and
    ``n_restarts - 1`` draws from ``Uniform(init_low, init_high)`` seeded by
    ``cfg.seed`` and the structure itself. Starts with a non-finite
    objective are skipped. The best restart is returned.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise EmptyData("no samples to fit")
    X, y = _canonical_order(X, y)
    obj = _Objective(structure, X, y, cfg)
    k = structure.n_constants

    if k == 0:
        rmse = float(obj.rmse(np.zeros(0)))
        if not np.isfinite(rmse):
            raise NoFiniteStart("structure has no constants and a non-finite objective")
        return _result(obj, np.zeros(0), rmse, True, 1, [rmse])

    rng = np.random.default_rng(_structure_seed(structure, cfg.seed))
    starts = [np.ones(k)] + list(rng.uniform(cfg.init_low, cfg.init_high, (cfg.n_restarts - 1, k)))
    if initial is not None and len(initial) == k:
        starts.insert(0, np.asarray(initial, dtype=float))

    best = None
    used = 0
    start_rmses = []
    for c0 in starts:
        r0 = float(obj.rmse(c0))
        if not np.isfinite(r0):
            continue
        used += 1
        start_rmses.append(r0)
        c, r, ok = _descend(obj, c0, r0, cfg)
        if best is None or r < best[1]:
            best = (c, r, ok)
    if best is None:
        raise NoFiniteStart(f"all {len(starts)} starts give a non-finite objective")
    return _result(obj, *best, used, start_rmses)


def _descend(obj: _Objective, c0: np.ndarray, r0: float, cfg: FitConfig):
    c, r = c0, r0
    if len(obj.y) >= obj.k:
        try:
            sol = least_squares(obj.lm_residuals, c0, jac=obj.lm_jacobian, method="lm",
                                max_nfev=cfg.max_iter * 5, xtol=1e-15, ftol=1e-15, gtol=1e-15)
            r_lm = float(obj.rmse(sol.x))
            if r_lm < r:
                c, r = sol.x, r_lm
        except (ValueError, FloatingPointError):
            pass
    sol = minimize(obj.rmse_and_grad, c, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iter, "gtol": cfg.gtol, "ftol": 1e-15})
    ok = bool(sol.success)
    if np.isfinite(sol.fun) and sol.fun < r:
        c, r = sol.x, float(sol.fun)
    return np.asarray(c, dtype=float), r, ok


def _result(obj: _Objective, c: np.ndarray, rmse: float, ok: bool, used: int, start_rmses) -> FitResult:
    pred = obj.predict(c)
    r2 = r2_score(obj.obs, pred) if np.all(np.isfinite(pred)) else -np.inf
    return FitResult(np.asarray(c, dtype=float), float(rmse), r2, ok, used, list(start_rmses))
