"""Risk-seeking policy-gradient search over expression structures.

One epoch samples a batch of structures from the policy, fits each
structure's constants, scores it by ``reward = -RMSE`` (cycles), keeps the
top fraction as elites and nudges the policy toward them, using the weakest
elite's reward as the baseline. Early epochs use an enlarged batch to widen
exploration.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .constfit import FitConfig, FitResult, NoFiniteStart, fit_constants
from .constraints import ConstraintConfig
from .dataio import DimensionlessSample, design_matrix
from .policy import (FirstTokenDist, PolicyParams, batch_objective_and_grad, sample_batch,
                     update_first_token_dist)
from .symlib import (BINARY_OPS, CONSTANT, UNARY_OPS, VARIABLES, Expression, Library, render)

STATS_FIELDS = ("epoch", "batch_size", "n_elite", "best_rmse", "mean_elite_rmse", "best_r2",
                "best_expression", "hof_best_rmse")


@dataclass(frozen=True)
class SearchConfig:
    N_size: int = 1300
    N_epoch: int = 32
    n_group: int = 2
    augment_factor: int = 13
    p1: float = 0.025
    p2: float = 0.04
    l: int = 10
    N_const: int = 5
    max_tokens: int | None = None
    learning_rate: float = 5e-4
    entropy_coeff: float = 0.005
    clip_norm: float = 5.0
    hidden: int = 64
    init_scale: float = 0.08
    first_token_alpha: float = 0.5
    seed: int = 0
    binary: tuple[str, ...] = BINARY_OPS
    unary: tuple[str, ...] = UNARY_OPS
    variables: tuple[str, ...] = VARIABLES
    use_constant: bool = True
    inss_enabled: bool = True
    cosm_enabled: bool = True
    felc_enabled: bool = True
    target_transform: str = "log_life"
    fit_restarts: int = 2
    fit_max_iter: int = 100
    final_fit_restarts: int = 8
    hof_capacity: int = 20
    stop_r2: float | None = None
    threads: int = 1

    def __post_init__(self):
        if not (0 < self.p1 < 1 and 0 < self.p2 < 1):
            raise ValueError("p1 and p2 must lie in (0, 1)")
        if not self.N_epoch >= self.n_group >= 0:
            raise ValueError("need N_epoch >= n_group >= 0")
        if self.N_size < 1 or self.augment_factor < 1:
            raise ValueError("N_size and augment_factor must be >= 1")
        if self.target_transform not in ("log_life", "raw"):
            raise ValueError("target_transform must be 'log_life' or 'raw'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        for name in ("binary", "unary", "variables"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def library(self) -> Library:
        return Library.build(self.binary, self.unary, self.variables, CONSTANT if self.use_constant else None)

    def constraints(self) -> ConstraintConfig:
        return ConstraintConfig(self.l, self.N_const, self.max_tokens, self.inss_enabled,
                                self.cosm_enabled, self.felc_enabled)

    def fit_config(self, final: bool = False) -> FitConfig:
        return FitConfig(n_restarts=self.final_fit_restarts if final else self.fit_restarts,
                         max_iter=200 if final else self.fit_max_iter,
                         target=self.target_transform, seed=self.seed)

    def batch_size(self, epoch: int) -> int:
        return self.N_size * self.augment_factor if epoch < self.n_group else self.N_size

    def elite_fraction(self, epoch: int) -> float:
        return self.p1 if epoch < self.n_group else self.p2

    def n_elite(self, epoch: int) -> int:
        # guard against 0.04 * 1300 landing a hair above 52
        return math.ceil(self.elite_fraction(epoch) * self.batch_size(epoch) - 1e-9)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class Candidate:
    expression: Expression
    rmse: float
    r2: float
    reward: float
    log_prob: float = 0.0

    @property
    def rendered(self) -> str:
        return render(self.expression)

    def sort_key(self):
        return (-self.reward, len(self.expression.tokens), self.rendered)


def select_elites(candidates: Sequence[Candidate], n_elite: int) -> list[Candidate]:
    """Top ``n_elite`` finite-reward candidates; ties go to shorter, then lexically smaller."""
    finite = [c for c in candidates if np.isfinite(c.reward)]
    return sorted(finite, key=Candidate.sort_key)[:n_elite]


@dataclass
class HallOfFame:
    capacity: int = 20
    entries: list[Candidate] = field(default_factory=list)

    def update(self, candidates: Sequence[Candidate]) -> None:
        pool = {c.rendered: c for c in self.entries}
        for c in candidates:
            if not np.isfinite(c.reward):
                continue
            key = c.rendered
            if key not in pool or c.reward > pool[key].reward:
                pool[key] = c
        self.entries = sorted(pool.values(), key=Candidate.sort_key)[:self.capacity]

    @property
    def best(self) -> Candidate | None:
        return self.entries[0] if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)


class FitCache:
    """Constants fitted per structure; a structure's fit is independent of when it is met."""

    def __init__(self, X: np.ndarray, y: np.ndarray, fit_cfg: FitConfig, threads: int = 1):
        self.X, self.y, self.cfg, self.threads = X, y, fit_cfg, threads
        self._store: dict[str, FitResult | None] = {}

    def _fit(self, expr: Expression) -> FitResult | None:
        try:
            return fit_constants(expr, self.X, self.y, self.cfg)
        except NoFiniteStart:
            return None

    def fit_all(self, exprs: Sequence[Expression]) -> list[FitResult | None]:
        todo = {}
        for e in exprs:
            key = e.structure_key
            if key not in self._store and key not in todo:
                todo[key] = e
        if self.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(self._fit, todo.values()))
        else:
            results = [self._fit(e) for e in todo.values()]
        self._store.update(zip(todo.keys(), results))
        return [self._store[e.structure_key] for e in exprs]

    def __len__(self) -> int:
        return len(self._store)


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2:
        return np.asarray(data[0], dtype=float), np.asarray(data[1], dtype=float)
    samples = list(data)
    if samples and isinstance(samples[0], DimensionlessSample):
        return design_matrix(samples)
    raise TypeError("data must be (X, y) arrays or a list of DimensionlessSample")


def make_candidate(expr: Expression, fit: FitResult | None, log_prob: float = 0.0) -> Candidate:
    if fit is None or not np.isfinite(fit.rmse):
        return Candidate(expr, math.inf, -math.inf, -math.inf, log_prob)
    return Candidate(expr.with_constants(fit.constants), fit.rmse, fit.r2, -fit.rmse, log_prob)


@dataclass
class BatchStats:
    epoch: int
    batch_size: int
    n_elite: int
    best_rmse: float
    mean_elite_rmse: float
    best_r2: float
    best_expression: str
    hof_best_rmse: float = math.nan

    def row(self) -> list:
        return [getattr(self, f) for f in STATS_FIELDS]


@dataclass
class SearchState:
    """Everything that evolves across epochs."""

    params: PolicyParams
    first_dist: FirstTokenDist
    optimizer: "Adam"
    cache: FitCache
    hof: HallOfFame


def run_epoch(state: SearchState, epoch: int, cfg: SearchConfig) -> tuple[list[Candidate], BatchStats]:
    """Sample, fit and score one batch; return its elites and summary."""
    lib, ccfg = cfg.library(), cfg.constraints()
    size = cfg.batch_size(epoch)
    rngs = [np.random.default_rng([cfg.seed, epoch, i]) for i in range(size)]
    sampled = sample_batch(state.params, lib, ccfg, state.first_dist, rngs)
    fits = state.cache.fit_all([s.expression for s in sampled])
    cands = [make_candidate(s.expression, f, s.log_prob) for s, f in zip(sampled, fits)]
    elites = select_elites(cands, cfg.n_elite(epoch))
    best = elites[0] if elites else None
    stats = BatchStats(
        epoch, size, len(elites),
        best.rmse if best else math.inf,
        float(np.mean([c.rmse for c in elites])) if elites else math.inf,
        best.r2 if best else -math.inf,
        best.rendered if best else "",
    )
    return elites, stats


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def ascend(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def elite_gradient(params: PolicyParams, elites: Sequence[Candidate], baseline: float,
                   cfg: SearchConfig) -> np.ndarray:
    """Flat gradient of the mean risk-seeking objective plus the entropy bonus."""
    n = len(elites)
    weights = np.array([c.reward - baseline for c in elites]) / n
    _, _, grads = batch_objective_and_grad(params, [c.expression for c in elites], cfg.constraints(),
                                           weights=weights, entropy_coeff=cfg.entropy_coeff / n)
    return np.concatenate([grads[k].ravel() for k in params.arrays()])


def clip_by_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


def policy_update(params: PolicyParams, elites: Sequence[Candidate], baseline: float, cfg: SearchConfig,
                  optimizer: Adam | None = None) -> PolicyParams:
    """One clipped gradient-ascent step toward the elites; returns new parameters."""
    if not elites:
        raise ValueError("policy_update needs at least one elite")
    optimizer = optimizer or Adam(cfg.learning_rate)
    g = clip_by_norm(elite_gradient(params, elites, baseline, cfg), cfg.clip_norm)
    theta = optimizer.ascend(params.flat(), g)
    if not np.all(np.isfinite(theta)):
        return params.copy()
    out = params.copy()
    out.set_flat(theta)
    return out


def init_state(cfg: SearchConfig, X: np.ndarray, y: np.ndarray) -> SearchState:
    lib = cfg.library()
    params = PolicyParams.init(len(lib), cfg.hidden, seed=cfg.seed, scale=cfg.init_scale)
    return SearchState(params, FirstTokenDist.uniform(cfg.constraints(), lib), Adam(cfg.learning_rate),
                       FitCache(X, y, cfg.fit_config(), cfg.threads), HallOfFame(cfg.hof_capacity))


def run_search(cfg: SearchConfig, data, log=None, state: SearchState | None = None
               ) -> tuple[HallOfFame, list[BatchStats]]:
    """Run ``cfg.N_epoch`` epochs; return the hall of fame and per-epoch stats.

    Hall-of-fame entries are refitted with ``final_fit_restarts`` starts at
    the end, which can only lower their RMSE. With ``cfg.stop_r2`` set the
    search ends early once the best entry reaches that R-squared.
    """
    X, y = _as_arrays(data)
    state = state or init_state(cfg, X, y)
    lib, ccfg = cfg.library(), cfg.constraints()
    trace = []
    for epoch in range(cfg.N_epoch):
        elites, stats = run_epoch(state, epoch, cfg)
        state.hof.update(elites)
        stats.hof_best_rmse = state.hof.best.rmse if state.hof.best else math.inf
        trace.append(stats)
        if elites:
            state.first_dist = update_first_token_dist(elites, ccfg, lib, cfg.first_token_alpha)
            state.params = policy_update(state.params, elites, elites[-1].reward, cfg, state.optimizer)
        if log:
            log(stats)
        if cfg.stop_r2 is not None and state.hof.best and state.hof.best.r2 >= cfg.stop_r2:
            break
    _polish_hall_of_fame(state.hof, X, y, cfg)
    return state.hof, trace


def _polish_hall_of_fame(hof: HallOfFame, X: np.ndarray, y: np.ndarray, cfg: SearchConfig) -> None:
    final_cfg = cfg.fit_config(final=True)
    polished = []
    for c in hof.entries:
        try:
            fit = fit_constants(c.expression, X, y, final_cfg, initial=c.expression.constants)
        except NoFiniteStart:
            polished.append(c)
            continue
        better = make_candidate(c.expression, fit, c.log_prob)
        polished.append(better if better.reward > c.reward else c)
    hof.entries = sorted(polished, key=Candidate.sort_key)


def refit_structure(structure: Expression, data, fit_cfg: FitConfig = FitConfig()) -> FitResult:
    """Fit a fixed structure's constants to a new dataset."""
    X, y = _as_arrays(data)
    return fit_constants(structure, X, y, fit_cfg)


def write_stats(trace: Sequence[BatchStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_FIELDS)
        for s in trace:
            w.writerow(s.row())


def with_overrides(cfg: SearchConfig, **kw) -> SearchConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
