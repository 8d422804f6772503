"""Recurrent sampling policy over library tokens.

A single GRU cell reads, at each step, the previous token together with a
few counters describing the partial tree (remaining function budget, size
of the innermost open arity frame, remaining constant budget) and emits one
logit per library token. Forbidden tokens are removed with the additive
prior mask from :mod:`fatigue_sr.constraints` before the softmax.

The first token is not produced by the network: it is drawn from an
empirical distribution maintained from the elite expressions of the
previous batch, so it carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .constraints import ConstraintConfig, GenContext, check_sequence, legal_first_tokens, prior_mask
from .symlib import Expression, Library

PARAM_NAMES = ("Wx", "Wh", "bx", "bh", "Wo", "bo")


class ResampleExhausted(RuntimeError):
    pass


@dataclass
class PolicyParams:
    Wx: np.ndarray
    Wh: np.ndarray
    bx: np.ndarray
    bh: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    @classmethod
    def init(cls, n_tokens: int, hidden: int = 64, seed: int = 0, scale: float = 0.08) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        shapes = param_shapes(n_tokens, hidden)
        return cls(**{k: rng.uniform(-scale, scale, shapes[k]) for k in PARAM_NAMES})

    @classmethod
    def zeros(cls, n_tokens: int, hidden: int = 64) -> "PolicyParams":
        shapes = param_shapes(n_tokens, hidden)
        return cls(**{k: np.zeros(shapes[k]) for k in PARAM_NAMES})

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in PARAM_NAMES:
            a = getattr(self, k)
            a[...] = vec[i:i + a.size].reshape(a.shape)
            i += a.size

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.arrays())

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        with np.load(path) as data:
            return cls(**{k: data[k].astype(float) for k in PARAM_NAMES})


def input_size(n_tokens: int) -> int:
    return n_tokens + 5


def param_shapes(n_tokens: int, hidden: int) -> dict[str, tuple[int, ...]]:
    d = input_size(n_tokens)
    return {
        "Wx": (d, 3 * hidden),
        "Wh": (hidden, 3 * hidden),
        "bx": (3 * hidden,),
        "bh": (3 * hidden,),
        "Wo": (hidden, n_tokens),
        "bo": (n_tokens,),
    }


def encode_input(prev_token: int, ctx: GenContext, cfg: ConstraintConfig, n_tokens: int) -> np.ndarray:
    x = np.zeros(input_size(n_tokens))
    x[prev_token] = 1.0
    a = ctx.arity
    x[n_tokens] = (cfg.l - a.function_count) / cfg.l
    if a.stack:
        x[n_tokens + min(a.stack[-1], 3)] = 1.0
    if cfg.N_const:
        x[n_tokens + 4] = (cfg.N_const - a.constant_count) / cfg.N_const
    return x


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gru_forward(p: PolicyParams, x: np.ndarray, h: np.ndarray):
    H = p.hidden
    gx = x @ p.Wx + p.bx
    gh = h @ p.Wh + p.bh
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, gh)


@dataclass
class StepState:
    hidden: np.ndarray
    prev_token: int
    ctx: GenContext = field(default_factory=GenContext)


def step(params: PolicyParams, state: StepState, cfg: ConstraintConfig, lib: Library):
    """One forward step: ``(logits, next_hidden)``."""
    x = encode_input(state.prev_token, state.ctx, cfg, len(lib))[None, :]
    h, _ = gru_forward(params, x, state.hidden[None, :])
    return (h @ params.Wo + params.bo)[0], h[0]


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = logits + mask
    m = np.max(z, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        lse = m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    return z - lse


@dataclass
class FirstTokenDist:
    probs: np.ndarray

    @classmethod
    def uniform(cls, cfg: ConstraintConfig, lib: Library) -> "FirstTokenDist":
        legal = legal_first_tokens(cfg, lib).astype(float)
        return cls(legal / legal.sum())


def update_first_token_dist(elites: Sequence, cfg: ConstraintConfig, lib: Library,
                            alpha: float = 0.5) -> FirstTokenDist:
    """Smoothed frequency of first tokens among ``elites``.

    ``elites`` may hold expressions or anything with an ``expression``
    attribute.
    """
    legal = legal_first_tokens(cfg, lib)
    if not elites:
        return FirstTokenDist.uniform(cfg, lib)
    counts = np.zeros(len(lib))
    for e in elites:
        expr = getattr(e, "expression", e)
        counts[expr.tokens[0].id] += 1
    probs = np.where(legal, counts + alpha, 0.0)
    return FirstTokenDist(probs / probs.sum())


@dataclass
class Sampled:
    expression: Expression
    log_prob: float
    step_logprobs: np.ndarray


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    # first index whose cdf exceeds u*total; zero-probability tokens can never win
    idx = np.sum(cdf <= (u * cdf[:, -1])[:, None], axis=-1)
    return np.minimum(idx, probs.shape[1] - 1)


def _sample_once(params: PolicyParams, lib: Library, cfg: ConstraintConfig,
                 first_dist: FirstTokenDist, uniforms: np.ndarray) -> list[Sampled]:
    B = uniforms.shape[0]
    L = len(lib)
    ctxs = [GenContext() for _ in range(B)]
    mask0 = prior_mask(ctxs[0], cfg, lib)
    p0 = np.where(np.isfinite(mask0), first_dist.probs, 0.0)
    if p0.sum() <= 0:
        p0 = np.isfinite(mask0).astype(float)
    p0 = p0 / p0.sum()
    first = _inverse_cdf(np.broadcast_to(p0, (B, L)), uniforms[:, 0])
    seqs = [[int(a)] for a in first]
    steplp = [[float(np.log(p0[a]))] for a in first]
    ctxs = [c.push(lib[a]) for c, a in zip(ctxs, first)]
    h = np.zeros((B, params.hidden))
    active = np.array([not c.complete for c in ctxs])
    t = 1
    while active.any():
        rows = np.nonzero(active)[0]
        x = np.stack([encode_input(seqs[i][-1], ctxs[i], cfg, L) for i in rows])
        masks = np.stack([prior_mask(ctxs[i], cfg, lib) for i in rows])
        h_rows, _ = gru_forward(params, x, h[rows])
        h[rows] = h_rows
        logp = masked_log_softmax(h_rows @ params.Wo + params.bo, masks)
        choice = _inverse_cdf(np.exp(logp), uniforms[rows, t])
        for j, i in enumerate(rows):
            a = int(choice[j])
            seqs[i].append(a)
            steplp[i].append(float(logp[j, a]))
            ctxs[i] = ctxs[i].push(lib[a])
            active[i] = not ctxs[i].complete
        t += 1
    out = []
    for s, lp in zip(seqs, steplp):
        lp = np.array(lp)
        out.append(Sampled(Expression(tuple(lib[a] for a in s), (), lib), float(lp.sum()), lp))
    return out


def sample_batch(params: PolicyParams, lib: Library, cfg: ConstraintConfig,
                 first_dist: FirstTokenDist, rngs: Sequence[np.random.Generator],
                 max_resample: int = 100) -> list[Sampled]:
    """Sample one expression per generator; each result depends only on its own stream."""
    width = cfg.max_tokens
    uniforms = np.stack([r.random(width) for r in rngs]) if rngs else np.zeros((0, width))
    out = _sample_once(params, lib, cfg, first_dist, uniforms) if len(rngs) else []
    for i, s in enumerate(out):
        tries = 0
        while check_sequence(s.expression, cfg):
            tries += 1
            if tries >= max_resample:
                raise ResampleExhausted(f"no valid sequence after {max_resample} attempts")
            s = _sample_once(params, lib, cfg, first_dist, rngs[i].random(width)[None, :])[0]
        out[i] = s
    return out


def sample_sequence(params: PolicyParams, lib: Library, cfg: ConstraintConfig,
                    first_dist: FirstTokenDist, rng: np.random.Generator) -> Sampled:
    return sample_batch(params, lib, cfg, first_dist, [rng])[0]


def _replay_inputs(expr: Expression, cfg: ConstraintConfig):
    lib = expr.library
    L = len(lib)
    ctx = GenContext().push(expr.tokens[0])
    xs, masks, targets = [], [], []
    for tok in expr.tokens[1:]:
        xs.append(encode_input(targets[-1] if targets else expr.tokens[0].id, ctx, cfg, L))
        masks.append(prior_mask(ctx, cfg, lib))
        targets.append(tok.id)
        ctx = ctx.push(tok)
    return xs, masks, targets


def batch_objective_and_grad(params: PolicyParams, exprs: Sequence[Expression], cfg: ConstraintConfig,
                             weights: Sequence[float] | None = None, entropy_coeff: float = 0.0):
    """Value and gradient of ``sum_i w_i * log pi(seq_i) + c * sum_i sum_t H_t(seq_i)``.

    Returns ``(logprobs, entropies, grads)``: per-sequence log-likelihood of
    the network-generated tokens (the first token excluded), per-sequence
    summed entropy, and a dict of gradients keyed like the parameters.
    """
    B = len(exprs)
    L = len(exprs[0].library) if B else 0
    H = params.hidden
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
    replays = [_replay_inputs(e, cfg) for e in exprs]
    T = max((len(r[2]) for r in replays), default=0)
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    logprobs = np.zeros(B)
    entropies = np.zeros(B)
    if T == 0:
        return logprobs, entropies, grads

    X = np.zeros((T, B, input_size(L)))
    M = np.zeros((T, B, L))
    A = np.zeros((T, B), dtype=int)
    valid = np.zeros((T, B), dtype=bool)
    for i, (xs, ms, ts) in enumerate(replays):
        n = len(ts)
        if n:
            X[:n, i] = xs
            M[:n, i] = ms
            A[:n, i] = ts
            valid[:n, i] = True

    h = np.zeros((B, H))
    caches, hs, dlogits = [], [], []
    rows = np.arange(B)
    for t in range(T):
        h_new, cache = gru_forward(params, X[t], h)
        # finished sequences keep their state; their steps carry no loss
        h_new = np.where(valid[t][:, None], h_new, h)
        logp = masked_log_softmax(h_new @ params.Wo + params.bo, M[t])
        p = np.exp(logp)
        plogp = p * np.where(p > 0, logp, 0.0)
        ent = -plogp.sum(axis=1)
        v = valid[t]
        logprobs += np.where(v, logp[rows, A[t]], 0.0)
        entropies += np.where(v, ent, 0.0)
        onehot = np.zeros_like(p)
        onehot[rows, A[t]] = 1.0
        d = w[:, None] * (onehot - p)
        if entropy_coeff:
            d += entropy_coeff * (-(plogp) - p * ent[:, None])
        d[~v] = 0.0
        caches.append(cache)
        hs.append(h_new)
        dlogits.append(d)
        h = h_new

    dh_next = np.zeros((B, H))
    for t in reversed(range(T)):
        x, h_prev, r, z, n, gh = caches[t]
        d = dlogits[t]
        grads["Wo"] += hs[t].T @ d
        grads["bo"] += d.sum(axis=0)
        dh = dh_next + d @ params.Wo.T
        v = valid[t][:, None]
        dh_pass = np.where(v, 0.0, dh)
        dh = np.where(v, dh, 0.0)
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dprev = dh * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * gh[:, 2 * H:]
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        grads["Wx"] += x.T @ dgx
        grads["bx"] += dgx.sum(axis=0)
        grads["Wh"] += h_prev.T @ dgh
        grads["bh"] += dgh.sum(axis=0)
        dh_next = dprev + dgh @ params.Wh.T + dh_pass
    return logprobs, entropies, grads


def sequence_logprob_and_grad(params: PolicyParams, expr: Expression, cfg: ConstraintConfig,
                              first_dist: FirstTokenDist | None = None):
    """Log-likelihood of ``expr`` under the policy and its parameter gradient.

    With ``first_dist`` the (parameter-free) first-token log-probability is
    added to the value; the gradient is unaffected either way.
    """
    lp, _, grads = batch_objective_and_grad(params, [expr], cfg)
    value = float(lp[0])
    if first_dist is not None:
        mask0 = np.isfinite(prior_mask(GenContext(), cfg, expr.library))
        p0 = np.where(mask0, first_dist.probs, 0.0)
        value += float(np.log(p0[expr.tokens[0].id] / p0.sum()))
    return value, grads
