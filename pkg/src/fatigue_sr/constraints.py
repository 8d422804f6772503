"""Generation-time token masks and post-hoc structural checks.

Rules enforced at every step of sequence generation:

* arity tracking - the sequence must close into a complete tree;
* function budget - at most ``l`` function nodes; while the open-slot stack
  holds only 1s and fewer than ``l`` functions were emitted, the next token
  must be a function (length enforcement);
* constant cap - at most ``N_const`` constant placeholders;
* no constant-only operations - a function may not receive constants as all
  of its children;
* no unary nesting - no unary operator anywhere below another unary operator;
* closure guard - never emit a token that makes the tree impossible to close
  within ``max_tokens``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .symlib import ArityState, Expression, Kind, Library, Token, arity_update, decode

FELC = "FELC"
BUDGET = "BUDGET"
NCONST = "NCONST"
INSS = "INSS"
COSM = "COSM"
CLOSURE = "CLOSURE"


class Unsatisfiable(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstraintConfig:
    l: int = 10
    N_const: int = 5
    max_tokens: int | None = None
    inss_enabled: bool = True
    cosm_enabled: bool = True
    felc_enabled: bool = True

    def __post_init__(self):
        if self.max_tokens is None:
            object.__setattr__(self, "max_tokens", 4 * self.l + 1)
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if self.N_const < 0:
            raise ValueError("N_const must be >= 0")
        if self.max_tokens < 2 * self.l + 1:
            raise ValueError("max_tokens must be >= 2*l + 1")


class Frame(NamedTuple):
    parent: Token
    inside_unary: bool
    constants_only: bool


@dataclass(frozen=True)
class GenContext:
    """Everything the mask needs about a partial prefix sequence.

    ``frames`` runs parallel to ``arity.stack``, one per open function node.
    ``inside_unary`` is true if that node or one of its ancestors is unary;
    ``constants_only`` stays true while every child filled so far is a
    constant leaf.
    """

    arity: ArityState = field(default_factory=ArityState)
    frames: tuple[Frame, ...] = ()

    @property
    def pending_parent(self) -> Token | None:
        return self.frames[-1].parent if self.frames else None

    @property
    def in_unary_scope(self) -> bool:
        return bool(self.frames) and self.frames[-1].inside_unary

    @property
    def subtree_constant_only_risk(self) -> bool:
        return bool(self.frames) and self.arity.stack[-1] == 1 and self.frames[-1].constants_only

    @property
    def complete(self) -> bool:
        return self.arity.complete

    def push(self, tok: Token) -> "GenContext":
        arity = arity_update(self.arity, tok)
        frames = list(self.frames)
        if tok.is_function:
            inside = tok.kind is Kind.UNARY or self.in_unary_scope
            if frames:
                frames[-1] = frames[-1]._replace(constants_only=False)
            frames.append(Frame(tok, inside, True))
        else:
            if frames and tok.kind is not Kind.CONSTANT:
                frames[-1] = frames[-1]._replace(constants_only=False)
            del frames[len(arity.stack):]
        return GenContext(arity, tuple(frames))


def replay(tokens) -> GenContext:
    ctx = GenContext()
    for tok in tokens:
        ctx = ctx.push(tok)
    return ctx


def closing_need(stack: tuple[int, ...]) -> int:
    """Minimum number of terminals still required to close the tree."""
    if not stack:
        return 0
    return sum(stack) - len(stack) + 1


def _signature(ctx: GenContext, cfg: ConstraintConfig) -> tuple:
    a = ctx.arity
    started = a.tokens_emitted > 0
    felc = cfg.felc_enabled and a.function_count < cfg.l and all(v == 1 for v in a.stack)
    need = closing_need(a.stack) if started else 1
    return (
        a.function_count >= cfg.l,
        felc,
        a.constant_count >= cfg.N_const,
        cfg.inss_enabled and ctx.in_unary_scope,
        cfg.cosm_enabled and ctx.subtree_constant_only_risk,
        a.tokens_emitted + 1 + need > cfg.max_tokens,
        a.tokens_emitted + 2 + need > cfg.max_tokens,
    )


@lru_cache(maxsize=None)
def _mask_for(sig: tuple, lib: Library) -> np.ndarray:
    fn_full, felc, const_full, inss, cosm, no_unary_room, no_binary_room = sig
    binary = lib.kind_mask(Kind.BINARY)
    unary = lib.kind_mask(Kind.UNARY)
    const = lib.kind_mask(Kind.CONSTANT)
    terminal = lib.kind_mask(Kind.VARIABLE, Kind.CONSTANT)
    forbid = np.zeros(len(lib), dtype=bool)
    if fn_full:
        forbid |= binary | unary
    if felc:
        forbid |= terminal
    if const_full:
        forbid |= const
    if inss:
        forbid |= unary
    if cosm:
        forbid |= const
    if no_unary_room:
        forbid |= unary
    if no_binary_room:
        forbid |= binary
    if forbid.all():
        raise Unsatisfiable(f"every token is masked in state {sig}")
    mask = np.where(forbid, -np.inf, 0.0)
    mask.setflags(write=False)
    return mask


def prior_mask(ctx: GenContext, cfg: ConstraintConfig, lib: Library) -> np.ndarray:
    """Additive log-mask over ``lib.tokens``: 0 allowed, -inf forbidden."""
    return _mask_for(_signature(ctx, cfg), lib)


def check_sequence(expr: Expression, cfg: ConstraintConfig) -> list[str]:
    """List every rule violated by a finished expression; empty means it passes.

    Entries look like ``"INSS@2"`` (rule, token position). Derived from the
    decoded tree and a plain replay, independently of :func:`prior_mask`, so
    it can serve as an oracle for the mask.
    """
    toks = expr.tokens
    decode(toks, expr.library)
    out: list[str] = []

    fc = 0
    consts = 0
    stack: list[int] = []
    for i, tok in enumerate(toks):
        if tok.is_function:
            fc += 1
            if fc > cfg.l:
                out.append(f"{BUDGET}@{i}")
            stack.append(tok.arity)
        else:
            if cfg.felc_enabled and fc < cfg.l and all(v == 1 for v in stack):
                out.append(f"{FELC}@{i}")
            if tok.kind is Kind.CONSTANT:
                consts += 1
                if consts > cfg.N_const:
                    out.append(f"{NCONST}@{i}")
            if stack:
                stack[-1] -= 1
                while stack and stack[-1] == 0:
                    stack.pop()
                    if stack:
                        stack[-1] -= 1
    if len(toks) > cfg.max_tokens:
        out.append(f"{CLOSURE}@{cfg.max_tokens}")

    pos = 0

    def walk(unary_above: bool) -> bool:
        """Return True if the subtree holds only constant leaves."""
        nonlocal pos
        start = pos
        tok = toks[pos]
        pos += 1
        if tok.is_terminal:
            return tok.kind is Kind.CONSTANT
        if tok.kind is Kind.UNARY and unary_above and cfg.inss_enabled:
            out.append(f"{INSS}@{start}")
        flags = [walk(unary_above or tok.kind is Kind.UNARY) for _ in range(tok.arity)]
        if all(flags) and cfg.cosm_enabled:
            out.append(f"{COSM}@{start}")
        return all(flags)

    walk(False)
    return sorted(out, key=lambda v: (int(v.split("@")[1]), v))


def legal_first_tokens(cfg: ConstraintConfig, lib: Library) -> np.ndarray:
    return np.isfinite(prior_mask(GenContext(), cfg, lib))
