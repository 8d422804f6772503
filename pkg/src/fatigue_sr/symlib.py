"""Token alphabet, prefix-encoded expressions, evaluation and rendering."""
from __future__ import annotations

import ast
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

VARIABLES = ("eps_a", "gamma_a", "sigma_over_E", "tau_over_G")
BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("ln", "exp", "sqrt", "square")
CONSTANT = "C"

_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_NUMPY_BINARY = {"add": "({} + {})", "sub": "({} - {})", "mul": "({} * {})", "div": "({} / {})"}
_NUMPY_UNARY = {"ln": "_np.log({})", "exp": "_np.exp({})", "sqrt": "_np.sqrt({})", "square": "_np.square({})"}


class ExpressionError(ValueError):
    pass


class IncompleteExpression(ExpressionError):
    pass


class TrailingTokens(ExpressionError):
    pass


class AppendAfterComplete(ExpressionError):
    pass


class Kind(enum.Enum):
    BINARY = "BinaryOp"
    UNARY = "UnaryOp"
    VARIABLE = "Variable"
    CONSTANT = "ConstantPlaceholder"


_ARITY = {Kind.BINARY: 2, Kind.UNARY: 1, Kind.VARIABLE: 0, Kind.CONSTANT: 0}


@dataclass(frozen=True)
class Token:
    id: int
    kind: Kind
    symbol: str
    arity: int

    def __post_init__(self):
        if self.arity != _ARITY[self.kind]:
            raise ValueError(f"token {self.symbol!r}: arity {self.arity} does not match kind {self.kind.value}")

    @property
    def is_function(self) -> bool:
        return self.arity > 0

    @property
    def is_terminal(self) -> bool:
        return self.arity == 0


@dataclass(frozen=True)
class Library:
    tokens: tuple[Token, ...]

    def __post_init__(self):
        symbols = [t.symbol for t in self.tokens]
        if len(set(symbols)) != len(symbols):
            raise ValueError("token symbols must be unique within a library")
        if [t.id for t in self.tokens] != list(range(len(self.tokens))):
            raise ValueError("token ids must be 0..n-1 in order")
        if not any(t.kind is Kind.VARIABLE for t in self.tokens):
            raise ValueError("library needs at least one variable")
        if not any(t.kind is Kind.BINARY for t in self.tokens):
            raise ValueError("library needs at least one binary operator")

    @classmethod
    def build(
        cls,
        binary: Iterable[str] = BINARY_OPS,
        unary: Iterable[str] = UNARY_OPS,
        variables: Iterable[str] = VARIABLES,
        constant: bool = True,
    ) -> "Library":
        spec = [(Kind.BINARY, s) for s in binary] + [(Kind.UNARY, s) for s in unary]
        spec += [(Kind.VARIABLE, s) for s in variables]
        if constant:
            spec.append((Kind.CONSTANT, CONSTANT))
        for kind, sym in spec:
            if kind is Kind.BINARY and sym not in _NUMPY_BINARY:
                raise ValueError(f"unknown binary operator {sym!r}")
            if kind is Kind.UNARY and sym not in _NUMPY_UNARY:
                raise ValueError(f"unknown unary operator {sym!r}")
        return cls(tuple(Token(i, k, s, _ARITY[k]) for i, (k, s) in enumerate(spec)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, key: int | str) -> Token:
        if isinstance(key, str):
            for t in self.tokens:
                if t.symbol == key:
                    return t
            raise KeyError(f"unknown token symbol {key!r}")
        return self.tokens[key]

    @property
    def variables(self) -> tuple[Token, ...]:
        return tuple(t for t in self.tokens if t.kind is Kind.VARIABLE)

    @property
    def variable_count(self) -> int:
        return len(self.variables)

    @property
    def has_constant(self) -> bool:
        return any(t.kind is Kind.CONSTANT for t in self.tokens)

    def kind_mask(self, *kinds: Kind) -> np.ndarray:
        return np.array([t.kind in kinds for t in self.tokens])

    def variable_column(self, tok: Token) -> int:
        return self.variables.index(tok)


DEFAULT_LIBRARY = Library.build()


@dataclass(frozen=True)
class ArityState:
    """Pending child counts of open function nodes, innermost last."""

    stack: tuple[int, ...] = ()
    tokens_emitted: int = 0
    function_count: int = 0
    constant_count: int = 0

    @property
    def complete(self) -> bool:
        return self.tokens_emitted > 0 and not self.stack


def arity_update(state: ArityState, tok: Token) -> ArityState:
    if state.complete:
        raise AppendAfterComplete(f"cannot append {tok.symbol!r} to a complete expression")
    if tok.is_function:
        stack = state.stack + (tok.arity,)
    else:
        stack = list(state.stack)
        if stack:
            stack[-1] -= 1
            while stack and stack[-1] == 0:
                stack.pop()
                if stack:
                    stack[-1] -= 1
        stack = tuple(stack)
    return ArityState(
        stack,
        state.tokens_emitted + 1,
        state.function_count + tok.is_function,
        state.constant_count + (tok.kind is Kind.CONSTANT),
    )


@dataclass(frozen=True)
class Node:
    token: Token
    children: tuple["Node", ...] = ()


def decode(seq: Sequence[int | Token], lib: Library) -> Node:
    """Build the tree for a prefix sequence, checking it closes exactly at the end."""
    toks = [t if isinstance(t, Token) else lib[t] for t in seq]
    if not toks:
        raise IncompleteExpression("empty sequence")
    state = ArityState()
    for i, tok in enumerate(toks):
        if state.complete:
            raise TrailingTokens(f"tree complete after {i} tokens; {len(toks) - i} left over")
        state = arity_update(state, tok)
    if not state.complete:
        raise IncompleteExpression(f"{sum(state.stack)} child slot(s) still open")

    pos = 0

    def build() -> Node:
        nonlocal pos
        tok = toks[pos]
        pos += 1
        return Node(tok, tuple(build() for _ in range(tok.arity)))

    return build()


def encode(node: Node) -> list[Token]:
    out = [node.token]
    for child in node.children:
        out.extend(encode(child))
    return out


@dataclass(frozen=True)
class Expression:
    tokens: tuple[Token, ...]
    constants: tuple[float, ...] = ()
    library: Library = field(default=DEFAULT_LIBRARY, compare=False, repr=False)

    def __post_init__(self):
        n = self.n_constants
        if self.constants and len(self.constants) != n:
            raise ExpressionError(f"expression has {n} constant slot(s) but {len(self.constants)} value(s)")

    @classmethod
    def from_symbols(cls, symbols: str | Sequence[str], constants: Sequence[float] = (),
                     library: Library = DEFAULT_LIBRARY) -> "Expression":
        if isinstance(symbols, str):
            symbols = symbols.split()
        return cls(tuple(library[s] for s in symbols), tuple(float(c) for c in constants), library)

    @property
    def sequence(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.tokens)

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(t.symbol for t in self.tokens)

    @property
    def n_constants(self) -> int:
        return sum(t.kind is Kind.CONSTANT for t in self.tokens)

    @property
    def function_count(self) -> int:
        return sum(t.is_function for t in self.tokens)

    @property
    def structure_key(self) -> str:
        return " ".join(self.symbols)

    def with_constants(self, constants: Sequence[float]) -> "Expression":
        return Expression(self.tokens, tuple(float(c) for c in constants), self.library)

    def tree(self) -> Node:
        return decode(self.tokens, self.library)


def compile_expression(expr: Expression) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Return ``f(features, constants)`` evaluating the structure with numpy.

    ``features`` is ``(n_samples, n_vars)``. ``constants`` may be a vector of
    length ``n_constants`` or a ``(m, n_constants)`` matrix, giving an
    ``(m, n_samples)`` result for batched constant sets.
    """
    lib = expr.library
    decode(expr.tokens, lib)
    pos = 0
    cidx = 0

    def emit() -> str:
        nonlocal pos, cidx
        tok = expr.tokens[pos]
        pos += 1
        if tok.kind is Kind.VARIABLE:
            return f"X[{lib.variable_column(tok)}]"
        if tok.kind is Kind.CONSTANT:
            cidx += 1
            return f"K[{cidx - 1}]"
        args = [emit() for _ in range(tok.arity)]
        if tok.arity == 2:
            return _NUMPY_BINARY[tok.symbol].format(*args)
        return _NUMPY_UNARY[tok.symbol].format(*args)

    body = emit()
    code = compile(f"lambda X, K: {body}", "<expression>", "eval")
    raw = eval(code, {"_np": np})

    def f(features: np.ndarray, constants: np.ndarray | Sequence[float] = ()) -> np.ndarray:
        X = np.asarray(features, dtype=float).T
        K = np.asarray(constants, dtype=float)
        batched = K.ndim == 2
        if batched:
            K = K.T[:, :, None]
        with np.errstate(all="ignore"):
            out = raw(X, K)
        shape = (K.shape[1], X.shape[1]) if batched else (X.shape[1],)
        return np.broadcast_to(out, shape).astype(float, copy=True)

    return f


def evaluate(expr: Expression, features: np.ndarray) -> np.ndarray:
    """Evaluate per sample; non-finite values (NaN/inf) mark failed samples."""
    out = compile_expression(expr)(features, expr.constants)
    out[~np.isfinite(out)] = np.nan
    return out


def render(expr: Expression, digits: int = 17) -> str:
    consts = iter(expr.constants)

    def fmt(node: Node) -> str:
        tok = node.token
        if tok.kind is Kind.CONSTANT:
            value = next(consts, None)
            return tok.symbol if value is None else format(value, f".{digits}g")
        if tok.kind is Kind.VARIABLE:
            return tok.symbol
        args = [fmt(c) for c in node.children]
        if tok.arity == 2:
            return f"({args[0]} {_INFIX[tok.symbol]} {args[1]})"
        return f"{tok.symbol}({args[0]})"

    return fmt(expr.tree())


_AST_BINARY = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div"}


def parse_infix(text: str, library: Library = DEFAULT_LIBRARY) -> Expression:
    """Inverse of :func:`render`; bare ``C`` stands for an unfitted constant."""
    tokens: list[Token] = []
    constants: list[float] = []
    unfitted = False

    def walk(node: ast.AST) -> None:
        nonlocal unfitted
        if isinstance(node, ast.BinOp) and type(node.op) in _AST_BINARY:
            tokens.append(library[_AST_BINARY[type(node.op)]])
            walk(node.left)
            walk(node.right)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and len(node.args) == 1:
            tokens.append(library[node.func.id])
            walk(node.args[0])
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub) and isinstance(node.operand, ast.Constant):
            tokens.append(library[CONSTANT])
            constants.append(-float(node.operand.value))
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            tokens.append(library[CONSTANT])
            constants.append(float(node.value))
        elif isinstance(node, ast.Name):
            tok = library[node.id]
            if tok.kind is Kind.CONSTANT:
                unfitted = True
            tokens.append(tok)
        else:
            raise ExpressionError(f"unsupported syntax: {ast.dump(node)}")

    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from exc
    try:
        walk(tree.body)
    except KeyError as exc:
        raise ExpressionError(str(exc)) from exc
    if unfitted and constants:
        raise ExpressionError("mix of numeric and placeholder constants")
    expr = Expression(tuple(tokens), tuple(constants), library)
    decode(expr.tokens, library)
    return expr


def serialize(expr: Expression) -> str:
    consts = ",".join(format(c, ".17g") for c in expr.constants)
    return f"tokens={' '.join(expr.symbols)}; constants={consts}"


def deserialize(text: str, library: Library = DEFAULT_LIBRARY) -> Expression:
    fields = {}
    for part in text.strip().split(";"):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ExpressionError(f"malformed field {part.strip()!r}")
        fields[key.strip()] = value.strip()
    if "tokens" not in fields:
        raise ExpressionError("missing 'tokens=' field")
    try:
        constants = [float(c) for c in fields.get("constants", "").split(",") if c.strip()]
        expr = Expression.from_symbols(fields["tokens"], constants, library)
    except KeyError as exc:
        raise ExpressionError(str(exc)) from exc
    decode(expr.tokens, library)
    return expr


def parse_structure(text: str, library: Library = DEFAULT_LIBRARY) -> Expression:
    """Accept the ``tokens=...; constants=...`` form, bare prefix tokens, or infix text."""
    words = text.split()
    known = {t.symbol for t in library.tokens}
    if "tokens=" in text:
        expr = deserialize(text, library)
    elif len(words) > 1 and all(w in known for w in words):
        expr = Expression.from_symbols(words, library=library)
    else:
        return parse_infix(text, library)
    decode(expr.tokens, library)  # raises on an incomplete or over-long sequence
    return expr


def interpret(node: Node, row: Sequence[float], constants: Iterable[float], lib: Library) -> float:
    """Scalar recursive evaluation with ``math``; NaN on domain errors."""
    consts = iter(constants)

    def go(n: Node) -> float:
        tok = n.token
        if tok.kind is Kind.VARIABLE:
            return float(row[lib.variable_column(tok)])
        if tok.kind is Kind.CONSTANT:
            return float(next(consts))
        vals = [go(c) for c in n.children]
        try:
            if tok.symbol == "add":
                return vals[0] + vals[1]
            if tok.symbol == "sub":
                return vals[0] - vals[1]
            if tok.symbol == "mul":
                return vals[0] * vals[1]
            if tok.symbol == "div":
                return vals[0] / vals[1]
            if tok.symbol == "ln":
                return math.log(vals[0])
            if tok.symbol == "exp":
                return math.exp(vals[0])
            if tok.symbol == "sqrt":
                return math.sqrt(vals[0])
            if tok.symbol == "square":
                return vals[0] * vals[0]
        except (ValueError, ZeroDivisionError, OverflowError):
            return math.nan
        raise ExpressionError(f"no scalar rule for {tok.symbol!r}")

    return go(node)
