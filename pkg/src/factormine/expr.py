"""Factor expression grammar: tokens, constrained decoding, protected evaluation, text I/O.

An expression is a prefix (Polish) token sequence over weighted-feature
terminals, 4 binary operators (add, sub, mul, div; pow optionally behind a
flag) and 10 unary operators.  Terminal k evaluates as w_k * x_k where the
weight vector comes from the expression's option in an OptionCatalog.

Evaluation is total: protected arithmetic converts every domain violation
into an invalid-cell mask instead of raising or emitting non-finite values.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .data import FEATURES, Panel
from .errors import ExprError, ParseError, UsageError

DEFAULT_MAX_LENGTH = 15

BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("inv", "sqr", "sqrt", "sin", "cos", "tan", "atan", "log", "exp", "abs")
POW_NAME = "pow"

_BINARY_SYMBOL = {"add": "+", "sub": "-", "mul": "·", "div": "/", "pow": "^"}

# Token ids are stable: 0..5 terminals, 6..9 binary, 10..19 unary, 20 pow.
N_TERMINALS = len(FEATURES)
_NAMES = FEATURES + BINARY_OPS + UNARY_OPS + (POW_NAME,)
_ARITY = (0,) * N_TERMINALS + (2,) * len(BINARY_OPS) + (1,) * len(UNARY_OPS) + (2,)
POW_TOKEN = len(_NAMES) - 1

DIV_GUARD = 1e-12
LOG_GUARD = 1e-12
TAN_GUARD = 1e-9
EXP_CLAMP = 50.0


@dataclass(frozen=True)
class Vocabulary:
    """The token vocabulary, optionally extended with the pow operator."""

    include_pow: bool = False

    @property
    def size(self) -> int:
        return POW_TOKEN + 1 if self.include_pow else POW_TOKEN

    def tokens(self) -> range:
        return range(self.size)

    def name(self, token: int) -> str:
        self._check(token)
        return _NAMES[token]

    def arity(self, token: int) -> int:
        self._check(token)
        return _ARITY[token]

    def is_terminal(self, token: int) -> bool:
        self._check(token)
        return token < N_TERMINALS

    def token_for(self, name: str) -> int:
        try:
            token = _NAMES.index(name)
        except ValueError:
            raise ExprError(f"unknown token name {name!r}") from None
        self._check(token)
        return token

    def _check(self, token: int) -> None:
        if not 0 <= token < self.size:
            raise ExprError(f"token id {token} outside vocabulary of size {self.size}")


@dataclass(frozen=True)
class OptionCatalog:
    """Ordered set of discrete feature-weight vectors (the option vocabulary).

    Every weight is strictly positive and at most 1; no two options are
    identical.  For unambiguous formula parsing, prefer catalogs whose
    per-feature weight columns are pairwise distinct across options.
    """

    options: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.options:
            raise ExprError("catalog needs at least one option")
        for k, opt in enumerate(self.options):
            if len(opt) != N_TERMINALS:
                raise ExprError(f"option {k} has {len(opt)} weights, expected {N_TERMINALS}")
            if any(not 0.0 < w <= 1.0 for w in opt):
                raise ExprError(f"option {k} has weights outside (0, 1]")
        if len(set(self.options)) != len(self.options):
            raise ExprError("catalog contains duplicate options")

    @property
    def n_options(self) -> int:
        return len(self.options)

    def weights(self, option_id: int) -> tuple[float, ...]:
        if not 0 <= option_id < len(self.options):
            raise ExprError(f"option id {option_id} outside catalog of size {len(self.options)}")
        return self.options[option_id]


def default_catalog() -> OptionCatalog:
    """Five-option default with pairwise-distinct weight columns.

    Column distinctness makes any single printed weight identify its
    option, so formula text round-trips without an explicit option id.
    """
    return OptionCatalog(
        options=(
            # open, high, low, close, volume, vwap
            (0.10, 0.20, 0.30, 0.40, 0.18, 0.40),
            (0.25, 0.50, 0.10, 0.20, 0.28, 0.20),
            (0.30, 0.30, 0.09, 0.10, 0.20, 0.30),
            (0.50, 0.40, 0.40, 0.50, 0.45, 0.10),
            (0.09, 0.10, 0.20, 0.09, 0.50, 0.50),
        )
    )


def _pending_operands(tokens, vocab: Vocabulary) -> int:
    """Operands still required to complete the prefix sequence.

    Returns 0 for a complete expression; raises ExprError if a complete
    expression is followed by trailing tokens.
    """
    need = 1
    for pos, tok in enumerate(tokens):
        if need == 0:
            raise ExprError(f"trailing token at position {pos}: expression already complete")
        need += vocab.arity(tok) - 1
    return need


def is_complete(tokens, vocab: Vocabulary | None = None) -> bool:
    vocab = vocab or Vocabulary(include_pow=True)
    try:
        return len(tokens) > 0 and _pending_operands(tokens, vocab) == 0
    except ExprError:
        return False


@dataclass(frozen=True)
class FactorExpr:
    """A complete prefix token sequence plus the option fixing terminal weights."""

    tokens: tuple[int, ...]
    option_id: int

    def __post_init__(self):
        vocab = Vocabulary(include_pow=True)
        if not self.tokens:
            raise ExprError("empty token sequence")
        if _pending_operands(self.tokens, vocab) != 0:
            raise ExprError("incomplete prefix expression")
        if not any(vocab.is_terminal(t) for t in self.tokens):
            raise ExprError("expression contains no terminal")
        if self.option_id < 0:
            raise ExprError(f"negative option id {self.option_id}")

    def __len__(self) -> int:
        return len(self.tokens)

    def uses_pow(self) -> bool:
        return POW_TOKEN in self.tokens


def complexity(expr: FactorExpr) -> int:
    """Token count of the prefix sequence (the conciseness measure)."""
    return len(expr.tokens)


def legal_next_tokens(
    partial, max_length: int = DEFAULT_MAX_LENGTH, vocab: Vocabulary | None = None
) -> tuple[int, ...]:
    """Tokens t such that partial + (t,) can still complete within max_length.

    A completable nonempty-extension prefix always admits at least every
    terminal, so the result is never empty under the precondition.
    """
    vocab = vocab or Vocabulary()
    partial = tuple(partial)
    need = _pending_operands(partial, vocab)
    if need == 0 and partial:
        raise UsageError("expression already complete: no legal extension")
    slots_left = max_length - len(partial) - 1
    if need > slots_left + 1:
        raise ExprError(
            f"prefix of length {len(partial)} with {need} open operands "
            f"cannot complete within max_length {max_length}"
        )
    return tuple(
        tok for tok in vocab.tokens() if need + vocab.arity(tok) - 1 <= slots_left
    )


def random_expression(
    rng: np.random.Generator,
    catalog: OptionCatalog,
    max_length: int = DEFAULT_MAX_LENGTH,
    vocab: Vocabulary | None = None,
) -> FactorExpr:
    """Uniform random walk over legal tokens; used for tests and baselines."""
    vocab = vocab or Vocabulary()
    tokens: list[int] = []
    while not tokens or _pending_operands(tokens, vocab) > 0:
        legal = legal_next_tokens(tokens, max_length, vocab)
        tokens.append(int(legal[rng.integers(len(legal))]))
    option_id = int(rng.integers(catalog.n_options))
    return FactorExpr(tuple(tokens), option_id)


# ---------------------------------------------------------------------------
# Protected evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactorValues:
    """Per-(day, symbol) factor values with strict validity propagation."""

    days: tuple[dt.date, ...]
    symbols: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        expected = (len(self.days), len(self.symbols))
        if self.values.shape != expected or self.mask.shape != expected:
            raise ExprError(f"factor values shape mismatch: {self.values.shape} vs {expected}")
        self.values.setflags(write=False)
        self.mask.setflags(write=False)


def _finalize(
    out: np.ndarray, valid: np.ndarray, may_overflow: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    # ops that are bounded, guarded, or clamped cannot produce non-finite
    # values from finite inputs and skip the isfinite sweep
    if may_overflow:
        valid = valid & np.isfinite(out)
    return np.where(valid, out, 0.0), valid


def _apply_unary(name: str, x, valid):
    with np.errstate(all="ignore"):
        if name == "inv":
            valid = valid & (np.abs(x) >= DIV_GUARD)
            out = np.where(valid, 1.0 / np.where(valid, x, 1.0), 0.0)
            return _finalize(out, valid, may_overflow=False)
        if name == "sqr":
            return _finalize(x * x, valid)
        if name == "sqrt":
            return _finalize(np.sqrt(np.abs(x)), valid, may_overflow=False)
        if name == "sin":
            return _finalize(np.sin(x), valid, may_overflow=False)
        if name == "cos":
            return _finalize(np.cos(x), valid, may_overflow=False)
        if name == "tan":
            # poles at pi/2 + k*pi
            u = (x - np.pi / 2.0) / np.pi
            dist = np.abs(u - np.round(u)) * np.pi
            valid = valid & (dist >= TAN_GUARD)
            return _finalize(np.tan(x), valid, may_overflow=False)
        if name == "atan":
            return _finalize(np.arctan(x), valid, may_overflow=False)
        if name == "log":
            valid = valid & (np.abs(x) >= LOG_GUARD)
            out = np.log(np.where(valid, np.abs(x), 1.0))
            return _finalize(out, valid, may_overflow=False)
        if name == "exp":
            out = np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))
            return _finalize(out, valid, may_overflow=False)
        if name == "abs":
            return _finalize(np.abs(x), valid, may_overflow=False)
    raise ExprError(f"unknown unary op {name!r}")  # pragma: no cover


def _apply_binary(name: str, a, b, valid):
    with np.errstate(all="ignore"):
        if name == "add":
            return _finalize(a + b, valid)
        if name == "sub":
            return _finalize(a - b, valid)
        if name == "mul":
            return _finalize(a * b, valid)
        if name == "div":
            valid = valid & (np.abs(b) >= DIV_GUARD)
            out = np.where(valid, a / np.where(valid, b, 1.0), 0.0)
            return _finalize(out, valid)
        if name == "pow":
            # exp(b * ln|a|) with the log guard and the exp clamp
            valid = valid & (np.abs(a) >= LOG_GUARD)
            out = np.exp(
                np.clip(b * np.log(np.where(valid, np.abs(a), 1.0)), -EXP_CLAMP, EXP_CLAMP)
            )
            return _finalize(out, valid, may_overflow=False)
    raise ExprError(f"unknown binary op {name!r}")  # pragma: no cover


def evaluate(
    expr: FactorExpr,
    catalog: OptionCatalog,
    panel: Panel,
    aggregation: str = "mean",
) -> FactorValues:
    """Evaluate an expression minute-by-minute, then collapse to daily values.

    Aggregation "mean" averages a day's minute values and is valid only
    when every minute cell feeding it is valid; "last" takes the final
    minute and inherits just that cell's validity.  Output cells are
    finite wherever valid.
    """
    if aggregation not in ("mean", "last"):
        raise UsageError(f"unknown aggregation {aggregation!r}")
    weights = catalog.weights(expr.option_id)
    vocab = Vocabulary(include_pow=True)

    stack: list[tuple[np.ndarray, np.ndarray]] = []
    for tok in reversed(expr.tokens):
        arity = vocab.arity(tok)
        if arity == 0:
            vals = weights[tok] * panel.values[..., tok]
            stack.append(_finalize(vals, panel.mask.copy()))
        elif arity == 1:
            x, v = stack.pop()
            stack.append(_apply_unary(vocab.name(tok), x, v))
        else:
            a, va = stack.pop()
            b, vb = stack.pop()
            stack.append(_apply_binary(vocab.name(tok), a, b, va & vb))
    minute_vals, minute_valid = stack.pop()

    if aggregation == "mean":
        day_valid = minute_valid.all(axis=2)
        day_vals = np.where(day_valid, minute_vals.mean(axis=2), 0.0)
    else:
        day_valid = minute_valid[..., -1]
        day_vals = np.where(day_valid, minute_vals[..., -1], 0.0)
    return FactorValues(panel.days, panel.symbols, day_vals, day_valid)


# ---------------------------------------------------------------------------
# Formula text
# ---------------------------------------------------------------------------


def _format_weight(w: float) -> str:
    return repr(float(w))


def serialize(expr: FactorExpr, catalog: OptionCatalog) -> str:
    """Fully parenthesized infix text with terminals printed as "(w·name)"."""
    weights = catalog.weights(expr.option_id)
    vocab = Vocabulary(include_pow=True)
    pos = 0

    def walk() -> str:
        nonlocal pos
        tok = expr.tokens[pos]
        pos += 1
        arity = vocab.arity(tok)
        name = vocab.name(tok)
        if arity == 0:
            return f"({_format_weight(weights[tok])}·{name})"
        if arity == 1:
            return f"{name}({walk()})"
        left = walk()
        right = walk()
        return f"({left}{_BINARY_SYMBOL[name]}{right})"

    return walk()


_MINUS_CHARS = {"-", "−"}  # ASCII hyphen and the math minus sign
_DOT_CHARS = {"·", "*"}


def _lex(text: str) -> list[tuple[str, str, int]]:
    """(kind, value, position) tokens; kinds: lparen rparen op number name."""
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch == "(":
            out.append(("lparen", ch, i))
            i += 1
        elif ch == ")":
            out.append(("rparen", ch, i))
            i += 1
        elif ch in _MINUS_CHARS:
            out.append(("op", "-", i))
            i += 1
        elif ch in _DOT_CHARS:
            out.append(("op", "·", i))
            i += 1
        elif ch in "+/^":
            out.append(("op", ch, i))
            i += 1
        elif ch.isdigit() or ch == ".":
            j = i
            while j < len(text) and (text[j].isdigit() or text[j] in ".eE" or
                                     (text[j] in "+-" and text[j - 1] in "eE")):
                j += 1
            out.append(("number", text[i:j], i))
            i = j
        elif ch.isalpha():
            j = i
            while j < len(text) and text[j].isalpha():
                j += 1
            out.append(("name", text[i:j], i))
            i = j
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    return out


class _Parser:
    """Precedence-climbing parser for the formula surface syntax.

    Precedence: ^ binds tighter than · and /, which bind tighter than
    + and -.  Binary operators at equal precedence associate left; ^
    associates right.  Emits prefix token sequences plus the terminal
    (feature, weight) constraints seen along the way.
    """

    def __init__(self, text: str, include_pow: bool):
        self.text = text
        self.toks = _lex(text)
        self.i = 0
        self.include_pow = include_pow
        self.vocab = Vocabulary(include_pow=True)
        self.constraints: list[tuple[int, float, int]] = []  # (feature, weight, pos)

    def peek(self, ahead: int = 0):
        j = self.i + ahead
        return self.toks[j] if j < len(self.toks) else ("eof", "", len(self.text))

    def advance(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, kind: str, value: str | None = None):
        tok = self.advance()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise ParseError(f"expected {value or kind}, found {tok[1] or 'end of input'}", tok[2])
        return tok

    def parse(self) -> list[int]:
        tokens = self.expr()
        trailing = self.peek()
        if trailing[0] != "eof":
            raise ParseError(f"unexpected trailing input {trailing[1]!r}", trailing[2])
        return tokens

    def expr(self) -> list[int]:
        left = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.advance()[1]
            right = self.term()
            left = [self.vocab.token_for("add" if op == "+" else "sub")] + left + right
        return left

    def term(self) -> list[int]:
        left = self.power()
        while self.peek()[0] == "op" and self.peek()[1] in ("·", "/"):
            op = self.advance()[1]
            right = self.power()
            left = [self.vocab.token_for("mul" if op == "·" else "div")] + left + right
        return left

    def power(self) -> list[int]:
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            pos = self.advance()[2]
            if not self.include_pow:
                raise ParseError("exponentiation is disabled (enable the pow operator)", pos)
            exponent = self.power()
            return [POW_TOKEN] + base + exponent
        return base

    def primary(self) -> list[int]:
        kind, value, pos = self.peek()
        if kind == "lparen":
            if (
                self.peek(1)[0] == "number"
                and self.peek(2)[:2] == ("op", "·")
                and self.peek(3)[0] == "name"
                and self.peek(4)[0] == "rparen"
            ):
                return self.weighted_terminal()
            self.advance()
            inner = self.expr()
            self.expect("rparen")
            return inner
        if kind == "name":
            self.advance()
            if value not in UNARY_OPS:
                raise ParseError(f"unknown operator {value!r}", pos)
            self.expect("lparen")
            inner = self.expr()
            self.expect("rparen")
            return [self.vocab.token_for(value)] + inner
        raise ParseError(f"expected an expression, found {value or 'end of input'}", pos)

    def weighted_terminal(self) -> list[int]:
        self.expect("lparen")
        num = self.expect("number")
        try:
            weight = float(num[1])
        except ValueError:
            raise ParseError(f"bad weight {num[1]!r}", num[2]) from None
        self.expect("op", "·")
        name = self.expect("name")
        if name[1] not in FEATURES:
            raise ParseError(f"unknown feature name {name[1]!r}", name[2])
        self.expect("rparen")
        feature = FEATURES.index(name[1])
        self.constraints.append((feature, weight, num[2]))
        return [feature]


def parse(
    text: str,
    catalog: OptionCatalog,
    max_length: int = DEFAULT_MAX_LENGTH,
    include_pow: bool = False,
    option_id: int | None = None,
) -> FactorExpr:
    """Parse formula text back into a FactorExpr.

    The option is inferred as the catalog entry containing every printed
    weight (lowest index on ties); pass option_id to pin it explicitly,
    e.g. when loading pool files that carry the index out of band.
    """
    parser = _Parser(text, include_pow=include_pow)
    tokens = parser.parse()
    if len(tokens) > max_length:
        raise ParseError(f"expression length {len(tokens)} exceeds max_length {max_length}", 0)

    if option_id is None:
        candidates = list(range(catalog.n_options))
        for feature, weight, pos in parser.constraints:
            candidates = [
                k for k in candidates if abs(catalog.weights(k)[feature] - weight) <= 1e-9
            ]
            if not candidates:
                raise ParseError(
                    f"weight {weight!r} for {FEATURES[feature]!r} matches no catalog option", pos
                )
        option_id = candidates[0]
    else:
        for feature, weight, pos in parser.constraints:
            if abs(catalog.weights(option_id)[feature] - weight) > 1e-9:
                raise ParseError(
                    f"weight {weight!r} for {FEATURES[feature]!r} conflicts with option {option_id}",
                    pos,
                )
    return FactorExpr(tuple(tokens), option_id)
