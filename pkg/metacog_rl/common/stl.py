"""Signal temporal logic: formula AST, parser, grid robustness and the smooth conjunction."""
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import pyparsing as pp
from scipy.special import logsumexp

from metacog_rl.common.errors import (
    EmptyWindowError,
    FormulaSyntaxError,
    IntervalError,
    UnknownSignalError,
)
from metacog_rl.common.trajectory import Trajectory


pp.ParserElement.enable_packrat()

# Tolerance when snapping interval endpoints onto the sample grid.
_GRID_TOL = 1e-9

FUNCTIONS = ("abs", "min", "max", "norm2")


# ---------------------------------------------------------------------------
# Arithmetic expressions over signal components


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Signal:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Func:
    name: str
    args: Tuple["Expr", ...]


Expr = Union[Const, Signal, Neg, BinOp, Func]

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def _expr_precedence(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PRECEDENCE[e.op]
    if isinstance(e, Neg):
        return 3
    return 4


def _format_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def format_expr(e: Expr) -> str:
    """Canonical text of an arithmetic expression."""
    if isinstance(e, Const):
        return _format_number(e.value)
    if isinstance(e, Signal):
        return e.name
    if isinstance(e, Neg):
        inner = format_expr(e.arg)
        return f"-({inner})" if _expr_precedence(e.arg) < 3 else f"-{inner}"
    if isinstance(e, BinOp):
        prec = _PRECEDENCE[e.op]
        left, right = format_expr(e.left), format_expr(e.right)
        if _expr_precedence(e.left) < prec:
            left = f"({left})"
        if _expr_precedence(e.right) <= prec:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    if isinstance(e, Func):
        return f"{e.name}({', '.join(format_expr(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


def expr_signals(e: Expr) -> Iterator[str]:
    """Yields every signal name referenced by ``e``."""
    if isinstance(e, Signal):
        yield e.name
    elif isinstance(e, Neg):
        yield from expr_signals(e.arg)
    elif isinstance(e, BinOp):
        yield from expr_signals(e.left)
        yield from expr_signals(e.right)
    elif isinstance(e, Func):
        for a in e.args:
            yield from expr_signals(a)


def eval_expr(e: Expr, signals: Dict[str, np.ndarray]):
    """Evaluates ``e`` elementwise; ``signals`` maps names to scalars or equally shaped arrays."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Signal):
        if e.name not in signals:
            raise UnknownSignalError(f"unknown signal component '{e.name}'")
        return signals[e.name]
    if isinstance(e, Neg):
        return -eval_expr(e.arg, signals)
    if isinstance(e, BinOp):
        a, b = eval_expr(e.left, signals), eval_expr(e.right, signals)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(a, b)
    if isinstance(e, Func):
        args = [eval_expr(a, signals) for a in e.args]
        if e.name == "abs":
            return np.abs(args[0])
        if e.name == "min":
            return np.minimum.reduce(np.broadcast_arrays(*args)) if len(args) > 1 else args[0]
        if e.name == "max":
            return np.maximum.reduce(np.broadcast_arrays(*args)) if len(args) > 1 else args[0]
        return np.sqrt(sum(np.square(a) for a in args))
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Formulas


@dataclass(frozen=True)
class Predicate:
    """Atomic proposition ``z(x) > 0`` with predicate function ``expr``."""

    name: str
    expr: Expr
    text: Optional[str] = field(default=None, compare=False)

    def evaluate(self, signals: Dict[str, np.ndarray]):
        """Predicate function value(s) for the given signal values."""
        z = eval_expr(self.expr, signals)
        if not np.all(np.isfinite(z)):
            raise ValueError(f"predicate '{self.name}' evaluated to a non-finite value")
        return z

    @classmethod
    def from_comparison(cls, lhs: Expr, cmp: str, rhs: Expr) -> "Predicate":
        """``lhs > rhs`` becomes ``lhs - rhs`` and ``lhs < rhs`` becomes ``rhs - lhs``."""
        if cmp in (">", ">="):
            expr = BinOp("-", lhs, rhs)
        elif cmp in ("<", "<="):
            expr = BinOp("-", rhs, lhs)
        else:
            raise ValueError(f"unknown comparison '{cmp}'")
        text = f"{format_expr(lhs)} {cmp} {format_expr(rhs)}"
        return cls(name=text, expr=expr, text=text)

    @classmethod
    def from_expression(cls, text: str, name: Optional[str] = None) -> "Predicate":
        """Predicate whose function is the arithmetic expression ``text`` itself."""
        expr = parse_expression(text)
        canonical = format_expr(expr)
        return cls(name=name or canonical, expr=expr, text=f"{canonical} > 0")


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class Pred:
    predicate: Predicate


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


def _check_interval(a: float, b: float):
    if not (math.isfinite(a) and math.isfinite(b)):
        raise IntervalError(f"interval [{a}, {b}] must be finite")
    if a < 0 or b < 0:
        raise IntervalError(f"negative interval [{a}, {b}]")
    if a > b:
        raise IntervalError(f"inverted interval [{a}, {b}]")


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    arg: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Always:
    a: float
    b: float
    arg: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Until:
    a: float
    b: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


Formula = Union[TrueF, Pred, Not, And, Or, Eventually, Always, Until]


def format_formula(f: Formula) -> str:
    """Canonical text of a formula; ``parse_formula(format_formula(f))`` rebuilds ``f``."""
    if isinstance(f, TrueF):
        return "T"
    if isinstance(f, Pred):
        return f.predicate.text or f"{format_expr(f.predicate.expr)} > 0"
    if isinstance(f, Not):
        return f"!({format_formula(f.arg)})"
    if isinstance(f, And):
        return f"{_operand(f.left)} & {_operand(f.right)}"
    if isinstance(f, Or):
        return f"{_operand(f.left)} | {_operand(f.right)}"
    if isinstance(f, Always):
        return f"G[{_format_number(f.a)},{_format_number(f.b)}]({format_formula(f.arg)})"
    if isinstance(f, Eventually):
        return f"F[{_format_number(f.a)},{_format_number(f.b)}]({format_formula(f.arg)})"
    if isinstance(f, Until):
        return f"({format_formula(f.left)} U[{_format_number(f.a)},{_format_number(f.b)}] {format_formula(f.right)})"
    raise TypeError(f"not a formula: {f!r}")


def _operand(f: Formula) -> str:
    text = format_formula(f)
    return f"({text})" if isinstance(f, (And, Or)) else text


def formula_predicates(f: Formula) -> Iterator[Predicate]:
    """Yields every predicate of ``f`` in left-to-right order."""
    if isinstance(f, Pred):
        yield f.predicate
    elif isinstance(f, (Not, Eventually, Always)):
        yield from formula_predicates(f.arg)
    elif isinstance(f, (And, Or, Until)):
        yield from formula_predicates(f.left)
        yield from formula_predicates(f.right)


# ---------------------------------------------------------------------------
# Parser


def _build_grammar():
    LPAR, RPAR, LBRACK, RBRACK, COMMA = map(pp.Suppress, "()[],")
    kw_true, kw_g, kw_f, kw_u = (pp.Keyword(k) for k in ("T", "G", "F", "U"))
    kw_func = pp.MatchFirst([pp.Keyword(k) for k in FUNCTIONS])
    reserved = kw_true | kw_g | kw_f | kw_u | kw_func

    number = pp.Regex(r"(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?").set_name("number")
    number.set_parse_action(lambda t: Const(float(t[0])))
    signed = pp.Regex(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?").set_name("interval bound")
    signed.set_parse_action(lambda t: float(t[0]))
    ident = (~reserved + pp.Word(pp.alphas, pp.alphanums + "_")).set_name("signal")
    ident.set_parse_action(lambda t: Signal(t[0]))

    arith = pp.Forward().set_name("expression")
    call = kw_func + LPAR + pp.Group(pp.DelimitedList(arith)) + RPAR
    call.set_parse_action(lambda t: Func(t[0], tuple(t[1])))
    operand = call | number | ident
    arith <<= pp.infix_notation(
        operand,
        [
            (pp.Literal("-"), 1, pp.OpAssoc.RIGHT, _fold_neg),
            (pp.one_of("* /"), 2, pp.OpAssoc.LEFT, _fold_binop),
            (pp.one_of("+ -"), 2, pp.OpAssoc.LEFT, _fold_binop),
        ],
    )

    formula = pp.Forward().set_name("formula")
    interval = LBRACK + signed + COMMA + signed + RBRACK
    comparison = arith + pp.one_of("<= >= < >") + arith
    comparison.set_parse_action(lambda t: Pred(Predicate.from_comparison(t[0], t[1], t[2])))
    true_ = kw_true.copy().set_parse_action(lambda: TrueF())
    always = kw_g + interval + LPAR + formula + RPAR
    always.set_parse_action(lambda t: Always(t[1], t[2], t[3]))
    eventually = kw_f + interval + LPAR + formula + RPAR
    eventually.set_parse_action(lambda t: Eventually(t[1], t[2], t[3]))
    until = LPAR + formula + kw_u + interval + formula + RPAR
    until.set_parse_action(lambda t: Until(t[2], t[3], t[0], t[4]))
    atom = true_ | always | eventually | until | comparison
    formula <<= pp.infix_notation(
        atom,
        [
            (pp.Literal("!"), 1, pp.OpAssoc.RIGHT, _fold_not),
            (pp.Literal("&"), 2, pp.OpAssoc.LEFT, _fold_logic),
            (pp.Literal("|"), 2, pp.OpAssoc.LEFT, _fold_logic),
        ],
    )
    return formula, arith


def _fold_neg(tokens):
    t = tokens[0]
    node = t[-1]
    for _ in t[:-1]:
        node = Neg(node)
    return node


def _fold_binop(tokens):
    t = tokens[0]
    node = t[0]
    for op, rhs in zip(t[1::2], t[2::2]):
        node = BinOp(op, node, rhs)
    return node


def _fold_not(tokens):
    t = tokens[0]
    node = t[-1]
    for _ in t[:-1]:
        node = Not(node)
    return node


def _fold_logic(tokens):
    t = tokens[0]
    node = t[0]
    for op, rhs in zip(t[1::2], t[2::2]):
        node = And(node, rhs) if op == "&" else Or(node, rhs)
    return node


_FORMULA_GRAMMAR, _EXPR_GRAMMAR = _build_grammar()


def _check_schema(names: Sequence[str], schema: Optional[Sequence[str]]):
    if schema is None:
        return
    allowed = set(schema)
    if "r1" in allowed:
        allowed.add("r")
    for name in names:
        if name not in allowed:
            raise UnknownSignalError(f"unknown signal component '{name}' (schema: {', '.join(schema)})")


def parse_formula(text: str, schema: Optional[Sequence[str]] = None) -> Formula:
    """Parses STL text into a formula.

    Grammar: ``T | <expr> <cmp> <expr> | ! f | f & f | f "|" f | G[a,b](f) | F[a,b](f) | (f U[a,b] f)``.

    Args:
        text: formula text
        schema: allowed signal component names (unchecked when None)

    Returns:
        Formula: the parsed AST

    Raises:
        FormulaSyntaxError: on malformed text (carries line and column)
        UnknownSignalError: when a signal is not in ``schema``
        IntervalError: on negative or inverted intervals
    """
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula", 1, 1)
    try:
        f = _FORMULA_GRAMMAR.parse_string(text, parse_all=True)[0]
    except pp.ParseException as e:
        raise FormulaSyntaxError(e.msg, e.lineno, e.col) from e
    _check_schema([s for p in formula_predicates(f) for s in expr_signals(p.expr)], schema)
    return f


def parse_expression(text: str, schema: Optional[Sequence[str]] = None) -> Expr:
    """Parses an arithmetic expression over signal components."""
    try:
        e = _EXPR_GRAMMAR.parse_string(text, parse_all=True)[0]
    except pp.ParseException as exc:
        raise FormulaSyntaxError(exc.msg, exc.lineno, exc.col) from exc
    _check_schema(list(expr_signals(e)), schema)
    return e


# ---------------------------------------------------------------------------
# Robustness on the sample grid


def _trajectory_signals(traj: Trajectory) -> Dict[str, np.ndarray]:
    signals = {name: traj.signal(name) for name in traj.schema()}
    return signals


def window_steps(a: float, b: float, dt: float) -> Tuple[int, int]:
    """Sample offsets ``(ka, kb)`` covering times in ``[t + a, t + b]``."""
    ka = int(math.ceil(a / dt - _GRID_TOL))
    kb = int(math.floor(b / dt + _GRID_TOL))
    return ka, kb


def _window_reduce(values: np.ndarray, ka: int, kb: int, take_min: bool) -> np.ndarray:
    """Min (or max) of ``values[i+ka : i+kb+1]`` for every i, skipping NaN, NaN when the window is empty."""
    L = len(values)
    out = np.full(L, np.nan)
    if kb < ka:
        return out
    dq = deque()
    nxt = 0
    for i in range(L):
        lo = i + ka
        if lo > L - 1:
            break
        hi = min(i + kb, L - 1)
        while nxt <= hi:
            v = values[nxt]
            if not np.isnan(v):
                while dq and ((v <= values[dq[-1]]) if take_min else (v >= values[dq[-1]])):
                    dq.pop()
                dq.append(nxt)
            nxt += 1
        while dq and dq[0] < lo:
            dq.popleft()
        if dq:
            out[i] = values[dq[0]]
    return out


def _until_signal(left: np.ndarray, right: np.ndarray, ka: int, kb: int) -> np.ndarray:
    L = len(left)
    out = np.full(L, np.nan)
    left_inf = np.where(np.isnan(left), np.inf, left)
    for i in range(L):
        lo, hi = i + ka, min(i + kb, L - 1)
        if lo > hi:
            continue
        # running min of the left operand over [t, t'] for every t' up to the window end
        running = np.minimum.accumulate(left_inf[i : hi + 1])[lo - i :]
        cand = np.minimum(right[lo : hi + 1], running)
        cand = cand[~np.isnan(right[lo : hi + 1])]
        if cand.size:
            out[i] = np.max(cand)
    return out


def robustness_signal(f: Formula, traj: Trajectory) -> np.ndarray:
    """Robustness of ``f`` at every sample of ``traj`` (NaN where a temporal window is empty)."""
    return _robustness_signal(f, traj, _trajectory_signals(traj))


def _robustness_signal(f: Formula, traj: Trajectory, signals: Dict[str, np.ndarray]) -> np.ndarray:
    L = len(traj)
    if isinstance(f, TrueF):
        return np.full(L, np.inf)
    if isinstance(f, Pred):
        return np.broadcast_to(np.asarray(f.predicate.evaluate(signals), dtype=float), (L,)).copy()
    if isinstance(f, Not):
        return -_robustness_signal(f.arg, traj, signals)
    if isinstance(f, And):
        return np.minimum(_robustness_signal(f.left, traj, signals), _robustness_signal(f.right, traj, signals))
    if isinstance(f, Or):
        return np.maximum(_robustness_signal(f.left, traj, signals), _robustness_signal(f.right, traj, signals))
    if isinstance(f, (Always, Eventually)):
        ka, kb = window_steps(f.a, f.b, traj.dt)
        inner = _robustness_signal(f.arg, traj, signals)
        return _window_reduce(inner, ka, kb, take_min=isinstance(f, Always))
    if isinstance(f, Until):
        ka, kb = window_steps(f.a, f.b, traj.dt)
        return _until_signal(
            _robustness_signal(f.left, traj, signals), _robustness_signal(f.right, traj, signals), ka, kb
        )
    raise TypeError(f"not a formula: {f!r}")


def robustness(f: Formula, traj: Trajectory, t: float) -> float:
    """Spatial robustness of ``f`` on ``traj`` at time ``t``.

    Temporal windows are truncated to the available samples.

    Raises:
        EmptyWindowError: when a window needed at ``t`` holds no sample
    """
    i = traj.index_of(t)
    value = robustness_signal(f, traj)[i]
    if np.isnan(value):
        raise EmptyWindowError(f"empty evaluation window for '{format_formula(f)}' at t={t}")
    return float(value)


def brute_force_robustness(f: Formula, traj: Trajectory, t: float) -> float:
    """Reference evaluator: exhaustive scan of every window with plain loops."""
    signals = _trajectory_signals(traj)
    value = _brute(f, traj, signals, traj.index_of(t))
    if value is None:
        raise EmptyWindowError(f"empty evaluation window for '{format_formula(f)}' at t={t}")
    return value


def _brute(f: Formula, traj: Trajectory, signals, i: int) -> Optional[float]:
    L = len(traj)
    if isinstance(f, TrueF):
        return math.inf
    if isinstance(f, Pred):
        z = np.broadcast_to(np.asarray(f.predicate.evaluate(signals), dtype=float), (L,))
        return float(z[i])
    if isinstance(f, Not):
        v = _brute(f.arg, traj, signals, i)
        return None if v is None else -v
    if isinstance(f, (And, Or)):
        a, b = _brute(f.left, traj, signals, i), _brute(f.right, traj, signals, i)
        if a is None or b is None:
            return None
        return min(a, b) if isinstance(f, And) else max(a, b)
    ka, kb = window_steps(f.a, f.b, traj.dt)
    window = range(i + ka, min(i + kb, L - 1) + 1)
    if isinstance(f, (Always, Eventually)):
        vals = [v for v in (_brute(f.arg, traj, signals, j) for j in window) if v is not None]
        if not vals:
            return None
        return min(vals) if isinstance(f, Always) else max(vals)
    if isinstance(f, Until):
        best = None
        for j in window:
            g = _brute(f.right, traj, signals, j)
            if g is None:
                continue
            lefts = [v for v in (_brute(f.left, traj, signals, k) for k in range(i, j + 1)) if v is not None]
            cand = min([g] + lefts)
            best = cand if best is None else max(best, cand)
        return best
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Predicate stacks and the smooth conjunction


@dataclass(frozen=True, eq=False)
class PredicateStack:
    """Safety predicates plus the liveness predicate ``eps - ||x - r_theta||``."""

    safety: Tuple[Predicate, ...]
    eps: float
    setpoint: np.ndarray

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        object.__setattr__(self, "safety", tuple(self.safety))
        object.__setattr__(self, "setpoint", np.asarray(self.setpoint, dtype=float).ravel())

    @property
    def size(self) -> int:
        return len(self.safety) + 1

    def with_setpoint(self, setpoint: np.ndarray) -> "PredicateStack":
        return PredicateStack(self.safety, self.eps, setpoint)


def state_signals(x: np.ndarray, setpoint: np.ndarray) -> Dict[str, np.ndarray]:
    """Signal dictionary for a state (or a batch of states along axis 0) and its setpoint."""
    x = np.asarray(x, dtype=float)
    setpoint = np.asarray(setpoint, dtype=float)
    signals = {f"x{i + 1}": x[..., i] for i in range(x.shape[-1])}
    signals.update({f"r{i + 1}": setpoint[..., i] for i in range(setpoint.shape[-1])})
    signals["r"] = setpoint[..., 0]
    return signals


def robustness_vector(stack: PredicateStack, x: np.ndarray) -> np.ndarray:
    """Predicate values ``[z_1(x), ..., z_N(x), eps - ||x - r_theta||]``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != stack.setpoint.shape:
        raise ValueError(f"state has dimension {x.size}, setpoint {stack.setpoint.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    signals = state_signals(x, stack.setpoint)
    values = [float(p.evaluate(signals)) for p in stack.safety]
    values.append(stack.eps - float(np.linalg.norm(x - stack.setpoint)))
    return np.array(values)


def robustness_matrix(stack: PredicateStack, states: np.ndarray, references: Optional[np.ndarray] = None) -> np.ndarray:
    """Row i is ``robustness_vector`` of ``states[i]`` with setpoint ``references[i]`` (default: the stack's)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if references is None:
        references = np.broadcast_to(stack.setpoint, states.shape)
    references = np.asarray(references, dtype=float)
    signals = state_signals(states, references)
    cols = [np.broadcast_to(np.asarray(p.evaluate(signals), dtype=float), (states.shape[0],)) for p in stack.safety]
    cols.append(stack.eps - np.linalg.norm(states - references, axis=1))
    return np.column_stack(cols)


def smooth_conjunction(rhos, axis: int = -1):
    """Smooth under-approximation of the minimum: ``-log(sum_i exp(-rho_i))``.

    Satisfies ``min(rho) - log(len(rho)) <= result <= min(rho)``.
    """
    rhos = np.asarray(rhos, dtype=float)
    if rhos.size == 0 or rhos.shape[axis] == 0:
        raise ValueError("smooth_conjunction needs at least one value")
    if not np.all(np.isfinite(rhos)):
        raise ValueError("smooth_conjunction needs finite values")
    return -logsumexp(-rhos, axis=axis)
