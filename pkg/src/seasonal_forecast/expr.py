"""Expression trees over the seasonal feature variables.

Trees are immutable. Every node caches its depth, node count, weighted
complexity and hash at construction so the evolutionary loop can compare,
measure and memoize individuals in O(1).

Evaluation is strict: division by zero, the log of a non-positive number and
overflow produce a non-finite value (NaN) instead of a protected substitute.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "VARIABLES",
    "PRIMITIVES",
    "Primitive",
    "Constant",
    "Variable",
    "Apply",
    "FunctionSet",
    "TerminalSet",
    "ExprSyntaxError",
    "UnknownVariableError",
    "evaluate",
    "evaluate_columns",
    "complexity",
    "depth",
    "variables_of",
    "iter_nodes",
    "node_at",
    "replace_at",
    "fold_constants",
    "parse",
    "to_text",
    "load_formulas",
    "random_tree",
    "crossover",
    "mutate",
]

# Order matches the feature vector inputs.
VARIABLES = ("Y", "S", "MST", "MSDMT", "MSDmT", "MYT", "MSR", "NSRD")

NON_FINITE = math.nan


class ExprSyntaxError(ValueError):
    """Raised on malformed formula text; ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownVariableError(KeyError):
    """A tree references a variable the input does not provide."""


# -- scalar kernels ----------------------------------------------------------


def _div(a, b):
    return a / b


def _ln(a):
    return math.log(a)


def _logistic(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _gauss(z):
    return math.exp(-(z * z))


def _min(a, b):
    if a != a or b != b:
        return math.nan
    return a if a <= b else b


# -- vector kernels ----------------------------------------------------------


def _v_logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def _v_gauss(z):
    return np.exp(-np.square(z))


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int
    weight: int
    scalar: Callable = field(repr=False, compare=False)
    vector: Callable = field(repr=False, compare=False)
    symbol: str | None = None  # infix operator, if any


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in (
        Primitive("add", 2, 1, lambda a, b: a + b, np.add, "+"),
        Primitive("sub", 2, 1, lambda a, b: a - b, np.subtract, "-"),
        Primitive("mul", 2, 1, lambda a, b: a * b, np.multiply, "*"),
        Primitive("div", 2, 2, _div, np.divide, "/"),
        Primitive("sin", 1, 3, math.sin, np.sin),
        Primitive("cos", 1, 3, math.cos, np.cos),
        Primitive("tan", 1, 3, math.tan, np.tan),
        Primitive("exp", 1, 3, math.exp, np.exp),
        Primitive("ln", 1, 3, _ln, np.log),
        Primitive("logistic", 1, 3, _logistic, _v_logistic),
        Primitive("tanh", 1, 3, math.tanh, np.tanh),
        Primitive("gauss", 1, 3, _gauss, _v_gauss),
        Primitive("min", 2, 4, _min, np.minimum),
    )
}

_INFIX = {p.symbol: p.name for p in PRIMITIVES.values() if p.symbol}
_FUNC_ALIASES = {"log": "ln", "gaussian": "gauss"}


# -- nodes -------------------------------------------------------------------


class Constant:
    __slots__ = ("value", "_hash")
    depth = 1
    size = 1
    complexity = 1

    def __init__(self, value: float):
        self.value = float(value)
        self._hash = hash(("c", self.value))

    def __eq__(self, other):
        return isinstance(other, Constant) and self.value == other.value

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"Constant({self.value!r})"


class Variable:
    __slots__ = ("name", "_hash")
    depth = 1
    size = 1
    complexity = 1

    def __init__(self, name: str):
        self.name = name
        self._hash = hash(("v", name))

    def __eq__(self, other):
        return isinstance(other, Variable) and self.name == other.name

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"Variable({self.name!r})"


class Apply:
    __slots__ = ("op", "children", "depth", "size", "complexity", "_hash")

    def __init__(self, op: str, children: Sequence):
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise ValueError(f"unknown primitive {op!r}")
        children = tuple(children)
        if len(children) != prim.arity:
            raise ValueError(f"{op} takes {prim.arity} argument(s), got {len(children)}")
        self.op = op
        self.children = children
        self.depth = 1 + max(c.depth for c in children)
        self.size = 1 + sum(c.size for c in children)
        self.complexity = prim.weight + sum(c.complexity for c in children)
        self._hash = hash((op, children))

    def __eq__(self, other):
        return (
            isinstance(other, Apply)
            and self._hash == other._hash
            and self.op == other.op
            and self.children == other.children
        )

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"Apply({self.op!r}, {list(self.children)!r})"


Node = Constant | Variable | Apply


# -- function and terminal sets ----------------------------------------------

_ARITHMETIC = ("add", "sub", "mul", "div")
_STANDARD = _ARITHMETIC + ("sin", "cos", "tan", "exp", "ln", "logistic", "tanh", "min")


@dataclass(frozen=True)
class FunctionSet:
    """Primitives available to the search.

    ``standard()`` builds the baseline set (arithmetic, trigonometric,
    exponential, logarithm, logistic, tanh, min), optionally with the
    Gaussian. Arbitrary non-empty subsets are allowed for controlled runs.
    """

    primitives: tuple[str, ...] = _STANDARD

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("function set is empty")
        unknown = [p for p in self.primitives if p not in PRIMITIVES]
        if unknown:
            raise ValueError(f"unknown primitives: {unknown}")
        object.__setattr__(self, "primitives", tuple(dict.fromkeys(self.primitives)))

    @classmethod
    def standard(cls, gaussian: bool = False) -> "FunctionSet":
        return cls(_STANDARD + (("gauss",) if gaussian else ()))

    @property
    def gaussian_enabled(self) -> bool:
        return "gauss" in self.primitives

    def of_arity(self, arity: int) -> tuple[str, ...]:
        return tuple(p for p in self.primitives if PRIMITIVES[p].arity == arity)


@dataclass(frozen=True)
class TerminalSet:
    variables: tuple[str, ...] = VARIABLES
    const_low: float = -1.0
    const_high: float = 1.0
    # chance that a terminal is a random constant rather than a variable
    const_prob: float = 0.5

    def __post_init__(self):
        bad = [v for v in self.variables if v not in VARIABLES]
        if bad:
            raise ValueError(f"unknown variables: {bad}")
        if not self.const_low < self.const_high:
            raise ValueError("const_low must be below const_high")
        if not 0 <= self.const_prob <= 1 or (not self.variables and self.const_prob < 1):
            raise ValueError("const_prob must be in [0, 1], and 1 when there are no variables")


# -- measures ----------------------------------------------------------------


def complexity(tree: Node, weights: Mapping[str, int] | None = None) -> int:
    """Weighted node count: leaves weigh 1, each application its primitive's weight."""
    if weights is None:
        return tree.complexity
    total = 0
    for _, node, _ in iter_nodes(tree):
        if isinstance(node, Apply):
            total += weights.get(node.op, PRIMITIVES[node.op].weight)
        else:
            total += 1
    return total


def depth(tree: Node) -> int:
    return tree.depth


def variables_of(tree: Node) -> tuple[str, ...]:
    """Variables referenced by ``tree``, in canonical feature order."""
    seen = {node.name for _, node, _ in iter_nodes(tree) if isinstance(node, Variable)}
    ordered = [v for v in VARIABLES if v in seen]
    return tuple(ordered + sorted(seen.difference(VARIABLES)))


def iter_nodes(tree: Node) -> Iterator[tuple[tuple[int, ...], Node, int]]:
    """Pre-order walk yielding ``(path, node, level)``; the root is level 1."""
    stack = [((), tree, 1)]
    while stack:
        path, node, level = stack.pop()
        yield path, node, level
        if isinstance(node, Apply):
            for i in range(len(node.children) - 1, -1, -1):
                stack.append((path + (i,), node.children[i], level + 1))


def node_at(tree: Node, k: int) -> tuple[tuple[int, ...], Node, int]:
    """The ``k``-th node in pre-order as ``(path, node, level)``."""
    if not 0 <= k < tree.size:
        raise IndexError(k)
    path, level = [], 1
    node = tree
    while k:
        k -= 1
        for i, child in enumerate(node.children):
            if k < child.size:
                path.append(i)
                node = child
                level += 1
                break
            k -= child.size
    return tuple(path), node, level


def replace_at(tree: Node, path: tuple[int, ...], new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(tree.children)
    children[head] = replace_at(children[head], rest, new)
    return Apply(tree.op, children)


def fold_constants(tree: Node) -> Node:
    """Collapse all-constant subtrees into a single constant when finite."""
    if not isinstance(tree, Apply):
        return tree
    children = [fold_constants(c) for c in tree.children]
    if all(isinstance(c, Constant) for c in children):
        value = evaluate(Apply(tree.op, children), {})
        if math.isfinite(value):
            return Constant(value)
    return Apply(tree.op, children)


# -- evaluation --------------------------------------------------------------


def _eval_scalar(node: Node, x: Mapping[str, float]) -> float:
    if isinstance(node, Constant):
        value = node.value
    elif isinstance(node, Variable):
        try:
            value = float(x[node.name])
        except KeyError:
            raise UnknownVariableError(node.name) from None
    else:
        value = PRIMITIVES[node.op].scalar(*[_eval_scalar(c, x) for c in node.children])
    # an infinite intermediate must not come back finite (1/inf, tanh(-inf))
    return value if math.isfinite(value) else NON_FINITE


def evaluate(tree: Node, x: Mapping[str, float]) -> float:
    """Evaluate at one input point; returns NaN for any non-finite outcome."""
    try:
        value = _eval_scalar(tree, x)
    except (ZeroDivisionError, OverflowError, ValueError):
        return NON_FINITE
    return value if math.isfinite(value) else NON_FINITE


def _eval_vector(node: Node, cols: Mapping[str, np.ndarray]):
    if isinstance(node, Constant):
        return node.value if math.isfinite(node.value) else NON_FINITE
    if isinstance(node, Variable):
        try:
            out = cols[node.name]
        except KeyError:
            raise UnknownVariableError(node.name) from None
    else:
        prim = PRIMITIVES[node.op]
        out = prim.vector(*[_eval_vector(c, cols) for c in node.children])
    # a finite sum rules out inf cheaply; only otherwise scan element-wise
    if not math.isfinite(np.add.reduce(out, axis=None)) and np.isinf(out).any():
        out = np.where(np.isinf(out), np.nan, out)
    return out


def evaluate_columns(tree: Node, cols: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
    """Vectorized evaluation over column arrays.

    Rows where any intermediate value is non-finite come out as NaN, exactly
    as in ``evaluate``.
    """
    if n is None:
        n = len(next(iter(cols.values()))) if cols else 1
    with np.errstate(all="ignore"):
        out = _eval_vector(tree, cols)
    out = np.asarray(out, dtype=float)
    if out.shape != (n,):
        out = np.broadcast_to(out, (n,)).copy()
    return out


# -- text form ---------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),=]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            rest = text[pos:].lstrip()
            if not rest:
                break
            bad = len(text) - len(rest)
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, value: str | None = None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            raise ExprSyntaxError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> Node:
        # optional "MSTNY =" prefix
        if (
            len(self.tokens) > 2
            and self.tokens[0][0] == "name"
            and self.tokens[1][1] == "="
        ):
            self.i = 2
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprSyntaxError(f"unexpected {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = _INFIX[self.take()[1]]
            node = Apply(op, (node, self.term()))
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = _INFIX[self.take()[1]]
            node = Apply(op, (node, self.unary()))
        return node

    def unary(self) -> Node:
        if self.peek()[1] == "-":
            self.take()
            if self.peek()[0] == "num":
                return Constant(-float(self.take()[1]))
            # -e is read as (-1 * e)
            return Apply("mul", (Constant(-1.0), self.unary()))
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.primary()

    def primary(self) -> Node:
        kind, value, pos = self.peek()
        if kind == "num":
            self.take()
            return Constant(float(value))
        if value == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if kind == "name":
            self.take()
            if self.peek()[1] == "(":
                name = _FUNC_ALIASES.get(value.lower(), value.lower())
                prim = PRIMITIVES.get(name)
                if prim is None or prim.symbol is not None:
                    raise ExprSyntaxError(f"unknown function {value!r}", pos)
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                close = self.take(")")
                if len(args) != prim.arity:
                    raise ExprSyntaxError(
                        f"{name} takes {prim.arity} argument(s), got {len(args)}", close[2]
                    )
                return Apply(name, args)
            if value not in VARIABLES:
                raise ExprSyntaxError(f"unknown identifier {value!r}", pos)
            return Variable(value)
        raise ExprSyntaxError(f"unexpected {value or 'end of input'!r}", pos)


def parse(text: str) -> Node:
    """Parse infix formula text.

    Accepts an optional ``MSTNY =`` prefix, ``+ - * /`` with the usual
    precedence and left associativity, unary functions as ``name(arg)`` and
    ``min(a, b)``. A leading minus on a literal yields a negative constant.
    """
    return _Parser(text).parse()


def _fmt_const(v: float) -> str:
    s = repr(v)
    return f"({s})" if v < 0 or s.startswith("-") else s


def to_text(tree: Node) -> str:
    """Fully parenthesized canonical text; ``parse(to_text(t)) == t``."""
    if isinstance(tree, Constant):
        return _fmt_const(tree.value)
    if isinstance(tree, Variable):
        return tree.name
    prim = PRIMITIVES[tree.op]
    args = [to_text(c) for c in tree.children]
    if prim.symbol:
        return f"({args[0]} {prim.symbol} {args[1]})"
    return f"{tree.op}({', '.join(args)})"


def load_formulas(text: str) -> list[Node]:
    """Read one formula per line; blank lines and ``#`` comments are ignored."""
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(parse(line))
    return out


# -- random construction and variation ----------------------------------------


def _random_terminal(rng: random.Random, terminals: TerminalSet) -> Node:
    if rng.random() >= terminals.const_prob:
        return Variable(terminals.variables[rng.randrange(len(terminals.variables))])
    return Constant(rng.uniform(terminals.const_low, terminals.const_high))


def _build(fs, terminals, rng, level, min_depth, max_depth, full) -> Node:
    if level >= max_depth:
        return _random_terminal(rng, terminals)
    n_funcs = len(fs.primitives)
    if level < min_depth or full:
        pick_func = True
    else:
        n_terms = len(terminals.variables) + 1
        pick_func = rng.randrange(n_funcs + n_terms) < n_funcs
    if not pick_func:
        return _random_terminal(rng, terminals)
    op = fs.primitives[rng.randrange(n_funcs)]
    arity = PRIMITIVES[op].arity
    return Apply(op, [_build(fs, terminals, rng, level + 1, min_depth, max_depth, full) for _ in range(arity)])


def random_tree(
    fs: FunctionSet,
    depth_min: int,
    depth_max: int,
    rng: random.Random,
    terminals: TerminalSet = TerminalSet(),
    method: str | None = None,
) -> Node:
    """Ramped half-and-half tree with ``depth_min <= depth <= depth_max``.

    A target depth is drawn uniformly from the bounds; ``method`` is "full",
    "grow" or None for a fair coin between them.
    """
    if not fs.primitives:
        raise ValueError("function set is empty")
    if depth_min < 1 or depth_max < depth_min:
        raise ValueError("need 1 <= depth_min <= depth_max")
    target = rng.randint(depth_min, depth_max)
    if method is None:
        method = "full" if rng.random() < 0.5 else "grow"
    return _build(fs, terminals, rng, 1, depth_min, target, method == "full")


def crossover(a: Node, b: Node, rng: random.Random, depth_max: int = 12, retries: int = 8) -> Node:
    """Replace a random subtree of ``a`` by a random subtree of ``b``.

    Children deeper than ``depth_max`` are rejected; after ``retries`` failed
    draws ``a`` is returned unchanged.
    """
    for _ in range(retries):
        path, _, level = node_at(a, rng.randrange(a.size))
        donor = node_at(b, rng.randrange(b.size))[1]
        if level - 1 + donor.depth <= depth_max:
            return replace_at(a, path, donor)
    return a


@dataclass(frozen=True)
class MutationRates:
    subtree: float = 0.5
    point: float = 0.25
    constant: float = 0.25
    subtree_depth: int = 4
    sigma: float = 0.1
    # step scale is sigma * 10**-u with u uniform in [0, sigma_decades]
    sigma_decades: float = 0.0

    def __post_init__(self):
        if min(self.subtree, self.point, self.constant) < 0 or self.subtree + self.point + self.constant <= 0:
            raise ValueError("mutation rates must be non-negative with a positive sum")
        if self.sigma < 0 or self.sigma_decades < 0:
            raise ValueError("sigma and sigma_decades must be non-negative")


def mutate(
    tree: Node,
    fs: FunctionSet,
    rng: random.Random,
    terminals: TerminalSet = TerminalSet(),
    depth_max: int = 12,
    rates: MutationRates = MutationRates(),
) -> Node:
    """Apply one of subtree replacement, point swap or constant perturbation.

    An operator with nothing to act on (no applications for a point swap, no
    constants to perturb) falls back to subtree replacement.
    """
    if not fs.primitives:
        raise ValueError("function set is empty")
    nodes = list(iter_nodes(tree))
    total = rates.subtree + rates.point + rates.constant
    u = rng.random() * total

    if u >= rates.subtree and u < rates.subtree + rates.point:
        applies = [(p, n) for p, n, _ in nodes if isinstance(n, Apply)]
        if applies:
            path, node = applies[rng.randrange(len(applies))]
            options = [op for op in fs.of_arity(len(node.children)) if op != node.op]
            if not options:
                return tree
            return replace_at(tree, path, Apply(options[rng.randrange(len(options))], node.children))
    elif u >= rates.subtree + rates.point:
        consts = [(p, n) for p, n, _ in nodes if isinstance(n, Constant)]
        if consts:
            path, node = consts[rng.randrange(len(consts))]
            sigma = rates.sigma
            if rates.sigma_decades > 0:
                sigma *= 10.0 ** -rng.uniform(0.0, rates.sigma_decades)
            c = node.value * (1.0 + rng.gauss(0.0, sigma)) + rng.gauss(0.0, sigma)
            return replace_at(tree, path, Constant(c))

    path, _, level = nodes[rng.randrange(len(nodes))]
    room = max(1, min(rates.subtree_depth, depth_max - level + 1))
    return replace_at(tree, path, random_tree(fs, 1, room, rng, terminals))
