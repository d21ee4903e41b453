"""Expression trees over the symbolic-regression primitive set.

Trees are stored in prefix order as an immutable tuple of nodes. A node is a
:class:`PrimitiveOp`, a :class:`Var` (feature index) or a :class:`Const`
(ephemeral random constant). Any subtree is a contiguous slice of the tuple,
which keeps crossover and mutation to a pair of slice operations.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from . import _backend

__all__ = [
    "PrimitiveOp",
    "Var",
    "Const",
    "ExprTree",
    "EvalResult",
    "apply_protected",
    "evaluate",
    "evaluate_case",
    "evaluate_population",
    "encode_population",
    "abs_errors",
    "row_means",
]


class PrimitiveOp(enum.Enum):
    # (kernel opcode, arity); plain attributes keep the hot loops cheap
    ADD = (0, 2)
    SUB = (1, 2)
    MUL = (2, 2)
    DIV = (3, 2)
    SIN = (4, 1)
    COS = (5, 1)
    EXP = (6, 1)
    LOG = (7, 1)

    def __init__(self, code: int, arity: int):
        self.code = code
        self.arity = arity
        self.symbol = self.name.lower()

    # members are singletons compared by identity, so the C-level identity
    # hash is valid and much cheaper than Enum's name-based one
    __hash__ = object.__hash__


OPCODE_VAR = 8
OPCODE_CONST = 9

_OPS_BY_NAME = {op.symbol: op for op in PrimitiveOp}


class Var(NamedTuple):
    index: int
    arity = 0
    code = OPCODE_VAR


class Const(NamedTuple):
    value: float
    arity = 0
    code = OPCODE_CONST


Node = Union[PrimitiveOp, Var, Const]


def _protected_exp(x: float) -> float:
    try:
        r = math.exp(x)
    except OverflowError:
        return 1.0
    return r if math.isfinite(r) else 1.0


def apply_protected(op: PrimitiveOp, args: Sequence[float]) -> float:
    """Apply ``op`` to finite ``args``, returning 1.0 on any failure.

    Failure means an input outside the operator's domain (division by zero,
    log of a non-positive number) or a non-finite result.
    """
    if op is PrimitiveOp.ADD:
        r = args[0] + args[1]
    elif op is PrimitiveOp.SUB:
        r = args[0] - args[1]
    elif op is PrimitiveOp.MUL:
        r = args[0] * args[1]
    elif op is PrimitiveOp.DIV:
        if args[1] == 0.0:
            return 1.0
        r = args[0] / args[1]
    elif op is PrimitiveOp.SIN:
        r = math.sin(args[0])
    elif op is PrimitiveOp.COS:
        r = math.cos(args[0])
    elif op is PrimitiveOp.EXP:
        return _protected_exp(args[0])
    else:
        if args[0] <= 0.0:
            return 1.0
        r = math.log(args[0])
    return r if math.isfinite(r) else 1.0


class ExprTree:
    """An immutable program stored as a prefix sequence of nodes."""

    __slots__ = ("nodes", "_depth", "_hash", "_depths", "_encoded")

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = tuple(nodes)
        self._depth = None
        self._hash = None
        self._depths = None
        self._encoded = None
        if not self.nodes:
            raise ValueError("empty expression tree")

    @classmethod
    def _with_depths(cls, nodes: tuple, depths: tuple) -> "ExprTree":
        # trusted constructor for variation operators that already know depths
        tree = cls(nodes)
        tree._depths = depths
        return tree

    # construction helpers

    @classmethod
    def variable(cls, index: int) -> "ExprTree":
        return cls((Var(int(index)),))

    @classmethod
    def constant(cls, value: float) -> "ExprTree":
        return cls((Const(float(value)),))

    @classmethod
    def apply(cls, op: PrimitiveOp, *children: "ExprTree") -> "ExprTree":
        if len(children) != op.arity:
            raise ValueError(f"{op.symbol} takes {op.arity} children, got {len(children)}")
        nodes: list = [op]
        for child in children:
            nodes.extend(child.nodes)
        return cls(nodes)

    # structure

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        if self._depth is None:
            self._depth = max(self.node_depths())
        return self._depth

    def subtree_end(self, start: int) -> int:
        """Index one past the end of the subtree rooted at ``start``."""
        need = 1
        i = start
        nodes = self.nodes
        while need:
            need += nodes[i].arity - 1
            i += 1
        return i

    def node_depths(self) -> tuple[int, ...]:
        """Depth of every node (root = 0), in prefix order."""
        if self._depths is None:
            depths = []
            stack = [0]
            pop, push = stack.pop, stack.append
            for node in self.nodes:
                d = pop()
                depths.append(d)
                a = node.arity
                if a:
                    push(d + 1)
                    if a == 2:
                        push(d + 1)
            self._depths = tuple(depths)
        return self._depths

    def is_valid(self) -> bool:
        need = 1
        for node in self.nodes:
            if need == 0:
                return False
            need += node.arity - 1
        return need == 0

    def max_feature_index(self) -> int:
        return max((n.index for n in self.nodes if isinstance(n, Var)), default=-1)

    def __eq__(self, other):
        return isinstance(other, ExprTree) and self.nodes == other.nodes

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self.nodes)
        return self._hash

    # text form

    def __str__(self) -> str:
        out: list[str] = []
        _write(self.nodes, 0, out)
        return "".join(out)

    def __repr__(self) -> str:
        return f"ExprTree({self})"

    @classmethod
    def parse(cls, text: str) -> "ExprTree":
        """Inverse of ``str()``: ``add(mul(x0, x0), x1)``, constants as reals."""
        tokens = re.findall(r"[A-Za-z_]\w*|[-+0-9.eE]+|[(),]", text)
        nodes: list[Node] = []
        pos = _parse_into(tokens, 0, nodes)
        if pos != len(tokens):
            raise ValueError(f"trailing input in expression: {text!r}")
        return cls(nodes)

    def to_dict(self) -> dict:
        return {"expr": str(self), "depth": self.depth, "size": self.size}


def _write(nodes, i: int, out: list[str]) -> int:
    node = nodes[i]
    if isinstance(node, Var):
        out.append(f"x{node.index}")
        return i + 1
    if isinstance(node, Const):
        out.append(repr(node.value))
        return i + 1
    out.append(node.symbol)
    out.append("(")
    i += 1
    for c in range(node.arity):
        if c:
            out.append(", ")
        i = _write(nodes, i, out)
    out.append(")")
    return i


def _parse_into(tokens: list[str], pos: int, nodes: list) -> int:
    tok = tokens[pos]
    if tok in _OPS_BY_NAME:
        op = _OPS_BY_NAME[tok]
        nodes.append(op)
        if tokens[pos + 1] != "(":
            raise ValueError(f"expected '(' after {tok}")
        pos += 2
        for c in range(op.arity):
            if c:
                if tokens[pos] != ",":
                    raise ValueError("expected ','")
                pos += 1
            pos = _parse_into(tokens, pos, nodes)
        if tokens[pos] != ")":
            raise ValueError("expected ')'")
        return pos + 1
    if re.fullmatch(r"x\d+", tok):
        nodes.append(Var(int(tok[1:])))
        return pos + 1
    nodes.append(Const(float(tok)))
    return pos + 1


@dataclass(frozen=True)
class EvalResult:
    predictions: np.ndarray
    case_errors: np.ndarray
    mae: float


def evaluate_case(tree: ExprTree, row: Sequence[float]) -> float:
    """Reference evaluation of ``tree`` on one input row by recursive descent."""

    def walk(i: int) -> tuple[float, int]:
        node = tree.nodes[i]
        if isinstance(node, Var):
            return float(row[node.index]), i + 1
        if isinstance(node, Const):
            return node.value, i + 1
        args = []
        i += 1
        for _ in range(node.arity):
            v, i = walk(i)
            args.append(v)
        return apply_protected(node, args), i

    return walk(0)[0]


def _encode(tree: ExprTree):
    if tree._encoded is None:
        codes = [n.code for n in tree.nodes]
        args = [n.index if c == OPCODE_VAR else 0 for n, c in zip(tree.nodes, codes)]
        vals = [n.value if c == OPCODE_CONST else 0.0 for n, c in zip(tree.nodes, codes)]
        tree._encoded = (codes, args, vals)
    return tree._encoded


def encode_population(trees: Sequence[ExprTree]):
    """Flatten trees into kernel arrays ``(codes, args, vals, offsets)``."""
    codes: list[int] = []
    args: list[int] = []
    vals: list[float] = []
    offsets = [0]
    for tree in trees:
        c, a, v = _encode(tree)
        codes += c
        args += a
        vals += v
        offsets.append(len(codes))
    return (
        np.asarray(codes, dtype=np.int64),
        np.asarray(args, dtype=np.int64),
        np.asarray(vals, dtype=np.float64),
        np.asarray(offsets, dtype=np.int64),
    )


def _check_features(trees: Sequence[ExprTree], features: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D case-major matrix")
    d = X.shape[1]
    for tree in trees:
        # var args hold feature indices, all other args are 0
        if max(_encode(tree)[1]) >= d:
            raise ValueError(
                f"tree {tree} uses x{tree.max_feature_index()} but data has {d} features"
            )
    return X


def evaluate_population(trees: Sequence[ExprTree], features: np.ndarray,
                        known: dict | None = None) -> np.ndarray:
    """Predictions of every tree on every case, shape ``(len(trees), n_cases)``.

    Structurally identical trees are evaluated once. ``known`` optionally
    maps trees to prediction rows already computed on the same ``features``;
    those trees are not re-evaluated, and every tree evaluated here is added
    to it.
    """
    X = _check_features(trees, features)
    known = {} if known is None else known
    fresh: dict[ExprTree, int] = {}
    for tree in trees:
        if tree not in known:
            fresh.setdefault(tree, len(fresh))
    if fresh:
        preds = _backend.kernels.eval_programs(*encode_population(list(fresh)), X)
        for tree, r in fresh.items():
            known[tree] = preds[r]
    out = np.empty((len(trees), X.shape[0]))
    for i, tree in enumerate(trees):
        out[i] = known[tree]
    return out


def evaluate(tree: ExprTree, features: np.ndarray, targets: np.ndarray) -> EvalResult:
    y = np.asarray(targets, dtype=np.float64)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("targets must have one entry per feature row")
    pred = evaluate_population([tree], X)[0]
    errors = abs_errors(pred, y)
    return EvalResult(pred, errors, float(row_means(errors)))


_DBL_MAX = np.finfo(np.float64).max


def abs_errors(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """``|predictions - targets|`` with overflow clamped to the largest double."""
    with np.errstate(over="ignore", invalid="ignore"):
        err = np.abs(predictions - targets)
    return np.minimum(err, _DBL_MAX)


def row_means(errors: np.ndarray) -> np.ndarray:
    """Mean along the last axis from a correctly rounded sum.

    The result does not depend on the order of the terms, and stays finite
    (at most the largest double) when a plain sum would overflow.
    """
    e = np.ascontiguousarray(errors, dtype=np.float64)
    flat = e.reshape(-1, e.shape[-1]) if e.ndim > 1 else e.reshape(1, -1)
    return _backend.kernels.row_means(flat).reshape(e.shape[:-1])
