"""Initialization and variation operators for expression trees.

All random draws come from one :class:`numpy.random.Generator` (PCG64) in a
fixed order, so every operator is a pure function of its inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exprtree import Const, ExprTree, PrimitiveOp, Var

__all__ = [
    "VariationConfig",
    "make_rng",
    "random_tree",
    "init_population",
    "one_point_crossover",
    "uniform_subtree_mutation",
    "make_offspring",
]

FUNCTIONS = tuple(PrimitiveOp)


@dataclass(frozen=True)
class VariationConfig:
    crossover_rate: float = 0.90
    mutation_rate: float = 0.10
    max_initial_depth: int = 3
    max_depth: int = 7
    elite_count: int = 1
    min_initial_depth: int = 1
    erc_low: float = -1.0
    erc_high: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.crossover_rate <= 1.0 and 0.0 <= self.mutation_rate <= 1.0):
            raise ValueError("rates must be probabilities")
        if self.crossover_rate + self.mutation_rate > 1.0 + 1e-12:
            raise ValueError("crossover_rate + mutation_rate must not exceed 1")
        if not 0 < self.max_initial_depth <= self.max_depth:
            raise ValueError("need 0 < max_initial_depth <= max_depth")
        if not 0 <= self.min_initial_depth <= self.max_initial_depth:
            raise ValueError("need 0 <= min_initial_depth <= max_initial_depth")
        if self.elite_count < 0:
            raise ValueError("elite_count must be >= 0")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream for ``seed`` (any non-negative integer, typically 64-bit)."""
    return np.random.Generator(np.random.PCG64(seed))


def _terminal(n_features: int, config: VariationConfig, rng: np.random.Generator):
    j = int(rng.integers(n_features + 1))
    if j < n_features:
        return Var(j)
    return Const(float(rng.uniform(config.erc_low, config.erc_high)))


def _build(nodes: list, depths: list, depth: int, max_depth: int, full: bool,
           n_features: int, config: VariationConfig, rng: np.random.Generator) -> None:
    depths.append(depth)
    if depth >= max_depth:
        nodes.append(_terminal(n_features, config, rng))
        return
    if full:
        op = FUNCTIONS[int(rng.integers(len(FUNCTIONS)))]
    else:
        # grow: every primitive and terminal is equally likely
        j = int(rng.integers(len(FUNCTIONS) + n_features + 1))
        if j >= len(FUNCTIONS):
            nodes.append(_terminal(n_features, config, rng))
            return
        op = FUNCTIONS[j]
    nodes.append(op)
    for _ in range(op.arity):
        _build(nodes, depths, depth + 1, max_depth, full, n_features, config, rng)


def random_tree(max_depth: int, full: bool, n_features: int, config: VariationConfig,
                rng: np.random.Generator) -> ExprTree:
    """A "full" tree of exactly ``max_depth`` or a "grow" tree of at most it."""
    nodes: list = []
    depths: list = []
    _build(nodes, depths, 0, max_depth, full, n_features, config, rng)
    return ExprTree._with_depths(tuple(nodes), tuple(depths))


def init_population(size: int, config: VariationConfig, rng: np.random.Generator,
                    n_features: int) -> list[ExprTree]:
    """Ramped half-and-half.

    Tree ``i`` targets depth ``levels[(i // 2) % len(levels)]`` and alternates
    full (even ``i``) and grow (odd ``i``) construction.
    """
    if size <= 0:
        raise ValueError("population size must be positive")
    if n_features <= 0:
        raise ValueError("need at least one feature")
    levels = range(config.min_initial_depth, config.max_initial_depth + 1)
    return [
        random_tree(levels[(i // 2) % len(levels)], i % 2 == 0, n_features, config, rng)
        for i in range(size)
    ]


def one_point_crossover(a: ExprTree, b: ExprTree, config: VariationConfig,
                        rng: np.random.Generator) -> tuple[ExprTree, ExprTree]:
    i = int(rng.integers(a.size))
    j = int(rng.integers(b.size))
    i_end = a.subtree_end(i)
    j_end = b.subtree_end(j)
    na, nb = a.nodes, b.nodes
    da, db = a.node_depths(), b.node_depths()
    # a transplanted subtree keeps its shape, only its offset changes
    shift = da[i] - db[j]
    c1 = ExprTree._with_depths(
        na[:i] + nb[j:j_end] + na[i_end:],
        da[:i] + tuple(d + shift for d in db[j:j_end]) + da[i_end:],
    )
    c2 = ExprTree._with_depths(
        nb[:j] + na[i:i_end] + nb[j_end:],
        db[:j] + tuple(d - shift for d in da[i:i_end]) + db[j_end:],
    )
    if c1.depth > config.max_depth:
        c1 = a
    if c2.depth > config.max_depth:
        c2 = b
    return c1, c2


def uniform_subtree_mutation(a: ExprTree, config: VariationConfig, rng: np.random.Generator,
                             n_features: int) -> ExprTree:
    i = int(rng.integers(a.size))
    da = a.node_depths()
    budget = config.max_depth - da[i]
    nodes: list = []
    depths: list = []
    _build(nodes, depths, da[i], da[i] + budget, False, n_features, config, rng)
    end = a.subtree_end(i)
    return ExprTree._with_depths(a.nodes[:i] + tuple(nodes) + a.nodes[end:],
                                 da[:i] + tuple(depths) + da[end:])


def make_offspring(parents: Sequence[ExprTree], config: VariationConfig,
                   rng: np.random.Generator, n_features: int) -> list[ExprTree]:
    """Vary parents pairwise, returning exactly ``len(parents)`` offspring.

    One uniform draw ``r`` per pair: ``r < crossover_rate`` crosses the pair,
    ``r < crossover_rate + mutation_rate`` mutates both, otherwise both are
    copied. An odd leftover parent is paired with ``parents[0]`` and only its
    own offspring is kept.
    """
    if len(parents) < 2:
        raise ValueError("need at least two parents")
    cx = config.crossover_rate
    cx_mut = cx + config.mutation_rate
    out: list[ExprTree] = []
    n = len(parents)
    for p in range(0, n, 2):
        a = parents[p]
        b = parents[p + 1] if p + 1 < n else parents[0]
        r = rng.random()
        if r < cx:
            a, b = one_point_crossover(a, b, config, rng)
        elif r < cx_mut:
            a = uniform_subtree_mutation(a, config, rng, n_features)
            b = uniform_subtree_mutation(b, config, rng, n_features)
        out.append(a)
        if p + 1 < n:
            out.append(b)
    return out
