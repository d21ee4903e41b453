"""Parent selection operators working on a population error matrix.

Operators draw their randomness up front from the caller's generator and hand
fixed arrays to the active kernel backend. The draw order is part of each
operator's contract:

* tournament: ``integers(0, N, (k, tourn_size))``
* batch tournament: shuffled order first (``permutation(T)``, shuffle only),
  then the same candidate block as tournament
* lexicase / epsilon-lexicase: per parent, one ``random()`` per visited case
  (the case order is a lazily drawn Fisher-Yates shuffle) and one more for
  the final tie-break
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .exprtree import row_means

__all__ = [
    "ErrorMatrix",
    "BatchTournamentConfig",
    "BatchPlan",
    "EpsilonLexicaseState",
    "select_tournament",
    "select_lexicase",
    "compute_auto_epsilon",
    "select_epsilon_lexicase",
    "order_cases_by_difficulty",
    "partition_batches",
    "select_batch_tournament",
    "Selector",
    "parse_selector",
]


class ErrorMatrix:
    """Frozen N x T matrix of absolute errors with cached per-row MAE."""

    __slots__ = ("errors", "row_mae", "by_case")

    def __init__(self, errors):
        e = np.ascontiguousarray(errors, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] == 0 or e.shape[1] == 0:
            raise ValueError("error matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(e)) or np.any(e < 0):
            raise ValueError("errors must be finite and non-negative")
        # case-major copy (cases x individuals): the lexicase and batch
        # kernels scan one case across many individuals
        self._freeze(e, np.ascontiguousarray(e.T), row_means(e))

    def _freeze(self, errors, by_case, row_mae):
        for a in (errors, by_case, row_mae):
            a.flags.writeable = False
        self.errors, self.by_case, self.row_mae = errors, by_case, row_mae

    @classmethod
    def from_predictions(cls, predictions, targets) -> "ErrorMatrix":
        """``|predictions - targets|`` (saturating at the largest double) in one pass."""
        p = np.ascontiguousarray(predictions, dtype=np.float64)
        y = np.ascontiguousarray(targets, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0 or y.shape != (p.shape[1],):
            raise ValueError("need a non-empty N x T prediction matrix and T targets")
        parts = _backend.kernels.error_parts(p, y)
        if parts is None:
            raise ValueError("errors must be finite and non-negative")
        em = cls.__new__(cls)
        em._freeze(*parts)
        return em

    @property
    def n_individuals(self) -> int:
        return self.errors.shape[0]

    @property
    def n_cases(self) -> int:
        return self.errors.shape[1]

    def scaled(self, factor: float) -> "ErrorMatrix":
        return ErrorMatrix(self.errors * factor)


@dataclass(frozen=True)
class BatchTournamentConfig:
    batch_size: int
    tourn_size: int
    shuffle: bool
    k: int

    def __post_init__(self):
        if self.batch_size < 1 or self.tourn_size < 1 or self.k < 1:
            raise ValueError("batch_size, tourn_size and k must all be >= 1")


@dataclass(frozen=True)
class BatchPlan:
    case_order: np.ndarray
    batch_size: int

    @property
    def n_batches(self) -> int:
        return -(-len(self.case_order) // self.batch_size)

    @property
    def batches(self) -> list[range]:
        """Index ranges into ``case_order``, one per batch."""
        T = len(self.case_order)
        return [range(s, min(s + self.batch_size, T)) for s in range(0, T, self.batch_size)]

    def batch(self, i: int) -> np.ndarray:
        """Case indices of batch ``i``."""
        return self.case_order[i * self.batch_size:(i + 1) * self.batch_size]


@dataclass(frozen=True)
class EpsilonLexicaseState:
    epsilon_per_case: np.ndarray = field(repr=False)


def _candidates(n: int, k: int, tourn_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=(k, tourn_size), dtype=np.int64)


def select_tournament(em: ErrorMatrix, tourn_size: int, k: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Best-of-``tourn_size`` (drawn with replacement) on MAE, ``k`` times."""
    if tourn_size < 1 or k < 1:
        raise ValueError("tourn_size and k must be >= 1")
    cand = _candidates(em.n_individuals, k, tourn_size, rng)
    return _backend.kernels.tournament(em.row_mae, cand)


def select_lexicase(em: ErrorMatrix, k: int, rng: np.random.Generator) -> np.ndarray:
    return _backend.kernels.lexicase(em.by_case, k, rng, None)


def compute_auto_epsilon(em: ErrorMatrix) -> EpsilonLexicaseState:
    """Per-case median absolute deviation of the population's errors."""
    e = em.errors
    med = np.median(e, axis=0)
    return EpsilonLexicaseState(np.median(np.abs(e - med), axis=0))


def select_epsilon_lexicase(em: ErrorMatrix, eps: EpsilonLexicaseState, k: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Lexicase where survivors are within ``eps[case]`` of the best survivor."""
    e = np.ascontiguousarray(eps.epsilon_per_case, dtype=np.float64)
    if e.shape != (em.n_cases,):
        raise ValueError("need one epsilon per case")
    return _backend.kernels.lexicase(em.by_case, k, rng, e)


def order_cases_by_difficulty(em: ErrorMatrix) -> np.ndarray:
    """Cases sorted hardest-first by the errors of the lowest-MAE individual."""
    best = int(np.argmin(em.row_mae))
    return np.argsort(-em.errors[best], kind="stable").astype(np.int64)


def partition_batches(case_order, batch_size: int) -> BatchPlan:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return BatchPlan(np.asarray(case_order, dtype=np.int64), int(batch_size))


def select_batch_tournament(em: ErrorMatrix, config: BatchTournamentConfig,
                            rng: np.random.Generator) -> np.ndarray:
    """Batch tournament selection (BTS, or BTSS when ``config.shuffle``).

    Tournament ``s`` is decided on batch ``s mod n_batches`` by mean batch
    error, cycling through the same plan until ``k`` parents are chosen.
    """
    if config.shuffle:
        order = rng.permutation(em.n_cases).astype(np.int64)
    else:
        order = order_cases_by_difficulty(em)
    plan = partition_batches(order, config.batch_size)
    cand = _candidates(em.n_individuals, config.k, config.tourn_size, rng)
    return _backend.kernels.batch_tournament(em.by_case, plan.case_order, plan.batch_size, cand)


_SPEC_RE = re.compile(r"^(BTSS|BTS)/(\d+)/(\d+)$|^Tourn/(\d+)$|^(Ae-Lex|Lex)$")


@dataclass(frozen=True)
class Selector:
    """A named selection scheme.

    ``kind`` is one of ``tournament``, ``lexicase``, ``auto_epsilon_lexicase``,
    ``batch_tournament``. Identifiers follow ``BTS/bs/ts``, ``BTSS/bs/ts``,
    ``Tourn/ts``, ``Lex`` and ``Ae-Lex``.
    """

    kind: str
    tourn_size: int = 0
    batch_size: int = 0
    shuffle: bool = False

    @property
    def config_id(self) -> str:
        if self.kind == "tournament":
            return f"Tourn/{self.tourn_size}"
        if self.kind == "batch_tournament":
            return f"{'BTSS' if self.shuffle else 'BTS'}/{self.batch_size}/{self.tourn_size}"
        return "Lex" if self.kind == "lexicase" else "Ae-Lex"

    def __str__(self) -> str:
        return self.config_id

    def select(self, em: ErrorMatrix, k: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "tournament":
            return select_tournament(em, self.tourn_size, k, rng)
        if self.kind == "lexicase":
            return select_lexicase(em, k, rng)
        if self.kind == "auto_epsilon_lexicase":
            return select_epsilon_lexicase(em, compute_auto_epsilon(em), k, rng)
        cfg = BatchTournamentConfig(self.batch_size, self.tourn_size, self.shuffle, k)
        return select_batch_tournament(em, cfg, rng)


def parse_selector(text: str) -> Selector:
    m = _SPEC_RE.match(text.strip())
    if m is None:
        raise ValueError(f"unknown selector {text!r}; expected BTS/bs/ts, BTSS/bs/ts, Tourn/ts, Lex or Ae-Lex")
    if m.group(1):
        bs, ts = int(m.group(2)), int(m.group(3))
        if bs < 1 or ts < 1:
            raise ValueError("batch and tournament sizes must be >= 1")
        return Selector("batch_tournament", tourn_size=ts, batch_size=bs, shuffle=m.group(1) == "BTSS")
    if m.group(4):
        ts = int(m.group(4))
        if ts < 1:
            raise ValueError("tournament size must be >= 1")
        return Selector("tournament", tourn_size=ts)
    return Selector("lexicase" if m.group(5) == "Lex" else "auto_epsilon_lexicase")
