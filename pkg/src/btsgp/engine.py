"""Generational GP loop with elitism and per-generation metrics."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import _backend
from .data import Dataset
from .exprtree import ExprTree, abs_errors, evaluate_population, row_means
from .genetics import VariationConfig, init_population, make_offspring, make_rng
from .selection import ErrorMatrix, Selector, parse_selector

__all__ = ["EngineConfig", "GenerationStats", "RunRecord", "run", "diversity", "evaluate_errors"]

CSV_COLUMNS = (
    "gen",
    "best_train_mae",
    "best_test_mae",
    "diversity",
    "selection_wall_time_s",
    "total_wall_time_s",
)


@dataclass(frozen=True)
class EngineConfig:
    population_size: int = 1000
    generations: int = 1000
    selector: Selector = field(default_factory=lambda: parse_selector("Ae-Lex"))
    variation: VariationConfig = field(default_factory=VariationConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.selector, str):
            object.__setattr__(self, "selector", parse_selector(self.selector))
        if not self.population_size > self.variation.elite_count >= 0:
            raise ValueError("need population_size > elite_count >= 0")
        if self.population_size - self.variation.elite_count < 2:
            raise ValueError("need at least two selected parents per generation")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")

    @property
    def config_id(self) -> str:
        return self.selector.config_id


@dataclass
class GenerationStats:
    gen: int
    best_train_mae: float
    best_test_mae: float
    diversity: float
    selection_wall_time_seconds: float
    total_wall_time_seconds: float


@dataclass
class RunRecord:
    config_id: str
    seed: int
    per_generation: list[GenerationStats]
    final_best: str
    backend: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return self.per_generation[-1].total_wall_time_seconds

    @property
    def final_test_mae(self) -> float:
        return self.per_generation[-1].best_test_mae

    @property
    def final_train_mae(self) -> float:
        return self.per_generation[-1].best_train_mae

    def to_json(self) -> str:
        doc = asdict(self)
        doc["total_seconds"] = self.total_seconds
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        doc = json.loads(text)
        doc.pop("total_seconds", None)
        doc["per_generation"] = [GenerationStats(**g) for g in doc["per_generation"]]
        return cls(**doc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for g in self.per_generation:
            w.writerow([
                g.gen,
                repr(g.best_train_mae),
                repr(g.best_test_mae),
                repr(g.diversity),
                repr(g.selection_wall_time_seconds),
                repr(g.total_wall_time_seconds),
            ])
        return buf.getvalue()


def diversity(em: ErrorMatrix) -> float:
    """Fraction of distinct MAE values in the population (12 significant digits)."""
    distinct = {float(f"{v:.11e}") for v in em.row_mae.tolist()}
    return len(distinct) / em.n_individuals


def evaluate_errors(trees: list[ExprTree], ds: Dataset, known: dict | None = None) -> ErrorMatrix:
    preds = evaluate_population(trees, ds.features, known)
    return ErrorMatrix.from_predictions(preds, ds.targets)


def run(config: EngineConfig, train: Dataset, test: Dataset,
        observer: Callable[[int, list, ErrorMatrix], None] | None = None) -> RunRecord:
    """Evolve for ``config.generations`` generations.

    Every generation: evaluate on ``train``, record metrics (test MAE only for
    the best-on-train individual), select ``population_size - elite_count``
    parents, vary them, and carry the elites over unchanged. Metrics are
    recorded for generation 0 through ``generations``. Selection sees only
    the training error matrix.

    ``observer(gen, population, error_matrix)``, if given, is called once per
    generation after evaluation; it must not modify its arguments.
    """
    if train.n_features != test.n_features:
        raise ValueError(
            f"train has {train.n_features} features but test has {test.n_features}"
        )
    var = config.variation
    n_features = train.n_features
    rng = make_rng(config.seed)
    start = time.perf_counter()
    pop = init_population(config.population_size, var, rng, n_features)
    k = config.population_size - var.elite_count
    history: list[GenerationStats] = []
    sel_time = 0.0
    em = None
    known: dict = {}
    for gen in range(config.generations + 1):
        # reuse predictions of trees that survived unchanged from the last generation
        known = {t: known[t] for t in pop if t in known}
        em = evaluate_errors(pop, train, known)
        if observer is not None:
            observer(gen, pop, em)
        best = int(np.argmin(em.row_mae))
        test_pred = evaluate_population([pop[best]], test.features)
        test_mae = float(row_means(abs_errors(test_pred, test.targets))[0])
        history.append(GenerationStats(
            gen=gen,
            best_train_mae=float(em.row_mae[best]),
            best_test_mae=test_mae,
            diversity=diversity(em),
            selection_wall_time_seconds=sel_time,
            total_wall_time_seconds=time.perf_counter() - start,
        ))
        if gen == config.generations:
            break
        t0 = time.perf_counter()
        chosen = config.selector.select(em, k, rng)
        sel_time = time.perf_counter() - t0
        offspring = make_offspring([pop[i] for i in chosen], var, rng, n_features)
        elites = np.argsort(em.row_mae, kind="stable")[:var.elite_count]
        pop = [pop[i] for i in elites] + offspring
    best = int(np.argmin(em.row_mae))
    return RunRecord(
        config_id=config.config_id,
        seed=config.seed,
        per_generation=history,
        final_best=str(pop[best]),
        backend=_backend.name(),
        meta={
            "population_size": config.population_size,
            "generations": config.generations,
            "variation": asdict(var),
            "train_cases": train.n_cases,
            "test_cases": test.n_cases,
        },
    )
