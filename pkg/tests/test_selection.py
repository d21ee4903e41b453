import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from btsgp import _backend
from btsgp.exprtree import abs_errors
from btsgp.genetics import make_rng
from btsgp.selection import (
    BatchTournamentConfig,
    EpsilonLexicaseState,
    ErrorMatrix,
    compute_auto_epsilon,
    order_cases_by_difficulty,
    parse_selector,
    partition_batches,
    select_batch_tournament,
    select_epsilon_lexicase,
    select_lexicase,
    select_tournament,
)


class FixedDraws:
    """Stands in for a Generator whose candidate block is known in advance."""

    def __init__(self, cand):
        self.cand = np.asarray(cand, dtype=np.int64)

    def integers(self, low, high, size=None, dtype=None):
        assert self.cand.shape == size and self.cand.max() < high
        return self.cand.copy()


def EM(rows):
    return ErrorMatrix(np.asarray(rows, dtype=float))


def reference_lexicase(errors, k, rng, eps=None):
    """Scalar restatement of the lexicase draw contract used as an oracle."""
    N, T = errors.shape
    out = []
    for _ in range(k):
        order = list(range(T))
        surv = list(range(N))
        t = 0
        while len(surv) > 1 and t < T:
            j = min(t + int(rng.random() * (T - t)), T - 1)
            order[t], order[j] = order[j], order[t]
            c = order[t]
            best = min(errors[i, c] for i in surv)
            thr = best + (eps[c] if eps is not None else 0.0)
            surv = [i for i in surv if errors[i, c] <= thr]
            t += 1
        out.append(surv[min(int(rng.random() * len(surv)), len(surv) - 1)])
    return out


def exact_lexicase_distribution(errors, eps):
    N, T = errors.shape
    p = np.zeros(N)
    perms = list(itertools.permutations(range(T)))
    for perm in perms:
        surv = list(range(N))
        for c in perm:
            if len(surv) == 1:
                break
            best = min(errors[i, c] for i in surv)
            surv = [i for i in surv if errors[i, c] <= best + eps[c]]
        for i in surv:
            p[i] += 1.0 / len(surv) / len(perms)
    return p


error_matrices = st.integers(1, 12).flatmap(
    lambda n: st.integers(1, 10).flatmap(
        lambda t: arrays(np.float64, (n, t),
                         elements=st.floats(0, 100, allow_nan=False).map(lambda v: round(v, 1)))))


class TestErrorMatrix:
    def test_row_mae(self):
        em = EM([[1, 2, 3], [0, 0, 6]])
        assert em.row_mae.tolist() == [2.0, 2.0]
        assert (em.n_individuals, em.n_cases) == (2, 3)

    def test_from_predictions_matches_two_step(self, backend):
        rng = np.random.default_rng(4)
        big = np.finfo(float).max
        P = rng.normal(size=(30, 17)) * 10.0 ** rng.integers(-300, 300, (30, 17))
        P[0, :3] = [big, -big, 0.0]
        y = rng.normal(size=17)
        y[1] = big
        a = ErrorMatrix.from_predictions(P, y)
        b = ErrorMatrix(abs_errors(P, y))
        for name in ("errors", "by_case", "row_mae"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
            assert not getattr(a, name).flags.writeable
        P[2, 2] = np.nan
        with pytest.raises(ValueError):
            ErrorMatrix.from_predictions(P, y)

    @pytest.mark.parametrize("bad", [[[1, -1]], [[np.nan, 1]], [[np.inf, 0]], [[]], [1, 2]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            EM(bad)

    def test_frozen(self):
        em = EM([[1, 2]])
        with pytest.raises(ValueError):
            em.errors[0, 0] = 5
        with pytest.raises(ValueError):
            em.row_mae[0] = 5

    @given(error_matrices)
    def test_mae_invariant(self, e):
        em = ErrorMatrix(e)
        assert np.allclose(em.row_mae, e.mean(axis=1), rtol=1e-12, atol=0)
        assert np.array_equal(em.by_case, e.T)


class TestTournament:
    def test_unique_minimum(self, backend):
        assert select_tournament(EM([[3], [1], [2]]), 2, 1, FixedDraws([[0, 1]])).tolist() == [1]

    def test_first_draw_wins_ties(self, backend):
        em = EM([[5], [5]])
        for cand in itertools.product([0, 1], repeat=2):
            got = select_tournament(em, 2, 1, FixedDraws([cand]))
            assert got.tolist() == [cand[0]]

    def test_size_one_is_uniform(self, backend):
        em = EM(np.arange(10.0)[:, None])
        counts = Counter(select_tournament(em, 1, 50_000, make_rng(1)).tolist())
        assert set(counts) == set(range(10))
        assert max(abs(c / 50_000 - 0.1) for c in counts.values()) < 0.01

    def test_draws_with_replacement_from_stream(self, backend):
        em = EM(np.random.default_rng(0).random((30, 4)))
        got = select_tournament(em, 5, 40, make_rng(3))
        cand = make_rng(3).integers(0, 30, size=(40, 5), dtype=np.int64)
        want = [min(row, key=lambda i: (em.row_mae[i], list(row).index(i))) for row in cand]
        assert got.tolist() == want

    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            select_tournament(EM([[1]]), 0, 1, make_rng(0))


class TestLexicase:
    def test_first_case_decides(self, backend):
        em = EM([[0, 1], [1, 0]])
        for seed in range(20):
            first_case = int(make_rng(seed).random() * 2)
            got = select_lexicase(em, 1, make_rng(seed))
            assert got.tolist() == [first_case]

    def test_weak_dominance(self, backend):
        assert set(select_lexicase(EM([[0, 1], [0, 0]]), 200, make_rng(0)).tolist()) == {1}

    def test_identical_rows_uniform(self, backend):
        em = EM(np.ones((4, 3)))
        counts = Counter(select_lexicase(em, 40_000, make_rng(2)).tolist())
        assert max(abs(c / 40_000 - 0.25) for c in counts.values()) < 0.015

    def test_matches_reference(self, backend):
        rng = np.random.default_rng(10)
        for trial in range(100):
            N, T = rng.integers(1, 15), rng.integers(1, 12)
            e = rng.integers(0, 4, size=(N, T)).astype(float)
            em = ErrorMatrix(e)
            eps = rng.uniform(0, 1.5, T) if trial % 2 else None
            a, b = make_rng(trial), make_rng(trial)
            if eps is None:
                got = select_lexicase(em, 7, a)
            else:
                got = select_epsilon_lexicase(em, EpsilonLexicaseState(eps), 7, a)
            assert got.tolist() == reference_lexicase(e, 7, b, eps)
            # both consumed exactly the same amount of the stream
            assert a.random() == b.random()

    def test_backends_agree_and_leave_same_state(self):
        if len(_backend.AVAILABLE) < 2:
            pytest.skip("compiled backend not built")
        e = np.random.default_rng(1).random((60, 40)).round(1)
        em = ErrorMatrix(e)
        eps = compute_auto_epsilon(em)
        res = []
        for name in sorted(_backend.AVAILABLE):
            rng = make_rng(4)
            with _backend.use_backend(name):
                res.append((select_lexicase(em, 60, rng).tolist(),
                            select_epsilon_lexicase(em, eps, 60, rng).tolist(),
                            rng.random()))
        assert res[0] == res[1]


class TestAutoEpsilon:
    def test_examples(self):
        assert compute_auto_epsilon(EM([[1], [1], [1]])).epsilon_per_case.tolist() == [0.0]
        assert compute_auto_epsilon(EM([[0], [0], [2], [2]])).epsilon_per_case.tolist() == [1.0]
        assert compute_auto_epsilon(EM([[3, 9, 1]])).epsilon_per_case.tolist() == [0, 0, 0]

    @given(error_matrices)
    def test_mad_oracle(self, e):
        eps = compute_auto_epsilon(ErrorMatrix(e)).epsilon_per_case
        for t in range(e.shape[1]):
            col = sorted(e[:, t])
            med = np.median(col)
            assert eps[t] == np.median([abs(v - med) for v in col])
        assert np.all(eps >= 0) and np.all(np.isfinite(eps))


class TestEpsilonLexicase:
    def test_zero_epsilon_is_lexicase(self, backend):
        rng = np.random.default_rng(0)
        for trial in range(200):
            e = rng.integers(0, 3, size=(rng.integers(1, 30), rng.integers(1, 20))).astype(float)
            em = ErrorMatrix(e)
            zero = EpsilonLexicaseState(np.zeros(em.n_cases))
            assert (select_epsilon_lexicase(em, zero, 10, make_rng(trial)).tolist()
                    == select_lexicase(em, 10, make_rng(trial)).tolist())

    def test_within_threshold_survives(self, backend):
        em = EM([[1.0], [1.05]])
        eps = EpsilonLexicaseState(np.array([0.1]))
        assert set(select_epsilon_lexicase(em, eps, 500, make_rng(0)).tolist()) == {0, 1}

    def test_threshold_is_survivor_relative(self, backend):
        # case 0 removes individual 0; on case 1 the best survivor (2) sets the bar
        em = EM([[9, 0.0], [0, 1.0], [0, 0.5]])
        eps = EpsilonLexicaseState(np.array([0.0, 0.4]))
        got = Counter(select_epsilon_lexicase(em, eps, 4000, make_rng(5)).tolist())
        assert got[1] == 0 or got[2] > got[1]
        assert set(got) <= {0, 1, 2}

    def test_distribution_matches_enumeration(self, backend):
        e = np.array([[0.0, 1.0, 0.4],
                      [0.3, 0.0, 1.0],
                      [1.0, 0.2, 0.0]])
        eps = np.array([0.35, 0.25, 0.5])
        want = exact_lexicase_distribution(e, eps)
        n = 100_000
        got = np.bincount(select_epsilon_lexicase(ErrorMatrix(e), EpsilonLexicaseState(eps), n,
                                                  make_rng(123)), minlength=3) / n
        assert np.max(np.abs(got - want)) < 0.02

    def test_needs_one_epsilon_per_case(self):
        with pytest.raises(ValueError):
            select_epsilon_lexicase(EM([[1, 2]]), EpsilonLexicaseState(np.zeros(3)), 1, make_rng(0))


class TestDifficultyAndBatches:
    def test_order_examples(self):
        assert order_cases_by_difficulty(EM([[0.1, 0.9, 0.5]])).tolist() == [1, 2, 0]
        assert order_cases_by_difficulty(EM(np.ones((3, 5)))).tolist() == [0, 1, 2, 3, 4]
        em = EM([[5, 5, 5], [0.2, 0.1, 0.3]])
        assert order_cases_by_difficulty(em).tolist() == [2, 0, 1]

    def test_best_tie_goes_to_lowest_index(self):
        assert order_cases_by_difficulty(EM([[0, 9], [9, 0]])).tolist() == [1, 0]

    def test_partition_examples(self):
        plan = partition_batches([0, 1, 2, 3, 4], 2)
        assert [plan.batch(i).tolist() for i in range(plan.n_batches)] == [[0, 1], [2, 3], [4]]
        assert partition_batches(range(5), 5).n_batches == 1
        assert partition_batches(range(5), 1).n_batches == 5
        with pytest.raises(ValueError):
            partition_batches([0], 0)

    @given(st.integers(1, 200), st.integers(1, 250), st.integers(0, 2**32 - 1))
    def test_partition_covers_each_case_once(self, T, bs, seed):
        order = np.random.default_rng(seed).permutation(T)
        plan = partition_batches(order, bs)
        chunks = [plan.batch(i) for i in range(plan.n_batches)]
        assert sorted(np.concatenate(chunks).tolist()) == list(range(T))
        assert all(len(c) == bs for c in chunks[:-1]) and 1 <= len(chunks[-1]) <= bs
        assert [list(r) for r in plan.batches] == [list(range(i * bs, min(T, (i + 1) * bs)))
                                                    for i in range(plan.n_batches)]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BatchTournamentConfig(0, 2, False, 1)
        with pytest.raises(ValueError):
            BatchTournamentConfig(2, 2, False, 0)


class TestBatchTournament:
    def test_hand_trace(self, backend):
        em = EM([[0, 9], [9, 0]])
        cfg = BatchTournamentConfig(batch_size=1, tourn_size=2, shuffle=False, k=2)
        assert select_batch_tournament(em, cfg, FixedDraws([[0, 1], [0, 1]])).tolist() == [1, 0]

    def test_rounds_restart_from_first_batch(self, backend):
        em = EM([[0, 9], [9, 0]])
        cfg = BatchTournamentConfig(1, 2, False, 3)
        assert select_batch_tournament(em, cfg, FixedDraws([[0, 1]] * 3)).tolist() == [1, 0, 1]

    def test_uses_batch_means(self, backend):
        # T=4, bs=2: difficulty order from row 0 is [3, 2, 1, 0]
        em = EM([[0.0, 0.1, 0.2, 0.3],
                 [9.0, 9.0, 0.0, 0.0],
                 [0.0, 0.0, 9.0, 9.0]])
        cfg = BatchTournamentConfig(2, 3, False, 2)
        got = select_batch_tournament(em, cfg, FixedDraws([[0, 1, 2], [0, 1, 2]]))
        assert got.tolist() == [1, 2]

    def test_shuffle_permutes_first(self, backend):
        em = EM(np.random.default_rng(0).random((20, 9)))
        cfg = BatchTournamentConfig(4, 3, True, 20)
        got = select_batch_tournament(em, cfg, make_rng(7))
        rng = make_rng(7)
        order = rng.permutation(9)
        cand = rng.integers(0, 20, size=(20, 3), dtype=np.int64)
        want = []
        for s in range(20):
            b = order[(s % 3) * 4:(s % 3 + 1) * 4]
            means = [em.errors[i, b].sum() / len(b) for i in cand[s]]
            want.append(cand[s][int(np.argmin(means))])
        assert got.tolist() == want

    def test_single_batch_equals_tournament(self, backend):
        rng = np.random.default_rng(42)
        for trial in range(300):
            N, T = rng.integers(1, 51), rng.integers(1, 65)
            em = ErrorMatrix(rng.random((N, T)))
            cfg = BatchTournamentConfig(T, int(rng.integers(1, 8)), False, int(rng.integers(1, 60)))
            assert (select_batch_tournament(em, cfg, make_rng(trial)).tolist()
                    == select_tournament(em, cfg.tourn_size, cfg.k, make_rng(trial)).tolist())

    def test_backends_agree(self):
        if len(_backend.AVAILABLE) < 2:
            pytest.skip("compiled backend not built")
        em = ErrorMatrix(np.random.default_rng(3).random((80, 37)))
        outs = []
        for name in sorted(_backend.AVAILABLE):
            with _backend.use_backend(name):
                outs.append([select_batch_tournament(em, BatchTournamentConfig(bs, 4, sh, 80), make_rng(bs)).tolist()
                             for bs in (1, 5, 8, 37, 50) for sh in (False, True)])
        assert outs[0] == outs[1]


ALL_SELECTORS = ["Tourn/1", "Tourn/4", "Lex", "Ae-Lex", "BTS/1/2", "BTS/3/4", "BTSS/2/8", "BTS/64/2"]


@given(error_matrices, st.integers(1, 30), st.sampled_from(ALL_SELECTORS), st.integers(0, 2**32 - 1))
def test_cardinality_and_range(e, k, sel_id, seed):
    got = parse_selector(sel_id).select(ErrorMatrix(e), k, make_rng(seed))
    assert len(got) == k
    assert all(0 <= i < e.shape[0] for i in got.tolist())


@given(error_matrices, st.sampled_from(ALL_SELECTORS), st.integers(0, 2**32 - 1),
       st.sampled_from([0.25, 0.5, 2.0, 8.0, 1024.0]))
def test_positive_scaling_changes_nothing(e, sel_id, seed, factor):
    em = ErrorMatrix(e)
    sel = parse_selector(sel_id)
    assert (sel.select(em, 15, make_rng(seed)).tolist()
            == sel.select(em.scaled(factor), 15, make_rng(seed)).tolist())


def test_dominant_individual_always_wins():
    rng = np.random.default_rng(8)
    for trial in range(300):
        N, T = rng.integers(2, 8), rng.integers(1, 6)
        # the gap exceeds any per-case MAD, so epsilon cannot rescue a rival
        e = rng.uniform(10, 11, size=(N, T))
        star = int(rng.integers(N))
        e[star] = rng.uniform(0, 0.99, size=T)
        em = ErrorMatrix(e)
        for sel_id in ["Lex", "Ae-Lex"]:
            # the star survives every case, and nobody else ties with it
            assert set(parse_selector(sel_id).select(em, 20, make_rng(trial)).tolist()) == {star}
        for sel_id in ["Tourn/3", "BTS/2/3", "BTSS/1/3", f"BTS/{T}/2"]:
            sel = parse_selector(sel_id)
            cand = make_rng(trial)
            if sel.shuffle:
                cand.permutation(T)
            cand = cand.integers(0, N, size=(20, sel.tourn_size), dtype=np.int64)
            got = sel.select(em, 20, make_rng(trial))
            for row, w in zip(cand, got):
                if star in row:
                    assert w == star


@pytest.mark.parametrize("text,kind", [
    ("BTS/8/16", "batch_tournament"), ("BTSS/2/4", "batch_tournament"),
    ("Tourn/8", "tournament"), ("Lex", "lexicase"), ("Ae-Lex", "auto_epsilon_lexicase"),
])
def test_parse_selector(text, kind):
    sel = parse_selector(text)
    assert sel.kind == kind and sel.config_id == text == str(sel)


@pytest.mark.parametrize("bad", ["BTS/0/2", "Tourn/0", "BTS/8", "lex", "tournament", ""])
def test_parse_selector_rejects(bad):
    with pytest.raises(ValueError):
        parse_selector(bad)
