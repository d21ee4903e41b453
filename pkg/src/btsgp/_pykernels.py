"""Pure-Python/numpy kernels, used when the compiled extension is unavailable.

Results are bit-identical to ``_ckernels``: means use correctly rounded sums
(:func:`math.fsum`) and transcendental functions go through :mod:`math` (the platform
libm), not numpy's own vectorised implementations.
"""

import math

import numpy as np

NAME = "python"

_OP_VAR = 8
_OP_CONST = 9


def _exp(x):
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _log(x):
    return math.log(x) if x > 0.0 else 1.0


_vsin = np.frompyfunc(math.sin, 1, 1)
_vcos = np.frompyfunc(math.cos, 1, 1)
_vexp = np.frompyfunc(_exp, 1, 1)
_vlog = np.frompyfunc(_log, 1, 1)


def _guard(r):
    r[~np.isfinite(r)] = 1.0
    return r


def _apply(code, a, b=None):
    if code == 0:
        return _guard(a + b)
    if code == 1:
        return _guard(a - b)
    if code == 2:
        return _guard(a * b)
    if code == 3:
        r = _guard(a / b)
        r[b == 0.0] = 1.0
        return r
    if code == 4:
        return _guard(_vsin(a).astype(np.float64))
    if code == 5:
        return _guard(_vcos(a).astype(np.float64))
    if code == 6:
        return _guard(_vexp(a).astype(np.float64))
    r = _guard(_vlog(a).astype(np.float64))
    r[a <= 0.0] = 1.0
    return r


def eval_programs(codes, args, vals, offsets, X):
    n_cases = X.shape[0]
    out = np.empty((len(offsets) - 1, n_cases), dtype=np.float64)
    with np.errstate(all="ignore"):
        for p in range(len(offsets) - 1):
            stack = []
            for j in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
                c = codes[j]
                if c == _OP_VAR:
                    stack.append(X[:, args[j]])
                elif c == _OP_CONST:
                    stack.append(np.full(n_cases, vals[j]))
                elif c < 4:
                    a = stack.pop()
                    b = stack.pop()
                    stack.append(_apply(c, a, b))
                else:
                    stack.append(_apply(c, stack.pop()))
            out[p] = stack[0]
    return out


def tournament(fitness, cand):
    # argmin returns the first minimum, i.e. the earliest draw
    return cand[np.arange(len(cand)), np.argmin(fitness[cand], axis=1)]


def lexicase(errors_by_case, k, rng, eps=None):
    T, N = errors_by_case.shape
    winners = np.empty(k, dtype=np.int64)
    everyone = np.arange(N)
    order = list(range(T))
    for s in range(k):
        surv = everyone
        t = 0
        swaps = []
        while len(surv) > 1 and t < T:
            j = min(t + int(rng.random() * (T - t)), T - 1)
            swaps.append(j)
            order[t], order[j] = order[j], order[t]
            c = order[t]
            col = errors_by_case[c, surv]
            thr = col.min()
            if eps is not None:
                thr = thr + eps[c]
            surv = surv[col <= thr]
            t += 1
        for t in range(len(swaps) - 1, -1, -1):
            j = swaps[t]
            order[t], order[j] = order[j], order[t]
        n = len(surv)
        winners[s] = surv[min(int(rng.random() * n), n - 1)]
    return winners


_DBL_MAX = float(np.finfo(np.float64).max)


def _exact_mean(values):
    n = float(len(values))
    try:
        total = math.fsum(values)
        if math.isfinite(total):
            return total / n
    except OverflowError:
        pass
    try:
        return min(math.fsum(v / n for v in values), _DBL_MAX)
    except OverflowError:
        return _DBL_MAX


def row_means(errors):
    if errors.shape[1] == 0:
        return np.full(errors.shape[0], np.nan)
    return np.array([_exact_mean(r) for r in errors.tolist()], dtype=np.float64)


def error_parts(preds, targets):
    with np.errstate(over="ignore", invalid="ignore"):
        errors = np.minimum(np.abs(preds - targets), _DBL_MAX)
    if np.isnan(errors).any():
        return None
    return errors, np.ascontiguousarray(errors.T), row_means(errors)


def batch_tournament(errors_by_case, case_order, batch_size, cand):
    T = len(case_order)
    k = len(cand)
    winners = np.empty(k, dtype=np.int64)
    if k == 0 or T == 0:
        return winners
    nb = -(-T // batch_size)
    which = np.arange(k) % nb
    for b in range(min(nb, k)):
        sel = np.flatnonzero(which == b)
        rows = cand[sel]
        cases = case_order[b * batch_size:(b + 1) * batch_size]
        # one column of batch errors per candidate slot
        cols = errors_by_case[np.ix_(cases, rows.ravel())].T.tolist()
        means = np.array([_exact_mean(c) for c in cols]).reshape(rows.shape)
        winners[sel] = rows[np.arange(len(sel)), np.argmin(means, axis=1)]
    return winners
