# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: program evaluation and the selection inner loops.

All randomness is drawn by the caller and passed in as arrays, so these
functions are deterministic and must agree exactly with ``_pykernels``.
"""

import numpy as np
cimport numpy as np

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport sin, cos, exp, log, isfinite, fabs, ldexp
from libc.stdlib cimport calloc, free
from libc.string cimport memcpy
from libc.float cimport DBL_MAX
from numpy.random cimport bitgen_t

NAME = "cython"

cdef enum:
    OP_ADD = 0
    OP_SUB = 1
    OP_MUL = 2
    OP_DIV = 3
    OP_SIN = 4
    OP_COS = 5
    OP_EXP = 6
    OP_LOG = 7
    OP_VAR = 8
    OP_CONST = 9


cdef inline double _guard(double r) noexcept nogil:
    return r if isfinite(r) else 1.0


# Correctly rounded summation. A mean built on it does not depend on the
# order of its terms, so batch means and row means tie exactly whenever
# their multisets agree. Non-negative terms are binned by exponent as exact
# integer mantissa sums; only the occupied bins reach Shewchuk's
# non-overlapping partials (the algorithm behind math.fsum).
cdef enum:
    MAX_PARTIALS = 2200  # enough for any set of non-overlapping doubles
    N_BINS = 2047
    BIN_FLUSH = 1024     # 1024 mantissas of < 2**53 fit in an int64


cdef extern from *:
    ctypedef long long int128 "__int128"

cdef unsigned long long MANT_MASK = (<unsigned long long>1 << 52) - 1
cdef unsigned long long HIDDEN_BIT = <unsigned long long>1 << 52
cdef long long LOW32 = (<long long>1 << 32) - 1


cdef struct ExactSum:
    double p[MAX_PARTIALS]
    long long bins[N_BINS]
    int n, lo, hi, pending
    bint overflow


cdef inline void _xs_reset(ExactSum* s) noexcept nogil:
    s.n = 0
    s.lo = N_BINS
    s.hi = -1
    s.pending = 0
    s.overflow = False


cdef inline void _xs_partial(ExactSum* s, double x) noexcept nogil:
    cdef int i = 0, j
    cdef double y, t, hi, lo
    if s.overflow:
        return
    for j in range(s.n):
        y = s.p[j]
        if fabs(x) < fabs(y):
            t = x
            x = y
            y = t
        hi = x + y
        lo = y - (hi - x)
        if lo != 0.0:
            s.p[i] = lo
            i += 1
        x = hi
    s.n = i
    if x != 0.0:
        if not isfinite(x):
            s.overflow = True
        else:
            s.p[s.n] = x
            s.n += 1


cdef inline void _xs_flush(ExactSum* s) noexcept nogil:
    cdef int e
    cdef long long v
    for e in range(s.lo, s.hi + 1):
        v = s.bins[e]
        if v != 0:
            s.bins[e] = 0
            # both halves are exact doubles; the bin weighs 2**(e - 1075)
            _xs_partial(s, ldexp(<double>(v >> 32), e - 1043))
            _xs_partial(s, ldexp(<double>(v & LOW32), e - 1075))
    s.lo = N_BINS
    s.hi = -1
    s.pending = 0


cdef inline void _xs_add(ExactSum* s, double x) noexcept nogil:
    cdef unsigned long long u
    cdef int e
    memcpy(&u, &x, 8)
    e = <int>(u >> 52)
    if e >= N_BINS:  # negative or non-finite: no binning
        _xs_partial(s, x)
        return
    if e == 0:
        e = 1  # subnormals share the scale of the smallest normal exponent
        u = u & MANT_MASK
    else:
        u = (u & MANT_MASK) | HIDDEN_BIT
    if s.lo > s.hi:
        s.lo = e
        s.hi = e
    elif e < s.lo:
        s.lo = e
    elif e > s.hi:
        s.hi = e
    s.bins[e] += <long long>u
    s.pending += 1
    if s.pending == BIN_FLUSH:
        _xs_flush(s)


cdef inline double _xs_total(ExactSum* s) noexcept nogil:
    _xs_flush(s)
    cdef int n = s.n
    cdef double hi = 0.0, lo = 0.0, x, y, yr
    if n > 0:
        n -= 1
        hi = s.p[n]
        while n > 0:
            x = hi
            n -= 1
            y = s.p[n]
            hi = x + y
            yr = hi - x
            lo = y - yr
            if lo != 0.0:
                break
        # round half to even across the remaining partials
        if n > 0 and ((lo < 0.0 and s.p[n - 1] < 0.0) or (lo > 0.0 and s.p[n - 1] > 0.0)):
            y = lo * 2.0
            x = hi + y
            yr = x - hi
            if y == yr:
                hi = x
    return hi


cdef ExactSum* _xs_new() except NULL:
    cdef ExactSum* s = <ExactSum*>calloc(1, sizeof(ExactSum))
    if s == NULL:
        raise MemoryError()
    _xs_reset(s)
    return s


cdef inline bint _narrow_sum(const double* base, const long long* idx, Py_ssize_t stride,
                             Py_ssize_t n, double* out) noexcept nogil:
    """Exact sum through one 128-bit integer, when the terms allow it.

    Applies to at most 1024 non-negative normal terms whose exponents span
    at most 60; the int128 -> double conversion then rounds correctly.
    """
    cdef Py_ssize_t q
    cdef unsigned long long bits[BIN_FLUSH]
    cdef unsigned long long u, lo = 4096, hi = 0, e
    cdef int128 acc = 0
    if n > BIN_FLUSH:
        return False
    for q in range(n):
        memcpy(&u, &base[(idx[q] if idx != NULL else q) * stride], 8)
        bits[q] = u
        e = u >> 52
        if u != 0:
            lo = e if e < lo else lo
            hi = e if e > hi else hi
    if hi == 0:
        if lo == 4096:  # all zero
            out[0] = 0.0
            return True
        return False  # only subnormals
    # negative or non-finite terms, subnormals, a wide span, or a result
    # near the subnormal range take the general route
    if hi >= N_BINS or lo == 0 or hi - lo > 60 or lo < 200:
        return False
    for q in range(n):
        u = bits[q]
        if u != 0:
            acc += (<int128>((u & MANT_MASK) | HIDDEN_BIT)) << <int>((u >> 52) - lo)
    out[0] = ldexp(<double>acc, <int>lo - 1075)
    return True


cdef double _exact_mean(ExactSum* s, const double* base, const long long* idx,
                        Py_ssize_t stride, Py_ssize_t n) noexcept nogil:
    """Mean of ``base[idx[q] * stride]`` (``base[q * stride]`` when idx is NULL).

    Leaves ``s`` reset (all bins zero) for the next call.
    """
    cdef Py_ssize_t q
    cdef double dn = <double>n, v
    if _narrow_sum(base, idx, stride, n, &v) and isfinite(v):
        return v / dn
    _xs_reset(s)
    for q in range(n):
        _xs_add(s, base[(idx[q] if idx != NULL else q) * stride])
    v = _xs_total(s)
    if not s.overflow and isfinite(v):
        return v / dn
    _xs_reset(s)
    for q in range(n):
        _xs_add(s, base[(idx[q] if idx != NULL else q) * stride] / dn)
    v = _xs_total(s)
    if s.overflow or v > DBL_MAX:
        return DBL_MAX
    return v


def error_parts(const double[:, ::1] preds, const double[::1] targets):
    """Clamped absolute errors, their case-major copy and exact row means.

    Returns None when any error is NaN.
    """
    cdef Py_ssize_t N = preds.shape[0], T = preds.shape[1], i, c, i0, c0, i1, c1
    cdef double d
    cdef bint bad = False
    errors = np.empty((N, T))
    by_case = np.empty((T, N))
    means = np.empty(N)
    cdef double[:, ::1] e = errors
    cdef double[:, ::1] bc = by_case
    cdef double[::1] m = means
    cdef ExactSum* s = _xs_new()
    with nogil:
        for i in range(N):
            for c in range(T):
                d = fabs(preds[i, c] - targets[c])
                if d != d:
                    bad = True
                elif d > DBL_MAX:
                    d = DBL_MAX
                e[i, c] = d
            m[i] = _exact_mean(s, &e[i, 0], NULL, 1, T)
        # blocked transpose keeps both sides cache friendly
        for i0 in range(0, N, 32):
            i1 = i0 + 32 if i0 + 32 < N else N
            for c0 in range(0, T, 32):
                c1 = c0 + 32 if c0 + 32 < T else T
                for c in range(c0, c1):
                    for i in range(i0, i1):
                        bc[c, i] = e[i, c]
    free(s)
    if bad:
        return None
    return errors, by_case, means


def row_means(const double[:, ::1] errors):
    """Exact-sum mean of every row."""
    cdef Py_ssize_t N = errors.shape[0], T = errors.shape[1], i
    out = np.empty(N)
    cdef double[::1] o = out
    if T == 0:
        out[:] = np.nan
        return out
    cdef ExactSum* s = _xs_new()
    with nogil:
        for i in range(N):
            o[i] = _exact_mean(s, &errors[i, 0], NULL, 1, T)
    free(s)
    return out


cdef inline double _apply2(long long c, double a, double b) noexcept nogil:
    # a is the first child
    if c == OP_ADD:
        return _guard(a + b)
    if c == OP_SUB:
        return _guard(a - b)
    if c == OP_MUL:
        return _guard(a * b)
    return 1.0 if b == 0.0 else _guard(a / b)


cdef inline double _apply1(long long c, double a) noexcept nogil:
    if c == OP_SIN:
        return _guard(sin(a))
    if c == OP_COS:
        return _guard(cos(a))
    if c == OP_EXP:
        return _guard(exp(a))
    return 1.0 if a <= 0.0 else _guard(log(a))


def eval_programs(const long long[::1] codes, const long long[::1] args,
                  const double[::1] vals, const long long[::1] offsets,
                  const double[:, ::1] X):
    """Evaluate concatenated prefix programs on every case.

    Node-major: each node is applied to a whole row of cases at once, which
    keeps the opcode dispatch out of the inner loop. Every case still sees
    the same sequence of operations as a scalar evaluation would.

    Stack slots are strided views: variables point straight at their input
    column, and subtrees without variables stay scalar (stride 0), so they
    are computed once rather than once per case.
    Returns predictions with shape ``(n_programs, n_cases)``.
    """
    cdef Py_ssize_t n_prog = offsets.shape[0] - 1
    cdef Py_ssize_t n_cases = X.shape[0]
    cdef Py_ssize_t p, i, j, sp, deepest = 1, ts, ns
    cdef long long c
    cdef double a, b
    cdef double *dst
    cdef const double *top
    cdef const double *nxt

    # deepest stack over all programs
    for p in range(n_prog):
        sp = 0
        for j in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
            c = codes[j]
            if c >= OP_VAR:
                sp += 1
                if sp > deepest:
                    deepest = sp
            elif c < OP_SIN:
                sp -= 1

    out = np.empty((n_prog, n_cases), dtype=np.float64)
    stack_arr = np.empty((deepest, n_cases), dtype=np.float64)
    cols_arr = np.ascontiguousarray(np.asarray(X).T)
    view_arr = np.empty(deepest, dtype=np.intp)
    stride_arr = np.empty(deepest, dtype=np.intp)
    scalar_arr = np.empty(deepest, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] stack = stack_arr
    cdef const double[:, ::1] cols = cols_arr
    # slot sp holds the data at view[sp], read with stride[sp] (0 = scalar)
    cdef const double** view = <const double**>np.PyArray_DATA(view_arr)
    cdef Py_ssize_t[::1] stride = stride_arr
    cdef double[::1] scalar = scalar_arr

    with nogil:
        for p in range(n_prog):
            sp = 0
            j = offsets[p + 1] - 1
            while j >= offsets[p]:
                c = codes[j]
                if c == OP_VAR:
                    view[sp] = &cols[args[j], 0]
                    stride[sp] = 1
                    sp += 1
                elif c == OP_CONST:
                    scalar[sp] = vals[j]
                    view[sp] = &scalar[sp]
                    stride[sp] = 0
                    sp += 1
                elif c < OP_SIN:
                    # first child sits on top of the stack; the result
                    # replaces the second child
                    sp -= 1
                    top = view[sp]
                    ts = stride[sp]
                    nxt = view[sp - 1]
                    ns = stride[sp - 1]
                    if ts == 0 and ns == 0:
                        scalar[sp - 1] = _apply2(c, top[0], nxt[0])
                        view[sp - 1] = &scalar[sp - 1]
                    else:
                        dst = &stack[sp - 1, 0]
                        if c == OP_ADD:
                            for i in range(n_cases):
                                dst[i] = _guard(top[i * ts] + nxt[i * ns])
                        elif c == OP_SUB:
                            for i in range(n_cases):
                                dst[i] = _guard(top[i * ts] - nxt[i * ns])
                        elif c == OP_MUL:
                            for i in range(n_cases):
                                dst[i] = _guard(top[i * ts] * nxt[i * ns])
                        else:
                            for i in range(n_cases):
                                b = nxt[i * ns]
                                dst[i] = 1.0 if b == 0.0 else _guard(top[i * ts] / b)
                        view[sp - 1] = dst
                        stride[sp - 1] = 1
                else:
                    top = view[sp - 1]
                    if stride[sp - 1] == 0:
                        scalar[sp - 1] = _apply1(c, top[0])
                        view[sp - 1] = &scalar[sp - 1]
                    else:
                        dst = &stack[sp - 1, 0]
                        if c == OP_SIN:
                            for i in range(n_cases):
                                dst[i] = _guard(sin(top[i]))
                        elif c == OP_COS:
                            for i in range(n_cases):
                                dst[i] = _guard(cos(top[i]))
                        elif c == OP_EXP:
                            for i in range(n_cases):
                                dst[i] = _guard(exp(top[i]))
                        else:
                            for i in range(n_cases):
                                a = top[i]
                                dst[i] = 1.0 if a <= 0.0 else _guard(log(a))
                        view[sp - 1] = dst
                j -= 1
            top = view[0]
            ts = stride[0]
            for i in range(n_cases):
                o[p, i] = top[i * ts]
    return out


def tournament(const double[::1] fitness, const long long[:, ::1] cand):
    """Winner per row of ``cand``: minimal fitness, earliest draw on ties."""
    cdef Py_ssize_t k = cand.shape[0], ts = cand.shape[1], s, j
    cdef long long best
    cdef double bv, v
    winners = np.empty(k, dtype=np.int64)
    cdef long long[::1] w = winners
    with nogil:
        for s in range(k):
            best = cand[s, 0]
            bv = fitness[best]
            for j in range(1, ts):
                v = fitness[cand[s, j]]
                if v < bv:
                    bv = v
                    best = cand[s, j]
            w[s] = best
    return winners


def lexicase(const double[:, ::1] errors_by_case, Py_ssize_t k, rng, eps=None):
    """Lexicase / epsilon-lexicase selection of ``k`` parents.

    ``errors_by_case`` is cases x individuals. Each selection walks a lazily
    drawn random case order (partial Fisher-Yates, one ``rng.random()`` per
    visited case) keeping survivors within ``eps[case]`` of the best survivor
    on that case, then breaks the final tie with one more uniform draw.
    """
    cdef Py_ssize_t T = errors_by_case.shape[0], N = errors_by_case.shape[1]
    cdef Py_ssize_t s, t, i, j, n, kept, pick
    cdef long long c, tmp
    cdef double m, v, thr
    cdef bint use_eps = eps is not None
    cdef const double[::1] e
    if use_eps:
        e = eps
    surv_arr = np.empty(N, dtype=np.int64)
    order_arr = np.arange(T, dtype=np.int64)
    swaps_arr = np.empty(T, dtype=np.int64)
    winners = np.empty(k, dtype=np.int64)
    cdef long long[::1] surv = surv_arr
    cdef long long[::1] order = order_arr
    cdef long long[::1] swaps = swaps_arr
    cdef long long[::1] w = winners
    capsule = rng.bit_generator.capsule
    cdef bitgen_t *bg = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    with rng.bit_generator.lock, nogil:
        for s in range(k):
            for i in range(N):
                surv[i] = i
            n = N
            t = 0
            while n > 1 and t < T:
                j = t + <Py_ssize_t>(bg.next_double(bg.state) * (T - t))
                if j >= T:
                    j = T - 1
                swaps[t] = j
                tmp = order[t]
                order[t] = order[j]
                order[j] = tmp
                c = order[t]
                m = errors_by_case[c, surv[0]]
                for i in range(1, n):
                    v = errors_by_case[c, surv[i]]
                    if v < m:
                        m = v
                thr = m + e[c] if use_eps else m
                kept = 0
                for i in range(n):
                    if errors_by_case[c, surv[i]] <= thr:
                        surv[kept] = surv[i]
                        kept += 1
                n = kept
                t += 1
            # undo the swaps so the next walk starts from the identity order
            while t > 0:
                t -= 1
                j = swaps[t]
                tmp = order[t]
                order[t] = order[j]
                order[j] = tmp
            pick = <Py_ssize_t>(bg.next_double(bg.state) * n)
            if pick >= n:
                pick = n - 1
            w[s] = surv[pick]
    return winners


def batch_tournament(const double[:, ::1] errors_by_case, const long long[::1] case_order,
                     Py_ssize_t batch_size, const long long[:, ::1] cand):
    """Tournament ``s`` is judged on batch ``s mod n_batches`` by exact-sum mean error.

    Tournaments are processed batch by batch so the batch's case rows of
    ``errors_by_case`` (cases x individuals) stay in cache.
    """
    cdef Py_ssize_t T = case_order.shape[0]
    cdef Py_ssize_t k = cand.shape[0], ts = cand.shape[1]
    cdef Py_ssize_t nb = (T + batch_size - 1) // batch_size
    cdef Py_ssize_t N = errors_by_case.shape[1]
    cdef Py_ssize_t b, s, j, start, stop
    cdef long long r, best
    cdef double v, bv
    winners = np.empty(k, dtype=np.int64)
    cdef long long[::1] w = winners
    if k == 0 or T == 0:
        return winners
    cdef ExactSum* xs = _xs_new()
    with nogil:
        for b in range(nb if nb < k else k):
            start = b * batch_size
            stop = start + batch_size
            if stop > T:
                stop = T
            s = b
            while s < k:
                best = -1
                bv = 0.0
                for j in range(ts):
                    r = cand[s, j]
                    v = _exact_mean(xs, &errors_by_case[0, r], &case_order[start], N, stop - start)
                    if best < 0 or v < bv:
                        bv = v
                        best = r
                w[s] = best
                s += nb
    free(xs)
    return winners
