# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: a postfix expression VM and a fused Euler integrator.

The opcode and error-code tables mirror ``bridgesim.expr``.  Everything inside
the per-path loop runs without the GIL so worker threads scale.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, log, tanh, sqrt, fabs, pow, isnan, isfinite, fmin, fmax
from libc.stdlib cimport malloc, free
from libc.stdint cimport uint64_t, uint32_t
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal

cnp.import_array()

# Philox4x64-10 with numpy's buffering, so that a state built from
# (counter, key) yields exactly the stream of np.random.Philox(key, counter)
cdef extern from *:
    """
    #include <stdint.h>
    typedef struct {
        uint64_t ctr[4];
        uint64_t key[2];
        uint64_t buf[4];
        int pos;
        int has_uint32;
        uint32_t uinteger;
    } bs_philox;

    static inline uint64_t bs_mulhilo(uint64_t a, uint64_t b, uint64_t *hi) {
        __uint128_t p = (__uint128_t)a * b;
        *hi = (uint64_t)(p >> 64);
        return (uint64_t)p;
    }

    static uint64_t bs_philox_next64(void *st) {
        bs_philox *s = (bs_philox *)st;
        uint64_t c0, c1, c2, c3, k0, k1, hi0, hi1, lo0, lo1;
        int r;
        if (s->pos < 4) {
            return s->buf[s->pos++];
        }
        if (++s->ctr[0] == 0 && ++s->ctr[1] == 0 && ++s->ctr[2] == 0) {
            ++s->ctr[3];
        }
        c0 = s->ctr[0]; c1 = s->ctr[1]; c2 = s->ctr[2]; c3 = s->ctr[3];
        k0 = s->key[0]; k1 = s->key[1];
        for (r = 0; r < 10; r++) {
            lo0 = bs_mulhilo(0xD2E7470EE14C6C93ULL, c0, &hi0);
            lo1 = bs_mulhilo(0xCA5A826395121157ULL, c2, &hi1);
            c0 = hi1 ^ c1 ^ k0;
            c1 = lo1;
            c2 = hi0 ^ c3 ^ k1;
            c3 = lo0;
            k0 += 0x9E3779B97F4A7C15ULL;
            k1 += 0xBB67AE8584CAA73BULL;
        }
        s->buf[0] = c0; s->buf[1] = c1; s->buf[2] = c2; s->buf[3] = c3;
        s->pos = 1;
        return c0;
    }

    static uint32_t bs_philox_next32(void *st) {
        bs_philox *s = (bs_philox *)st;
        uint64_t next;
        if (s->has_uint32) {
            s->has_uint32 = 0;
            return s->uinteger;
        }
        next = bs_philox_next64(st);
        s->has_uint32 = 1;
        s->uinteger = (uint32_t)(next >> 32);
        return (uint32_t)(next & 0xffffffffULL);
    }

    static double bs_philox_nextd(void *st) {
        return (bs_philox_next64(st) >> 11) * (1.0 / 9007199254740992.0);
    }

    static void bs_philox_seed(bs_philox *s, bitgen_t *g, uint64_t seed, uint64_t path,
                               uint64_t stream) {
        s->ctr[0] = 0; s->ctr[1] = 0; s->ctr[2] = 0; s->ctr[3] = stream;
        s->key[0] = seed; s->key[1] = path;
        s->pos = 4;
        s->has_uint32 = 0;
        s->uinteger = 0;
        g->state = s;
        g->next_uint64 = bs_philox_next64;
        g->next_uint32 = bs_philox_next32;
        g->next_double = bs_philox_nextd;
        g->next_raw = bs_philox_next64;
    }
    """
    ctypedef struct bs_philox:
        pass
    void bs_philox_seed(bs_philox* s, bitgen_t* g, uint64_t seed, uint64_t path,
                        uint64_t stream) noexcept nogil


def normal_fill(uint64_t seed, const cnp.int64_t[::1] path_ids, uint64_t stream, int K, int m):
    """Standard normals ``(n, K, m)``; row ``i`` is the stream of path ``path_ids[i]``."""
    cdef Py_ssize_t n = path_ids.shape[0]
    out_arr = np.empty((n, K, m))
    cdef double[:, :, ::1] out = out_arr
    cdef bs_philox st
    cdef bitgen_t g
    cdef Py_ssize_t i, k, j
    with nogil:
        for i in range(n):
            bs_philox_seed(&st, &g, seed, <uint64_t> path_ids[i], stream)
            for k in range(K):
                for j in range(m):
                    out[i, k, j] = random_standard_normal(&g)
    return out_arr

cdef enum:
    OP_CONST = 0
    OP_T = 1
    OP_X = 2
    OP_NEG = 3
    OP_ADD = 4
    OP_SUB = 5
    OP_MUL = 6
    OP_DIV = 7
    OP_POW = 8
    OP_SIN = 9
    OP_COS = 10
    OP_EXP = 11
    OP_LOG = 12
    OP_TANH = 13
    OP_SQRT = 14
    OP_ABS = 15
    OP_MIN = 16
    OP_MAX = 17

    ERR_OK = 0
    ERR_LOG = 1
    ERR_SQRT = 2
    ERR_DIV = 3
    ERR_POW = 4
    ERR_NAN = 5
    ERR_SIGMA = 6

cdef double BLOWUP_BOUND = 1e8
cdef double SIGMA_COND_MAX = 1e12

WEIGHT_NONE = 0
WEIGHT_BOUNDED = 1
WEIGHT_UNBOUNDED = 2
WEIGHT_GIRSANOV = 3


# paths advanced together so opcode dispatch is amortised
cdef enum:
    LANES = 8


cdef int run_lanes(const int* code, int start, int end, const double* consts,
                   double* stack, int L, int nl, const double* t, const double* x,
                   double* out) noexcept nogil:
    """Evaluate one program on ``nl`` lanes.

    ``x`` is lane-major by coordinate (``x[i*L + l]``), ``t`` holds one time
    per lane and ``stack`` has room for ``max_stack * L`` values.
    """
    cdef int sp = 0
    cdef int pc, op, arg, l
    cdef double* top
    cdef double* nxt
    cdef double a, b, r
    for pc in range(start, end):
        op = code[2 * pc]
        arg = code[2 * pc + 1]
        if op == OP_CONST:
            top = stack + sp * L
            for l in range(nl):
                top[l] = consts[arg]
            sp += 1
            continue
        if op == OP_T:
            top = stack + sp * L
            for l in range(nl):
                top[l] = t[l]
            sp += 1
            continue
        if op == OP_X:
            top = stack + sp * L
            for l in range(nl):
                top[l] = x[arg * L + l]
            sp += 1
            continue
        top = stack + (sp - 1) * L
        if op == OP_NEG:
            for l in range(nl):
                top[l] = -top[l]
        elif op == OP_SIN:
            for l in range(nl):
                top[l] = sin(top[l])
        elif op == OP_COS:
            for l in range(nl):
                top[l] = cos(top[l])
        elif op == OP_EXP:
            for l in range(nl):
                top[l] = exp(top[l])
        elif op == OP_LOG:
            for l in range(nl):
                if not top[l] > 0:
                    return ERR_LOG
                top[l] = log(top[l])
        elif op == OP_TANH:
            for l in range(nl):
                top[l] = tanh(top[l])
        elif op == OP_SQRT:
            for l in range(nl):
                if top[l] < 0:
                    return ERR_SQRT
                top[l] = sqrt(top[l])
        elif op == OP_ABS:
            for l in range(nl):
                top[l] = fabs(top[l])
        else:
            nxt = top
            top = stack + (sp - 2) * L
            sp -= 1
            if op == OP_ADD:
                for l in range(nl):
                    top[l] = top[l] + nxt[l]
            elif op == OP_SUB:
                for l in range(nl):
                    top[l] = top[l] - nxt[l]
            elif op == OP_MUL:
                for l in range(nl):
                    top[l] = top[l] * nxt[l]
            elif op == OP_DIV:
                for l in range(nl):
                    if nxt[l] == 0:
                        return ERR_DIV
                    top[l] = top[l] / nxt[l]
            elif op == OP_POW:
                for l in range(nl):
                    a = top[l]
                    b = nxt[l]
                    if a == 0 and b < 0:
                        return ERR_POW
                    r = pow(a, b)
                    if isnan(r) and not isnan(a) and not isnan(b):
                        return ERR_POW
                    top[l] = r
            elif op == OP_MIN:
                for l in range(nl):
                    a = top[l]
                    b = nxt[l]
                    top[l] = a if (isnan(a) or a <= b) else b
            else:
                for l in range(nl):
                    a = top[l]
                    b = nxt[l]
                    top[l] = a if (isnan(a) or a >= b) else b
    for l in range(nl):
        if isnan(stack[l]):
            return ERR_NAN
        out[l] = stack[l]
    return ERR_OK


def eval_program(const int[:, ::1] code, const int[::1] offsets, const double[::1] consts,
                 int max_stack, int j, double t_offset, t, X):
    """Evaluate program ``j`` at times ``t`` and each row of ``X`` ``(n, d)``.

    Returns ``(values, error_code)``.
    """
    Xa = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xa.shape[0]
    cdef int d = Xa.shape[1]
    cdef const double[:, ::1] Xv = Xa
    cdef const double[::1] tv = np.ascontiguousarray(
        np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)))
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef int L = LANES
    cdef double* stack = <double*> malloc((max(max_stack, 1) * L + (d + 1) * L) * sizeof(double))
    cdef double* xl = stack + max(max_stack, 1) * L
    cdef double* tl = xl + d * L
    cdef int err = ERR_OK
    cdef Py_ssize_t p0
    cdef int i, l, nl
    cdef int start = offsets[j]
    cdef int end = offsets[j + 1]
    cdef const int* cp = &code[0, 0] if code.shape[0] > 0 else NULL
    try:
        with nogil:
            p0 = 0
            while p0 < n:
                nl = <int> min(<Py_ssize_t> L, n - p0)
                for l in range(nl):
                    tl[l] = tv[p0 + l] + t_offset
                    for i in range(d):
                        xl[i * L + l] = Xv[p0 + l, i]
                err = run_lanes(cp, start, end, &consts[0], stack, L, nl, tl, xl, &out[p0])
                if err != ERR_OK:
                    break
                p0 += nl
    finally:
        free(stack)
    return out_arr, err


cdef int lu_factor(double* a, int* piv, int d) noexcept nogil:
    """In-place LU with partial pivoting of a row-major ``d x d`` matrix."""
    cdef int i, j, k, p
    cdef double big, tmp
    for k in range(d):
        p = k
        big = fabs(a[k * d + k])
        for i in range(k + 1, d):
            if fabs(a[i * d + k]) > big:
                big = fabs(a[i * d + k])
                p = i
        piv[k] = p
        if big == 0 or not isfinite(big):
            return ERR_SIGMA
        if p != k:
            for j in range(d):
                tmp = a[k * d + j]
                a[k * d + j] = a[p * d + j]
                a[p * d + j] = tmp
        for i in range(k + 1, d):
            a[i * d + k] /= a[k * d + k]
            for j in range(k + 1, d):
                a[i * d + j] -= a[i * d + k] * a[k * d + j]
    return ERR_OK


cdef void lu_solve(const double* lu, const int* piv, int d, const double* b, double* x) noexcept nogil:
    cdef int i, j
    cdef double tmp
    for i in range(d):
        x[i] = b[i]
    for i in range(d):
        if piv[i] != i:
            tmp = x[i]
            x[i] = x[piv[i]]
            x[piv[i]] = tmp
    for i in range(d):
        for j in range(i):
            x[i] -= lu[i * d + j] * x[j]
    for i in range(d - 1, -1, -1):
        for j in range(i + 1, d):
            x[i] -= lu[i * d + j] * x[j]
        x[i] /= lu[i * d + i]


cdef int condition_guard(const double* s, const double* lu, const int* piv, int d,
                         double* col, double* sol) noexcept nogil:
    """1-norm condition number check against ``SIGMA_COND_MAX``."""
    cdef int i, j
    cdef double na = 0, ninv = 0, c
    if d == 1:
        return ERR_OK if s[0] != 0 and isfinite(s[0]) else ERR_SIGMA
    for j in range(d):
        c = 0
        for i in range(d):
            c += fabs(s[i * d + j])
        if c > na:
            na = c
    for j in range(d):
        for i in range(d):
            col[i] = 1.0 if i == j else 0.0
        lu_solve(lu, piv, d, col, sol)
        c = 0
        for i in range(d):
            c += fabs(sol[i])
        if c > ninv:
            ninv = c
    if not na * ninv <= SIGMA_COND_MAX:
        return ERR_SIGMA
    return ERR_OK


cdef double sqnorm(const double* a, int d) noexcept nogil:
    cdef double s = 0
    cdef int i
    for i in range(d):
        s += a[i] * a[i]
    return s


cdef double dot(const double* a, const double* b, int d) noexcept nogil:
    cdef double s = 0
    cdef int i
    for i in range(d):
        s += a[i] * b[i]
    return s


def euler_program(const int[:, ::1] code, const int[::1] offsets, const double[::1] consts,
                  int max_stack, double t_offset, int d, int m, bint has_drift, bint has_h,
                  const double[::1] times, const double[::1] x0, const double[::1] v,
                  bint bridge, bint include_b, bint pin, int weight_mode,
                  const double[:, :, ::1] dW=None, seed=None, path_ids=None, uint64_t stream=0,
                  bint record_dw=False, record=None):
    """Euler-Maruyama for a block of paths with optional bridge pull, pinning
    and inline log-weight accumulation.

    Noise comes either from ``dW`` (increments, shape ``(n, K, m)``) or is
    drawn from the Philox stream keyed by ``(seed, path_ids[i], stream)``;
    the latter draws ``m`` standard normals per step in order and scales them
    by ``sqrt(dt)``, exactly as ``Generator.standard_normal((K, m)) * sqrt(dt)``
    on ``np.random.Philox(key=seed | path << 64, counter=stream << 192)``.

    Program layout: ``d`` drift programs (if ``has_drift``), then ``d*m``
    diffusion programs in row-major order, then ``m`` programs for ``h``
    (if ``has_h``).  ``weight_mode`` is 0 (none), 1 (bounded-drift bridge),
    2 (unbounded-drift bridge) or 3 (Girsanov weight of ``h``).

    Returns
    -------
    values : (n, K+1, d)
    prepin : (n,)
    blowup : (n,) int64, first blown-up node or -1
    terms : (n, 4) ``[drift, dA, ito, quad]`` weight pieces
    err, err_path : error code (0 if none) and offending path index
    dw : (n, K, m) increments when ``record_dw`` (else None)

    With ``record`` (increasing node indices) only those nodes are stored and
    ``values`` has shape ``(n, len(record), d)``.
    """
    cdef Py_ssize_t K = times.shape[0] - 1
    cdef Py_ssize_t n
    cdef bint draw = dW is None
    cdef const cnp.int64_t[::1] pid
    cdef uint64_t seed64 = 0
    if draw:
        if seed is None or path_ids is None:
            raise ValueError("need either increments or a seed and path ids")
        pid = np.ascontiguousarray(path_ids, dtype=np.int64)
        seed64 = <uint64_t> seed
        n = pid.shape[0]
    else:
        n = dW.shape[0]
        if dW.shape[1] != K or dW.shape[2] != m:
            raise ValueError("increments do not match the grid")
    if x0.shape[0] != d or v.shape[0] != d:
        raise ValueError("inconsistent shapes passed to euler_program")
    if (weight_mode == 1 or weight_mode == 2) and m != d:
        raise ValueError("bridge weights need a square diffusion")
    if weight_mode == 3 and not has_h:
        raise ValueError("Girsanov weights need h programs")
    slot_arr = np.full(K + 1, -1, dtype=np.int64)
    if record is None:
        slot_arr[:] = np.arange(K + 1)
        n_rec = K + 1
    else:
        rec = np.asarray(record, dtype=np.int64)
        if rec.ndim != 1 or rec.size < 1 or np.any(np.diff(rec) <= 0) or rec[0] < 0 or rec[-1] > K:
            raise ValueError("record must be increasing node indices")
        slot_arr[rec] = np.arange(rec.size)
        n_rec = rec.size
    cdef cnp.int64_t[::1] slot = slot_arr
    values_arr = np.empty((n, n_rec, d))
    prepin_arr = np.zeros(n)
    blowup_arr = np.full(n, -1, dtype=np.int64)
    terms_arr = np.zeros((n, 4))
    cdef double[:, :, ::1] values = values_arr
    cdef double[::1] prepin = prepin_arr
    cdef cnp.int64_t[::1] blowup = blowup_arr
    cdef double[:, ::1] terms = terms_arr
    dw_arr = np.empty((n, K, m)) if (record_dw and draw) else None
    cdef double[:, :, ::1] dw_out = dw_arr
    cdef bs_philox rng_state[LANES]
    cdef bitgen_t gens[LANES]
    cdef double[::1] sdt = np.sqrt(np.diff(np.asarray(times)))

    cdef int L = LANES
    cdef int sb = d if has_drift else 0
    cdef int hb = sb + d * m
    cdef const int* cp = &code[0, 0]
    cdef const int* off = &offsets[0]
    cdef const double* cs = &consts[0]
    cdef double T = times[K]
    cdef bint factor = weight_mode == 1 or weight_mode == 2
    cdef int ms = max(max_stack, 1)

    # lane buffers (coordinate-major): x, xn, b, sigma, h, time, dw, stack
    cdef int nlane = (3 * d + d * m + 2 * m + 1 + ms) * L
    # per-lane factorisations (current and previous) and small vectors
    cdef int nsmall = 2 * L * d * d + 9 * d + d * d
    cdef double* buf = <double*> malloc((nlane + nsmall) * sizeof(double))
    cdef int* piv = <int*> malloc(2 * L * max(d, 1) * sizeof(int))
    cdef char* alive = <char*> malloc(L * sizeof(char))
    cdef double* x = buf
    cdef double* xn = x + d * L
    cdef double* bb = xn + d * L
    cdef double* sg = bb + d * L
    cdef double* hv = sg + d * m * L
    cdef double* tl = hv + m * L
    cdef double* dwl = tl + L
    cdef double* stack = dwl + m * L
    cdef double* lu_a = stack + ms * L
    cdef double* lu_b = lu_a + L * d * d
    cdef double* yt = lu_b + L * d * d
    cdef double* z = yt + d
    cdef double* zp = z + d
    cdef double* cv = zp + d
    cdef double* dy = cv + d
    cdef double* zdy = dy + d
    cdef double* col = zdy + d
    cdef double* sol = col + d
    cdef double* sm = sol + d
    cdef double* smat = sm + d
    cdef double* lu
    cdef double* lup
    cdef double* dtmp
    cdef int* pv_a = piv
    cdef int* pv_b = piv + L * max(d, 1)
    cdef int* pv
    cdef int* pvp
    cdef int* itmp

    cdef Py_ssize_t p0, k, j2
    cdef int i, j, l, nl, err = ERR_OK
    cdef Py_ssize_t err_path = -1
    cdef double t, h, tau, acc, s, hsq
    cdef bint bad
    try:
        with nogil:
            p0 = 0
            while p0 < n and err == ERR_OK:
                nl = <int> min(<Py_ssize_t> L, n - p0)
                lu = lu_a
                lup = lu_b
                pv = pv_a
                pvp = pv_b
                for l in range(nl):
                    alive[l] = 1
                    if draw:
                        bs_philox_seed(&rng_state[l], &gens[l], seed64, <uint64_t> pid[p0 + l], stream)
                    for i in range(d):
                        x[i * L + l] = x0[i]
                        if slot[0] >= 0:
                            values[p0 + l, slot[0], i] = x0[i]
                for k in range(K):
                    t = times[k]
                    h = times[k + 1] - t
                    tau = T - t
                    for l in range(nl):
                        tl[l] = t + t_offset
                    if has_drift:
                        for i in range(d):
                            err = run_lanes(cp, off[i], off[i + 1], cs, stack, L, nl, tl, x, bb + i * L)
                            if err != ERR_OK:
                                break
                    else:
                        for i in range(d * L):
                            bb[i] = 0
                    if err == ERR_OK:
                        for i in range(d * m):
                            err = run_lanes(cp, off[sb + i], off[sb + i + 1], cs, stack, L, nl, tl, x, sg + i * L)
                            if err != ERR_OK:
                                break
                    if err == ERR_OK and has_h:
                        for i in range(m):
                            err = run_lanes(cp, off[hb + i], off[hb + i + 1], cs, stack, L, nl, tl, x, hv + i * L)
                            if err != ERR_OK:
                                break
                    if err != ERR_OK:
                        err_path = p0
                        break
                    for l in range(nl):
                        for j in range(m):
                            if draw:
                                dwl[j * L + l] = random_standard_normal(&gens[l]) * sdt[k]
                                if record_dw:
                                    dw_out[p0 + l, k, j] = dwl[j * L + l]
                            else:
                                dwl[j * L + l] = dW[p0 + l, k, j]

                    for l in range(nl):
                        if not alive[l]:
                            continue
                        if factor:
                            for i in range(d * d):
                                smat[i] = sg[i * L + l]
                                lu[l * d * d + i] = smat[i]
                            err = lu_factor(lu + l * d * d, pv + l * d, d)
                            if err == ERR_OK:
                                err = condition_guard(smat, lu + l * d * d, pv + l * d, d, col, sol)
                            if err != ERR_OK:
                                err_path = p0 + l
                                break
                            for i in range(d):
                                yt[i] = x[i * L + l] - v[i]
                                sm[i] = bb[i * L + l]
                            lu_solve(lu + l * d * d, pv + l * d, d, yt, z)
                            if k >= 1:
                                # combined dA plus covariation summand at node k
                                lu_solve(lup + l * d * d, pvp + l * d, d, yt, zp)
                                terms[p0 + l, 1] += (sqnorm(z, d) - sqnorm(zp, d)) / (2.0 * tau)
                            lu_solve(lu + l * d * d, pv + l * d, d, sm, cv)
                            if weight_mode == 1:
                                terms[p0 + l, 0] += dot(z, cv, d) * h / tau
                            else:
                                terms[p0 + l, 3] -= 0.5 * sqnorm(cv, d) * h
                        elif weight_mode == 3:
                            acc = 0
                            hsq = 0
                            for j in range(m):
                                acc += hv[j * L + l] * dwl[j * L + l]
                                hsq += hv[j * L + l] * hv[j * L + l]
                            terms[p0 + l, 2] += acc
                            terms[p0 + l, 3] -= 0.5 * hsq * h

                        bad = False
                        for i in range(d):
                            acc = 0
                            for j in range(m):
                                acc += sg[(i * m + j) * L + l] * dwl[j * L + l]
                            if include_b:
                                acc += bb[i * L + l] * h
                            if bridge:
                                acc -= (x[i * L + l] - v[i]) * (h / tau)
                            xn[i] = x[i * L + l] + acc
                            if not (isfinite(xn[i]) and fabs(xn[i]) <= BLOWUP_BOUND):
                                bad = True
                        if bad:
                            alive[l] = 0
                            blowup[p0 + l] = k + 1
                            for j2 in range(k + 1, K + 1):
                                if slot[j2] >= 0:
                                    for i in range(d):
                                        values[p0 + l, slot[j2], i] = x[i * L + l]
                            continue
                        if pin and k == K - 1:
                            s = 0
                            for i in range(d):
                                s += (xn[i] - v[i]) * (xn[i] - v[i])
                                xn[i] = v[i]
                            prepin[p0 + l] = sqrt(s)
                        if weight_mode == 2:
                            for i in range(d):
                                dy[i] = xn[i] - x[i * L + l]
                            lu_solve(lu + l * d * d, pv + l * d, d, dy, zdy)
                            terms[p0 + l, 2] += dot(cv, zdy, d)
                        for i in range(d):
                            x[i * L + l] = xn[i]
                        if slot[k + 1] >= 0:
                            for i in range(d):
                                values[p0 + l, slot[k + 1], i] = xn[i]
                    if err != ERR_OK:
                        break
                    if factor:
                        dtmp = lu
                        lu = lup
                        lup = dtmp
                        itmp = pv
                        pv = pvp
                        pvp = itmp
                p0 += nl
    finally:
        free(buf)
        free(piv)
        free(alive)
    return values_arr, prepin_arr, blowup_arr, terms_arr, err, err_path, dw_arr
