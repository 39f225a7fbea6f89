# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; mirrors ``_pykernels`` function by function.

Ensemble members are independent, so the member loop runs under ``prange``;
every member writes only its own output row, which keeps results identical
for any thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sin, cos, floor, M_PI
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef double TWO_PI = 2.0 * M_PI


cdef inline void _harmonics(double x, Py_ssize_t F, double* sn, double* cs) noexcept nogil:
    # sin/cos of 2 pi j x for j = 0..F by angle addition; frequencies are integers
    cdef double a = TWO_PI * x
    cdef double s1 = sin(a), c1 = cos(a)
    cdef Py_ssize_t j
    sn[0] = 0.0
    cs[0] = 1.0
    for j in range(1, F + 1):
        sn[j] = sn[j - 1] * c1 + cs[j - 1] * s1
        cs[j] = cs[j - 1] * c1 - sn[j - 1] * s1


cdef struct ObsView:
    # raw pointers: memoryview arguments would be acquired and released on every call
    const double* const_
    const int64_t* freq
    Py_ssize_t G
    const double* ccos
    const double* csin
    const int64_t* off
    const double* br
    const double* sv


cdef ObsView _obs_view(const double[::1] const_, const int64_t[::1] freq, const double[:, ::1] ccos,
                       const double[:, ::1] csin, const int64_t[::1] off, const double[::1] br,
                       const double[::1] sv):
    cdef ObsView v
    v.const_ = &const_[0]
    v.off = &off[0]
    v.G = freq.shape[0]
    v.freq = &freq[0] if v.G > 0 else NULL
    v.ccos = &ccos[0, 0] if v.G > 0 else NULL
    v.csin = &csin[0, 0] if v.G > 0 else NULL
    v.br = &br[0] if br.shape[0] > 0 else NULL
    v.sv = &sv[0] if sv.shape[0] > 0 else NULL
    return v


cdef inline double _obs_component(Py_ssize_t c, double x, const double* sn, const double* cs,
                                  const ObsView* o) noexcept nogil:
    cdef double v = o.const_[c]
    cdef Py_ssize_t g, j, lo, hi
    for g in range(o.G):
        v += o.ccos[c * o.G + g] * cs[o.freq[g]] + o.csin[c * o.G + g] * sn[o.freq[g]]
    lo = o.off[c]
    hi = o.off[c + 1]
    if hi > lo:
        j = hi - 1  # x below the first break wraps to the last value
        for g in range(lo, hi):
            if o.br[g] <= x:
                j = g
            else:
                break
        v += o.sv[j]
    return v


def _int_freqs(values):
    a = np.asarray(values, dtype=np.float64)
    r = np.rint(a).astype(np.int64)
    if np.any(r != a) or np.any(r < 0):
        raise ValueError("frequencies must be nonnegative integers")
    return np.ascontiguousarray(r)


def galerkin_entries(const double[::1] breaks, long degree, freqs, amps, long M, gx, gw):
    cdef const double[::1] f = np.ascontiguousarray(freqs, dtype=np.float64)
    cdef const double[::1] a = np.ascontiguousarray(amps, dtype=np.float64)
    cdef const double[::1] qx = np.ascontiguousarray(gx, dtype=np.float64)
    cdef const double[::1] qw = np.ascontiguousarray(gw, dtype=np.float64)
    cdef Py_ssize_t nb = breaks.shape[0], ng = qx.shape[0], nf = f.shape[0]
    cdef Py_ssize_t total = nb * ng
    rows_a = np.empty(4 * total, dtype=np.int64)
    cols_a = np.empty(4 * total, dtype=np.int64)
    vals_a = np.empty(4 * total, dtype=np.float64)
    cdef int64_t[::1] rows = rows_a
    cdef int64_t[::1] cols = cols_a
    cdef double[::1] vals = vals_a
    cdef Py_ssize_t s, g, j, p
    cdef double left, length, y, w, u, alpha, ty, v, beta
    cdef int64_t ia, ia1, ii, ii1
    for s in range(nb):
        left = breaks[s]
        if s + 1 < nb:
            length = breaks[s + 1] - left
        else:
            length = breaks[0] + 1.0 - left
        for g in range(ng):
            y = left + length * qx[g]
            y = y - floor(y)
            w = length * qw[g] * M
            u = y * M - 0.5
            ia = <int64_t>floor(u)
            alpha = u - ia
            ia = ((ia % M) + M) % M
            ia1 = (ia + 1) % M
            ty = degree * y
            for j in range(nf):
                ty += a[j] * sin(TWO_PI * f[j] * y)
            ty = ty - floor(ty)
            v = ty * M - 0.5
            ii = <int64_t>floor(v)
            beta = v - ii
            ii = ((ii % M) + M) % M
            ii1 = (ii + 1) % M
            p = s * ng + g
            rows[p] = ii;                cols[p] = ia;                vals[p] = w * (1 - beta) * (1 - alpha)
            rows[total + p] = ii;        cols[total + p] = ia1;       vals[total + p] = w * (1 - beta) * alpha
            rows[2 * total + p] = ii1;   cols[2 * total + p] = ia;    vals[2 * total + p] = w * beta * (1 - alpha)
            rows[3 * total + p] = ii1;   cols[3 * total + p] = ia1;   vals[3 * total + p] = w * beta * alpha
    return rows_a, cols_a, vals_a


def birkhoff_float(x0, degrees, amps, freqs, obs, k_idx, fracs, int num_threads=1):
    cdef const double[::1] xs = np.ascontiguousarray(x0, dtype=np.float64)
    cdef const int64_t[::1] deg = np.ascontiguousarray(degrees, dtype=np.int64)
    cdef const double[:, ::1] amp = np.ascontiguousarray(amps, dtype=np.float64)
    mf_a = _int_freqs(freqs)
    of_a = _int_freqs(obs["freq"])
    cdef const int64_t[::1] mf = mf_a
    cdef const int64_t[::1] ofreq = of_a
    cdef const int64_t[::1] kid = np.ascontiguousarray(k_idx, dtype=np.int64)
    cdef const double[::1] fr = np.ascontiguousarray(fracs, dtype=np.float64)
    cdef const double[::1] const_ = obs["const"]
    cdef const double[:, ::1] ocos = obs["cos"]
    cdef const double[:, ::1] osin = obs["sin"]
    cdef const int64_t[::1] off = obs["step_offsets"]
    cdef const double[::1] br = obs["step_breaks"]
    cdef const double[::1] sv = obs["step_vals"]
    cdef ObsView ov = _obs_view(const_, ofreq, ocos, osin, off, br, sv)
    cdef Py_ssize_t m = xs.shape[0], J = kid.shape[0], d = const_.shape[0], nf = mf.shape[0]
    cdef Py_ssize_t F = max([0] + list(mf_a) + list(of_a))
    out_a = np.zeros((m, J, d))
    cdef double[:, :, ::1] out = out_a
    partial_a = np.zeros((m, d))
    cdef double[:, ::1] partial = partial_a
    sn_a = np.zeros((m, F + 1))
    cs_a = np.zeros((m, F + 1))
    cdef double[:, ::1] sn = sn_a
    cdef double[:, ::1] cs = cs_a
    cdef Py_ssize_t kmax = kid[J - 1] if J > 0 else 0
    cdef Py_ssize_t i, k, c, ptr, j
    cdef double x, y, fx
    if amp.shape[0] < kmax or deg.shape[0] < kmax:
        raise ValueError("map table shorter than the requested horizon")
    if kmax > 0 and amp.shape[1] != nf:
        raise ValueError("amplitude table does not match the frequencies")
    for i in prange(m, nogil=True, num_threads=num_threads, schedule="static"):
        x = xs[i]
        ptr = 0
        for k in range(kmax + 1):
            _harmonics(x, F, &sn[i, 0], &cs[i, 0])
            for c in range(d):
                fx = _obs_component(c, x, &sn[i, 0], &cs[i, 0], &ov)
                j = ptr
                while j < J and kid[j] == k:
                    out[i, j, c] = partial[i, c] + fr[j] * fx
                    j = j + 1
                partial[i, c] += fx
            while ptr < J and kid[ptr] == k:
                ptr = ptr + 1
            if k == kmax:
                break
            y = deg[k] * x
            for j in range(nf):
                y = y + amp[k, j] * sn[i, mf[j]]
            x = y - floor(y)
    return out_a


cdef inline double _bits_at(const uint64_t* row, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t q = k >> 6
    cdef int s = k & 63
    cdef uint64_t w
    if s == 0:
        w = row[q]
    else:
        w = (row[q] << s) | (row[q + 1] >> (64 - s))
    # 53 bits fit a signed integer, whose conversion is a single instruction
    return <double><int64_t>(w >> 11) * 1.1102230246251565e-16


def birkhoff_bits(words_in, obs, k_idx, fracs, int num_threads=1):
    cdef const uint64_t[:, ::1] words = np.ascontiguousarray(words_in, dtype=np.uint64)
    cdef const int64_t[::1] kid = np.ascontiguousarray(k_idx, dtype=np.int64)
    cdef const double[::1] fr = np.ascontiguousarray(fracs, dtype=np.float64)
    of_a = _int_freqs(obs["freq"])
    cdef const int64_t[::1] ofreq = of_a
    cdef const double[::1] const_ = obs["const"]
    cdef const double[:, ::1] ocos = obs["cos"]
    cdef const double[:, ::1] osin = obs["sin"]
    cdef const int64_t[::1] off = obs["step_offsets"]
    cdef const double[::1] br = obs["step_breaks"]
    cdef const double[::1] sv = obs["step_vals"]
    cdef ObsView ov = _obs_view(const_, ofreq, ocos, osin, off, br, sv)
    cdef Py_ssize_t m = words.shape[0], J = kid.shape[0], d = const_.shape[0]
    cdef Py_ssize_t F = max([0] + list(of_a))
    out_a = np.zeros((m, J, d))
    cdef double[:, :, ::1] out = out_a
    partial_a = np.zeros((m, d))
    cdef double[:, ::1] partial = partial_a
    sn_a = np.zeros((m, F + 1))
    cs_a = np.zeros((m, F + 1))
    cdef double[:, ::1] sn = sn_a
    cdef double[:, ::1] cs = cs_a
    cdef Py_ssize_t kmax = kid[J - 1] if J > 0 else 0
    cdef Py_ssize_t i, k, c, ptr, j
    cdef double x, fx
    if words.shape[0] > 0 and words.shape[1] < kmax // 64 + 2:
        raise ValueError("not enough binary digits for the requested horizon")
    for i in prange(m, nogil=True, num_threads=num_threads, schedule="static"):
        ptr = 0
        for k in range(kmax + 1):
            x = _bits_at(&words[i, 0], k)
            if F > 0:
                _harmonics(x, F, &sn[i, 0], &cs[i, 0])
            for c in range(d):
                fx = _obs_component(c, x, &sn[i, 0], &cs[i, 0], &ov)
                j = ptr
                while j < J and kid[j] == k:
                    out[i, j, c] = partial[i, c] + fr[j] * fx
                    j = j + 1
                partial[i, c] += fx
            while ptr < J and kid[ptr] == k:
                ptr = ptr + 1
            if k == kmax:
                break
    return out_a
