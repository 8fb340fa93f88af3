# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Euler-Maruyama kernels with an in-loop counter-based RNG."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, cos, sin, fabs, isfinite, NAN, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef extern from "philox.h" nogil:
    void nl_philox4x64(uint64_t c0, uint64_t c1, uint64_t c2, uint64_t c3,
                       uint64_t k0, uint64_t k1, uint64_t out[4])
    void nl_normal_pair(uint64_t seed, uint64_t traj, uint64_t step, uint64_t domain,
                        double *z0, double *z1)


def philox_block(seed, traj, step, domain):
    traj_a = np.asarray(traj, dtype=np.uint64)
    step_a = np.asarray(step, dtype=np.uint64)
    traj_b, step_b = np.broadcast_arrays(traj_a, step_a)
    shape = traj_b.shape
    cdef const uint64_t[::1] t = np.ascontiguousarray(traj_b).ravel()
    cdef const uint64_t[::1] s = np.ascontiguousarray(step_b).ravel()
    cdef Py_ssize_t n = t.shape[0], i
    out = np.empty((n, 4), dtype=np.uint64)
    cdef uint64_t[:, ::1] o = out
    cdef uint64_t k0 = <uint64_t>seed, dom = <uint64_t>domain
    cdef uint64_t buf[4]
    with nogil:
        for i in range(n):
            nl_philox4x64(s[i], dom, 0, 0, k0, t[i], buf)
            o[i, 0] = buf[0]
            o[i, 1] = buf[1]
            o[i, 2] = buf[2]
            o[i, 3] = buf[3]
    return out.reshape(shape + (4,))


def normal_pairs(seed, traj, step, domain):
    traj_a = np.asarray(traj, dtype=np.uint64)
    step_a = np.asarray(step, dtype=np.uint64)
    traj_b, step_b = np.broadcast_arrays(traj_a, step_a)
    shape = traj_b.shape
    cdef const uint64_t[::1] t = np.ascontiguousarray(traj_b).ravel()
    cdef const uint64_t[::1] s = np.ascontiguousarray(step_b).ravel()
    cdef Py_ssize_t n = t.shape[0], i
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef uint64_t k0 = <uint64_t>seed, dom = <uint64_t>domain
    with nogil:
        for i in range(n):
            nl_normal_pair(k0, t[i], s[i], dom, &o[i, 0], &o[i, 1])
    return out.reshape(shape + (2,))


def em_linear(x0, params, traj, seed, step0, dts, A, B, c, noise_scale, record, domain=0):
    cdef double[:, ::1] x_in = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef uint64_t[::1] tid = np.ascontiguousarray(traj, dtype=np.uint64)
    cdef double[::1] h = np.ascontiguousarray(dts, dtype=np.float64)
    cdef double[:, :, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, :, ::1] bm = np.ascontiguousarray(B, dtype=np.float64)
    cdef double[:, ::1] cc = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] ns = np.ascontiguousarray(noise_scale, dtype=np.float64)
    cdef int64_t[::1] rec = np.ascontiguousarray(record, dtype=np.int64)
    cdef Py_ssize_t n = x_in.shape[0], d = x_in.shape[1], k = p.shape[1]
    cdef Py_ssize_t K = h.shape[0], R = rec.shape[0]
    cdef Py_ssize_t i, j, q, l, r
    cdef uint64_t key = <uint64_t>seed, dom = <uint64_t>domain
    cdef int64_t s0 = step0
    cdef double z[2]
    cdef double zp[2]
    cdef double xv[2]
    cdef double xn[2]
    cdef double drift, sq
    cdef int64_t m, cached
    cdef bint ok

    paths_a = np.full((n, R, d), np.nan)
    final_a = np.empty((n, d))
    fail_a = np.full(n, -1, dtype=np.int64)
    cdef double[:, :, ::1] paths = paths_a
    cdef double[:, ::1] final = final_a
    cdef int64_t[::1] fail = fail_a

    with nogil:
        for i in range(n):
            for q in range(d):
                xv[q] = x_in[i, q]
            r = 0
            while r < R and rec[r] == 0:
                for q in range(d):
                    paths[i, r, q] = xv[q]
                r += 1
            ok = True
            cached = -1
            for j in range(K):
                sq = sqrt(h[j])
                for q in range(d):
                    m = (s0 + j) * d + q
                    if m // 2 != cached:
                        cached = m // 2
                        nl_normal_pair(key, tid[i], <uint64_t>cached, dom, &zp[0], &zp[1])
                    z[q] = zp[m % 2]
                for q in range(d):
                    drift = cc[j, q]
                    for l in range(d):
                        drift = drift + a[j, q, l] * xv[l]
                    for l in range(k):
                        drift = drift + bm[j, q, l] * p[i, l]
                    xn[q] = xv[q] + drift * h[j] + ns[q] * sq * z[q]
                for q in range(d):
                    xv[q] = xn[q]
                    if not isfinite(xv[q]):
                        ok = False
                if not ok:
                    fail[i] = s0 + j
                    for q in range(d):
                        xv[q] = NAN
                    break
                while r < R and rec[r] == j + 1:
                    for q in range(d):
                        paths[i, r, q] = xv[q]
                    r += 1
            for q in range(d):
                final[i, q] = xv[q]
    return paths_a, final_a, fail_a


def em_mixture(x0, traj, seed, step0, dts, q_re, q_im, l_re, l_im, c_re, c_im,
               log_floor, mask, kappa, noise_scale, b_max, record, domain=0):
    cdef double[:, ::1] x_in = np.ascontiguousarray(x0, dtype=np.float64)
    cdef uint64_t[::1] tid = np.ascontiguousarray(traj, dtype=np.uint64)
    cdef double[::1] h = np.ascontiguousarray(dts, dtype=np.float64)
    cdef double[:, :, :, ::1] qr = np.ascontiguousarray(q_re, dtype=np.float64)
    cdef double[:, :, :, ::1] qi = np.ascontiguousarray(q_im, dtype=np.float64)
    cdef double[:, :, ::1] lr = np.ascontiguousarray(l_re, dtype=np.float64)
    cdef double[:, :, ::1] li = np.ascontiguousarray(l_im, dtype=np.float64)
    cdef double[:, ::1] cr = np.ascontiguousarray(c_re, dtype=np.float64)
    cdef double[:, ::1] ci = np.ascontiguousarray(c_im, dtype=np.float64)
    cdef double[::1] floor_ = np.ascontiguousarray(log_floor, dtype=np.float64)
    cdef unsigned char[:, ::1] act = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef double[::1] kap = np.ascontiguousarray(kappa, dtype=np.float64)
    cdef double[::1] ns = np.ascontiguousarray(noise_scale, dtype=np.float64)
    cdef int64_t[::1] rec = np.ascontiguousarray(record, dtype=np.int64)
    cdef Py_ssize_t n = x_in.shape[0], d = x_in.shape[1], J = qr.shape[1]
    cdef Py_ssize_t K = h.shape[0], R = rec.shape[0]
    cdef Py_ssize_t i, j, b, q, l, r
    cdef uint64_t key = <uint64_t>seed, dom = <uint64_t>domain
    cdef int64_t s0 = step0
    cdef double bmax = b_max
    cdef double z[2]
    cdef double zp[2]
    cdef int64_t m, cached
    cdef double xv[2]
    cdef double gr[2]
    cdef double gi[2]
    cdef double nr[2]
    cdef double ni[2]
    cdef double lre[8]
    cdef double lim[8]
    cdef double top, wr, wi, dr, di, mag, sq, re, im, den2, bq, log_rho
    cdef bint ok, hit, node

    if J > 8:
        raise ValueError("at most 8 branches supported by the compiled kernel")

    paths_a = np.full((n, R, d), np.nan)
    final_a = np.empty((n, d))
    fail_a = np.full(n, -1, dtype=np.int64)
    clamped_a = np.zeros(n, dtype=np.int64)
    cdef double[:, :, ::1] paths = paths_a
    cdef double[:, ::1] final = final_a
    cdef int64_t[::1] fail = fail_a
    cdef int64_t[::1] clamped = clamped_a

    with nogil:
        for i in range(n):
            for q in range(d):
                xv[q] = x_in[i, q]
            r = 0
            while r < R and rec[r] == 0:
                for q in range(d):
                    paths[i, r, q] = xv[q]
                r += 1
            ok = True
            cached = -1
            for j in range(K):
                top = -INFINITY
                for b in range(J):
                    if not act[i, b]:
                        continue
                    re = cr[j, b]
                    im = ci[j, b]
                    for q in range(d):
                        re = re + lr[j, b, q] * xv[q]
                        im = im + li[j, b, q] * xv[q]
                        for l in range(d):
                            re = re + xv[q] * qr[j, b, q, l] * xv[l]
                            im = im + xv[q] * qi[j, b, q, l] * xv[l]
                    lre[b] = re
                    lim[b] = im
                    if re > top:
                        top = re
                dr = 0.0
                di = 0.0
                for q in range(d):
                    nr[q] = 0.0
                    ni[q] = 0.0
                for b in range(J):
                    if not act[i, b]:
                        continue
                    mag = exp(lre[b] - top)
                    wr = mag * cos(lim[b])
                    wi = mag * sin(lim[b])
                    dr = dr + wr
                    di = di + wi
                    for q in range(d):
                        gr[q] = lr[j, b, q]
                        gi[q] = li[j, b, q]
                        for l in range(d):
                            gr[q] = gr[q] + 2.0 * qr[j, b, q, l] * xv[l]
                            gi[q] = gi[q] + 2.0 * qi[j, b, q, l] * xv[l]
                        nr[q] = nr[q] + wr * gr[q] - wi * gi[q]
                        ni[q] = ni[q] + wr * gi[q] + wi * gr[q]
                den2 = dr * dr + di * di
                log_rho = 2.0 * top + log(den2)
                node = not (log_rho >= floor_[j])
                hit = node
                for q in range(d):
                    m = (s0 + j) * d + q
                    if m // 2 != cached:
                        cached = m // 2
                        nl_normal_pair(key, tid[i], <uint64_t>cached, dom, &zp[0], &zp[1])
                    z[q] = zp[m % 2]
                sq = sqrt(h[j])
                for q in range(d):
                    # (nr + i ni) / (dr + i di)
                    re = (nr[q] * dr + ni[q] * di) / den2
                    im = (ni[q] * dr - nr[q] * di) / den2
                    bq = kap[q] * (re + im)
                    if not isfinite(bq):
                        hit = True
                        bq = 0.0 if node else bq
                    if bq > bmax:
                        bq = bmax
                        hit = True
                    elif bq < -bmax:
                        bq = -bmax
                        hit = True
                    xv[q] = xv[q] + bq * h[j] + ns[q] * sq * z[q]
                    if not isfinite(xv[q]):
                        ok = False
                if hit:
                    clamped[i] += 1
                if not ok:
                    fail[i] = s0 + j
                    for q in range(d):
                        xv[q] = NAN
                    break
                while r < R and rec[r] == j + 1:
                    for q in range(d):
                        paths[i, r, q] = xv[q]
                    r += 1
            for q in range(d):
                final[i, q] = xv[q]
    return paths_a, final_a, fail_a, clamped_a
