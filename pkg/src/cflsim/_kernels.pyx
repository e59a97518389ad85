# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels. Same signatures and codes as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, pow, sqrt, tanh, isfinite

cnp.import_array()

cdef double P_MIN = 1e-12
cdef double P_MAX = 1.0 - 1e-12


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double ez
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    ez = exp(z)
    return ez / (1.0 + ez)


cdef inline double _clamp(double p) noexcept nogil:
    if p < P_MIN:
        return P_MIN
    if p > P_MAX:
        return P_MAX
    return p


cdef inline double _loss_dz(double z, double y, int loss_kind, double alpha,
                            double gamma, double* dz) noexcept nogil:
    cdef double pt, qt, sign, logpt, at, mod
    if y > 0.5:
        sign = 1.0
        at = alpha
    else:
        sign = -1.0
        at = 1.0 - alpha
    pt = _clamp(_sigmoid(sign * z))
    qt = _clamp(_sigmoid(-sign * z))
    logpt = log(pt)
    if loss_kind == 0:
        dz[0] = sign * -qt
        return -logpt
    mod = pow(qt, gamma)
    dz[0] = sign * at * mod * (gamma * pt * logpt - qt)
    return -at * mod * logpt


cdef double _batch_loss_grad(
    int arch, int act, int hidden, int loss_kind, double alpha, double gamma,
    const double* w, const double[:, ::1] X, const double[::1] y,
    const long long* idx, int nb, const double* noise, int nparams,
    double* grad, double* xbuf, double* abuf, double* hbuf,
) noexcept nogil:
    """Mean loss over rows ``idx[0:nb]``; writes the mean gradient to ``grad``."""
    cdef int d = X.shape[1]
    cdef int i, j, k
    cdef long long r
    cdef double z, dz, total = 0.0, inv_n = 1.0 / nb, da
    cdef int off_b1 = d * hidden
    cdef int off_w2 = d * hidden + hidden
    cdef int off_b2 = d * hidden + 2 * hidden

    for k in range(nparams):
        grad[k] = 0.0

    for i in range(nb):
        r = idx[i]
        for j in range(d):
            xbuf[j] = X[r, j]
            if noise != NULL:
                xbuf[j] += noise[i * d + j]
        if arch == 0:
            z = w[d]
            for j in range(d):
                z += xbuf[j] * w[j]
        else:
            for k in range(hidden):
                abuf[k] = w[off_b1 + k]
            for j in range(d):
                for k in range(hidden):
                    abuf[k] += xbuf[j] * w[j * hidden + k]
            z = w[off_b2]
            for k in range(hidden):
                if act == 0:
                    hbuf[k] = abuf[k] if abuf[k] > 0.0 else 0.0
                else:
                    hbuf[k] = tanh(abuf[k])
                z += hbuf[k] * w[off_w2 + k]
        total += _loss_dz(z, y[r], loss_kind, alpha, gamma, &dz)
        dz = dz * inv_n
        if arch == 0:
            for j in range(d):
                grad[j] += xbuf[j] * dz
            grad[d] += dz
        else:
            grad[off_b2] += dz
            for k in range(hidden):
                grad[off_w2 + k] += hbuf[k] * dz
                if act == 0:
                    da = dz * w[off_w2 + k] if abuf[k] > 0.0 else 0.0
                else:
                    da = dz * w[off_w2 + k] * (1.0 - hbuf[k] * hbuf[k])
                abuf[k] = da
                grad[off_b1 + k] += da
            for j in range(d):
                for k in range(hidden):
                    grad[j * hidden + k] += xbuf[j] * abuf[k]
    return total * inv_n


def _param_count(int arch, int d, int hidden):
    if arch == 0:
        return d + 1
    return d * hidden + 2 * hidden + 1


def loss_grad(int arch, int act, int hidden, int loss_kind, double alpha, double gamma,
              params, X, y):
    cdef const double[::1] w = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef int n = Xv.shape[0], d = Xv.shape[1]
    cdef int nparams = w.shape[0]
    if nparams != _param_count(arch, d, hidden):
        raise ValueError("parameter length does not match architecture")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.arange(n, dtype=np.int64)
    grad = np.zeros(nparams, dtype=np.float64)
    cdef double[::1] gv = grad
    cdef double[::1] xbuf = np.empty(d, dtype=np.float64)
    cdef double[::1] abuf = np.empty(max(hidden, 1), dtype=np.float64)
    cdef double[::1] hbuf = np.empty(max(hidden, 1), dtype=np.float64)
    cdef double loss
    with nogil:
        loss = _batch_loss_grad(arch, act, hidden, loss_kind, alpha, gamma, &w[0], Xv, yv,
                                <const long long*> &idx[0], n, NULL, nparams,
                                &gv[0], &xbuf[0], &abuf[0], &hbuf[0])
    return loss, grad


def train_local(int arch, int act, int hidden, int loss_kind, double alpha, double gamma,
                int opt_kind, double lr, double beta1, double beta2, double eps,
                params, X, y, order, int batch_size, noise):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] wout = np.array(params, dtype=np.float64, copy=True)
    cdef double[::1] w = wout
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const long long[:, ::1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef int epochs = ordv.shape[0], n = ordv.shape[1], d = Xv.shape[1]
    cdef int nparams = w.shape[0]
    if nparams != _param_count(arch, d, hidden):
        raise ValueError("parameter length does not match architecture")
    cdef int steps_per_epoch = (n + batch_size - 1) // batch_size
    losses = np.zeros(epochs * steps_per_epoch, dtype=np.float64)
    cdef double[::1] lv = losses
    cdef const double[:, :, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    grad = np.zeros(nparams, dtype=np.float64)
    m = np.zeros(nparams, dtype=np.float64)
    v = np.zeros(nparams, dtype=np.float64)
    cdef double[::1] gv = grad
    cdef double[::1] mv = m
    cdef double[::1] vv = v
    cdef double[::1] xbuf = np.empty(d, dtype=np.float64)
    cdef double[::1] abuf = np.empty(max(hidden, 1), dtype=np.float64)
    cdef double[::1] hbuf = np.empty(max(hidden, 1), dtype=np.float64)
    cdef int e, start, nb, k, step = 0, bad = -1
    cdef double loss, c1, c2, b1t = 1.0, b2t = 1.0
    cdef const double* noise_ptr
    cdef bint ok

    with nogil:
        for e in range(epochs):
            if bad >= 0:
                break
            start = 0
            while start < n:
                nb = batch_size if start + batch_size <= n else n - start
                noise_ptr = NULL
                if has_noise:
                    noise_ptr = &nz[e, start, 0]
                loss = _batch_loss_grad(arch, act, hidden, loss_kind, alpha, gamma, &w[0], Xv, yv,
                                        &ordv[e, start], nb, noise_ptr, nparams,
                                        &gv[0], &xbuf[0], &abuf[0], &hbuf[0])
                ok = isfinite(loss)
                for k in range(nparams):
                    if not isfinite(gv[k]):
                        ok = False
                if not ok:
                    bad = step
                    break
                lv[step] = loss
                step += 1
                if opt_kind == 0:
                    for k in range(nparams):
                        w[k] -= lr * gv[k]
                else:
                    b1t *= beta1
                    b2t *= beta2
                    c1 = 1.0 - b1t
                    c2 = 1.0 - b2t
                    for k in range(nparams):
                        mv[k] = beta1 * mv[k] + (1.0 - beta1) * gv[k]
                        vv[k] = beta2 * vv[k] + (1.0 - beta2) * gv[k] * gv[k]
                        w[k] -= lr * (mv[k] / c1) / (sqrt(vv[k] / c2) + eps)
                for k in range(nparams):
                    if not isfinite(w[k]):
                        ok = False
                if not ok:
                    bad = step - 1
                    break
                start += batch_size
    if bad >= 0:
        return wout, losses[:bad], bad
    return wout, losses, -1
