# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled network kernels; same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double VM_FLOOR = 1e-12

CONVERGED = 0
MAX_ITER = 1
SINGULAR = 2


cdef int zlu(double complex* A, Py_ssize_t n, Py_ssize_t* piv) nogil:
    """In-place LU with partial pivoting; returns 1 if singular."""
    cdef Py_ssize_t i, j, k, p
    cdef double best, a
    cdef double complex t, f
    for k in range(n):
        p = k
        best = abs(A[k * n + k])
        for i in range(k + 1, n):
            a = abs(A[i * n + k])
            if a > best:
                best = a
                p = i
        piv[k] = p
        if best == 0.0 or not isfinite(best):
            return 1
        if p != k:
            for j in range(n):
                t = A[k * n + j]
                A[k * n + j] = A[p * n + j]
                A[p * n + j] = t
        for i in range(k + 1, n):
            f = A[i * n + k] / A[k * n + k]
            A[i * n + k] = f
            for j in range(k + 1, n):
                A[i * n + j] -= f * A[k * n + j]
    return 0


cdef void zlu_solve(double complex* LU, Py_ssize_t n, Py_ssize_t* piv, double complex* x) nogil:
    cdef Py_ssize_t i, j
    cdef double complex t
    for i in range(n):
        if piv[i] != i:
            t = x[i]
            x[i] = x[piv[i]]
            x[piv[i]] = t
    for i in range(n):
        for j in range(i):
            x[i] -= LU[i * n + j] * x[j]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            x[i] -= LU[i * n + j] * x[j]
        x[i] /= LU[i * n + i]


cdef int dsolve(double* A, Py_ssize_t n, double* x, Py_ssize_t* piv) nogil:
    """Solve A x = b in place (b passed in x); returns 1 if singular."""
    cdef Py_ssize_t i, j, k, p
    cdef double best, a, t, f
    for k in range(n):
        p = k
        best = fabs(A[k * n + k])
        for i in range(k + 1, n):
            a = fabs(A[i * n + k])
            if a > best:
                best = a
                p = i
        if best == 0.0 or not isfinite(best):
            return 1
        if p != k:
            for j in range(n):
                t = A[k * n + j]
                A[k * n + j] = A[p * n + j]
                A[p * n + j] = t
            t = x[k]
            x[k] = x[p]
            x[p] = t
        for i in range(k + 1, n):
            f = A[i * n + k] / A[k * n + k]
            for j in range(k + 1, n):
                A[i * n + j] -= f * A[k * n + j]
            x[i] -= f * x[k]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            x[i] -= A[i * n + j] * x[j]
        x[i] /= A[i * n + i]
    return 0


cdef int _eval(const double complex[:, ::1] Yr, const double complex[::1] rhs,
               const double* y, const double[:, ::1] coef, bint jac,
               double complex* A, double complex* Ai, Py_ssize_t* piv,
               double complex* V, double* res, double* J) nogil:
    cdef Py_ssize_t m = Yr.shape[0]
    cdef Py_ssize_t i, j, r, c
    cdef double w, vm, fac, dwg, dwb
    cdef double complex d
    for i in range(m):
        for j in range(m):
            A[i * m + j] = Yr[i, j]
        A[i * m + i] += y[i] - 1j * y[m + i]
    if zlu(A, m, piv):
        return 1
    for i in range(m):
        V[i] = rhs[i]
    zlu_solve(A, m, piv, V)
    for i in range(m):
        w = V[i].real * V[i].real + V[i].imag * V[i].imag
        vm = sqrt(w) if w > VM_FLOOR * VM_FLOOR else VM_FLOOR
        res[i] = y[i] * w - (coef[i, 0] * w + coef[i, 1] * vm + coef[i, 2])
        res[m + i] = y[m + i] * w - (coef[m + i, 0] * w + coef[m + i, 1] * vm + coef[m + i, 2])
    if not jac:
        return 0
    # columns of the inverse, stored row-major in Ai
    for j in range(m):
        for i in range(m):
            Ai[i * m + j] = 0.0
    for j in range(m):
        for i in range(m):
            Ai[m * m + i] = 1.0 if i == j else 0.0
        zlu_solve(A, m, piv, &Ai[m * m])
        for i in range(m):
            Ai[i * m + j] = Ai[m * m + i]
    for i in range(m):
        w = V[i].real * V[i].real + V[i].imag * V[i].imag
        vm = sqrt(w) if w > VM_FLOOR * VM_FLOOR else VM_FLOOR
        for j in range(m):
            d = -Ai[i * m + j] * V[j]
            # dw_i/dg_j = 2 Re(conj(V_i) d),  dw_i/db_j = 2 Re(conj(V_i) (-1j) d)
            dwg = 2.0 * (V[i].real * d.real + V[i].imag * d.imag)
            dwb = 2.0 * (V[i].real * d.imag - V[i].imag * d.real)
            for r in range(2):
                c = r * m + i
                fac = (y[c] - coef[c, 0]) - coef[c, 1] / (2.0 * vm)
                J[c * 2 * m + j] = fac * dwg
                J[c * 2 * m + m + j] = fac * dwb
        J[i * 2 * m + i] += w
        J[(m + i) * 2 * m + m + i] += w
    return 0


def network_eval(Yr, rhs, y, coef, jac=True):
    cdef const double complex[:, ::1] Yv = np.ascontiguousarray(Yr, dtype=np.complex128)
    cdef const double complex[::1] rv = np.ascontiguousarray(rhs, dtype=np.complex128)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(coef, dtype=np.float64)
    cdef Py_ssize_t m = Yv.shape[0]
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] V = np.empty(m, dtype=np.complex128)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] res = np.empty(2 * m, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] J = np.empty((2 * m, 2 * m), dtype=np.float64)
    cdef double complex* A = <double complex*> malloc(m * m * sizeof(double complex))
    cdef double complex* Ai = <double complex*> malloc((m * m + m) * sizeof(double complex))
    cdef Py_ssize_t* piv = <Py_ssize_t*> malloc(m * sizeof(Py_ssize_t))
    cdef int bad
    try:
        bad = _eval(Yv, rv, &yv[0], cv, jac, A, Ai, piv,
                    <double complex*> V.data, <double*> res.data, <double*> J.data)
    finally:
        free(A)
        free(Ai)
        free(piv)
    if bad:
        raise np.linalg.LinAlgError("singular loaded admittance matrix")
    return V, res, (J if jac else None)


cdef double _maxabs_rows(const double* res, const Py_ssize_t[::1] rows) nogil:
    cdef double out = 0.0, a
    cdef Py_ssize_t i
    for i in range(rows.shape[0]):
        a = fabs(res[rows[i]])
        if not isfinite(a):
            return a
        if a > out:
            out = a
    return out


cdef void _apply(const double[::1] y0, const double[:, ::1] L, const double* x, double* y) nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = L.shape[0], nx = L.shape[1]
    for i in range(n):
        y[i] = y0[i]
        for j in range(nx):
            if L[i, j] != 0.0:
                y[i] += L[i, j] * x[j]


def newton_solve(Yr, rhs, y0, L, rows, coef, x0, double tol=1e-8, int max_iter=50, int max_halvings=8):
    cdef const double complex[:, ::1] Yv = np.ascontiguousarray(Yr, dtype=np.complex128)
    cdef const double complex[::1] rv = np.ascontiguousarray(rhs, dtype=np.complex128)
    cdef const double[::1] y0v = np.ascontiguousarray(y0, dtype=np.float64)
    cdef const double[:, ::1] Lv = np.ascontiguousarray(np.asarray(L, dtype=np.float64).reshape(len(y0), len(x0)))
    cdef const Py_ssize_t[::1] rw = np.ascontiguousarray(rows, dtype=np.intp)
    cdef const double[:, ::1] cv = np.ascontiguousarray(coef, dtype=np.float64)
    cdef Py_ssize_t m = Yv.shape[0]
    cdef Py_ssize_t n2 = 2 * m
    cdef Py_ssize_t nx = Lv.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xarr = np.array(x0, dtype=np.float64).reshape(nx)
    cdef double* x = <double*> xarr.data
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] Varr = np.empty(m, dtype=np.complex128)
    cdef double complex* Vout = <double complex*> Varr.data

    cdef double complex* A = <double complex*> malloc(m * m * sizeof(double complex))
    cdef double complex* Ai = <double complex*> malloc((m * m + m) * sizeof(double complex))
    cdef Py_ssize_t* piv = <Py_ssize_t*> malloc((m + nx + 1) * sizeof(Py_ssize_t))
    cdef double complex* V = <double complex*> malloc(m * sizeof(double complex))
    cdef double complex* Vt = <double complex*> malloc(m * sizeof(double complex))
    cdef double* y = <double*> malloc(n2 * sizeof(double))
    cdef double* res = <double*> malloc(n2 * sizeof(double))
    cdef double* rest = <double*> malloc(n2 * sizeof(double))
    cdef double* J = <double*> malloc(n2 * n2 * sizeof(double))
    cdef double* Jt = <double*> malloc(n2 * n2 * sizeof(double))
    cdef double* Jx = <double*> malloc((nx * nx + 1) * sizeof(double))
    cdef double* dx = <double*> malloc((nx + 1) * sizeof(double))
    cdef double* xt = <double*> malloc((nx + 1) * sizeof(double))
    cdef double* xbest = <double*> malloc((nx + 1) * sizeof(double))

    cdef int status = 0, it = 0, h, bad
    cdef double rn, rnt, lam, best
    cdef Py_ssize_t i, j, k, r
    cdef bint have
    try:
        with nogil:
            _apply(y0v, Lv, x, y)
            if _eval(Yv, rv, y, cv, True, A, Ai, piv, V, res, J):
                status = 2
                rn = 1e300
            else:
                rn = _maxabs_rows(res, rw) if nx > 0 else 0.0
            while status == 0 and not rn <= tol:
                if not isfinite(rn):
                    status = 2
                    break
                if it >= max_iter:
                    status = 1
                    break
                # Jx = J[rows] @ L
                for i in range(nx):
                    r = rw[i]
                    for j in range(nx):
                        Jx[i * nx + j] = 0.0
                    for k in range(n2):
                        if J[r * n2 + k] != 0.0:
                            for j in range(nx):
                                Jx[i * nx + j] += J[r * n2 + k] * Lv[k, j]
                    dx[i] = -res[r]
                if dsolve(Jx, nx, dx, piv):
                    status = 2
                    break
                bad = 0
                for i in range(nx):
                    if not isfinite(dx[i]):
                        bad = 1
                if bad:
                    status = 2
                    break
                lam = 1.0
                have = False
                best = 0.0
                for h in range(max_halvings + 1):
                    for i in range(nx):
                        xt[i] = x[i] + lam * dx[i]
                    _apply(y0v, Lv, xt, y)
                    if _eval(Yv, rv, y, cv, True, A, Ai, piv, Vt, rest, Jt):
                        lam *= 0.5
                        continue
                    rnt = _maxabs_rows(rest, rw)
                    if (not have) or rnt < best:
                        have = True
                        best = rnt
                        for i in range(nx):
                            xbest[i] = xt[i]
                        for i in range(m):
                            V[i] = Vt[i]
                        for i in range(n2):
                            res[i] = rest[i]
                        for i in range(n2 * n2):
                            J[i] = Jt[i]
                    if rnt < rn:
                        break
                    lam *= 0.5
                it += 1
                if not have:
                    status = 2
                    break
                for i in range(nx):
                    x[i] = xbest[i]
                rn = best
            for i in range(m):
                Vout[i] = V[i]
    finally:
        free(A); free(Ai); free(piv); free(V); free(Vt); free(y); free(res); free(rest)
        free(J); free(Jt); free(Jx); free(dx); free(xt); free(xbest)
    if status == 2 and it == 0 and rn == 1e300:
        return xarr, None, 2, 0, np.inf
    return xarr, Varr, status, it, rn
