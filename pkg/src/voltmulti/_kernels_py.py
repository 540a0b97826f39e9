"""Pure-numpy network kernels (fallback for the compiled ``_kernels`` module).

Both implementations share one calling convention.  ``m`` is the number of
non-slack buses and the admittance vector ``y`` stacks ``[g_1..g_m, b_1..b_m]``.
Residual row ``k`` is the active-power mismatch of bus ``k`` and row ``m + k``
the reactive one::

    r_k     = g_k w_k - (cP2_k w_k + cP1_k |V_k| + cP0_k),   w = |V|^2

``coef`` has shape ``(2m, 3)`` holding ``(c2, c1, c0)`` per row.
"""
import numpy as np

VM_FLOOR = 1e-12

CONVERGED = 0
MAX_ITER = 1
SINGULAR = 2


def network_eval(Yr, rhs, y, coef, jac=True):
    """Voltages, residuals and (optionally) d residual / d y for admittances ``y``.

    Raises ``numpy.linalg.LinAlgError`` if the loaded matrix is singular.
    """
    m = Yr.shape[0]
    g = y[:m]
    b = y[m:]
    A = Yr + np.diag(g - 1j * b)
    if not jac:
        V = np.linalg.solve(A, rhs)
        w = (V * V.conj()).real
        vm = np.sqrt(np.maximum(w, VM_FLOOR * VM_FLOOR))
        res = y * np.concatenate((w, w)) - (coef[:, 0] * np.tile(w, 2) + coef[:, 1] * np.tile(vm, 2) + coef[:, 2])
        return V, res, None
    Ai = np.linalg.inv(A)
    V = Ai @ rhs
    w = (V * V.conj()).real
    vm = np.sqrt(np.maximum(w, VM_FLOOR * VM_FLOOR))
    w2 = np.tile(w, 2)
    vm2 = np.tile(vm, 2)
    res = y * w2 - (coef[:, 0] * w2 + coef[:, 1] * vm2 + coef[:, 2])

    # dV_i/dg_j = -Ai_ij V_j ;  dV_i/db_j = 1j Ai_ij V_j
    dVg = -Ai * V[None, :]
    cV = V.conj()[:, None]
    dwg = 2.0 * (cV * dVg).real
    dwb = 2.0 * (cV * (-1j) * dVg).real
    dw = np.hstack((dwg, dwb))
    dw2 = np.vstack((dw, dw))
    # d residual = diag(w) for own component + (y - c2) dw - c1 dvm
    fac = (y - coef[:, 0])[:, None] - (coef[:, 1] / (2.0 * vm2))[:, None]
    J = fac * dw2
    J[np.arange(2 * m), np.arange(2 * m)] += w2
    return V, res, J


def newton_solve(Yr, rhs, y0, L, rows, coef, x0, tol=1e-8, max_iter=50, max_halvings=8):
    """Damped Newton on the unknown vector ``x`` with ``y = y0 + L @ x``.

    Only residual rows listed in ``rows`` enter the system (square: one per
    unknown).  Returns ``(x, V, status, iterations, residual_max)``.
    """
    x = np.array(x0, dtype=float)
    nx = x.size
    try:
        V, res, J = network_eval(Yr, rhs, y0 + L @ x, coef)
    except np.linalg.LinAlgError:
        return x, None, SINGULAR, 0, np.inf
    r = res[rows]
    rn = np.max(np.abs(r)) if nx else 0.0
    it = 0
    while not rn <= tol:
        if not np.isfinite(rn):
            return x, V, SINGULAR, it, rn
        if it >= max_iter:
            return x, V, MAX_ITER, it, rn
        Jx = J[rows] @ L
        try:
            dx = np.linalg.solve(Jx, -r)
        except np.linalg.LinAlgError:
            return x, V, SINGULAR, it, rn
        if not np.all(np.isfinite(dx)):
            return x, V, SINGULAR, it, rn
        lam = 1.0
        accepted = None
        for _ in range(max_halvings + 1):
            xt = x + lam * dx
            try:
                Vt, rest, Jt = network_eval(Yr, rhs, y0 + L @ xt, coef)
            except np.linalg.LinAlgError:
                lam *= 0.5
                continue
            rt = rest[rows]
            rnt = np.max(np.abs(rt))
            if accepted is None or rnt < accepted[4]:
                accepted = (xt, Vt, rest, Jt, rnt)
            if rnt < rn:
                break
            lam *= 0.5
        it += 1
        if accepted is None:
            return x, V, SINGULAR, it, rn
        x, V, res, J, rn = accepted
        r = res[rows]
    return x, V, CONVERGED, it, rn
