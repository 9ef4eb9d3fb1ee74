"""Hot numeric kernels, written once in the numpy subset numba can compile.

Every public function here is defined as plain numpy and then, depending on
the selected backend (see :mod:`otagg.backend`), rebound to a ``@njit``-compiled
version of itself. Callers must access kernels as module attributes
(``kernels.sinkhorn_scale(...)``) so that :func:`set_backend` can swap the
live binding; ``from otagg.kernels import sinkhorn_scale`` would pin one
implementation.

Layout convention inside kernels: points are ROWS. An input set is an
``(N, d)`` array, a reference set ``(J, d)``, a transport plan ``(N, J)``,
and an aggregated embedding ``(J, d)``. The public modules use the
column-per-point ``(d, N)`` orientation and transpose at the boundary.

Constraints on kernel bodies (the price of single-source):
 - no axis arguments to min/max (numba lacks them); loops instead
 - broadcasting through explicit reshape, no ``None`` indexing
 - no default arguments, no keyword calls between kernels
"""

from __future__ import annotations

import numpy as np

from .backend import compile_kernel, resolve_backend

# ---------------------------------------------------------------------------
# geometry


def squared_distances(X, Z):
    """Pairwise squared Euclidean distances, (N,d) x (J,d) -> (N,J).

    Direct difference form: immune to the cancellation the expanded
    x^2 - 2xz + z^2 form suffers for near-coincident points.
    """
    n, d = X.shape
    J = Z.shape[0]
    diff = X.reshape(n, 1, d) - Z.reshape(1, J, d)
    return (diff * diff).sum(axis=2)


# ---------------------------------------------------------------------------
# Sinkhorn, plain scaling


def sinkhorn_scale(K, a, b, max_iter, tol, floor):
    """Alternating diagonal scaling of K to marginals (a, b).

    Updates v <- b / (K^T u), u <- a / (K v) from u = 1/N, v = 1/J, stopping
    at max_iter or when the max-norm marginal residual of the implied plan
    drops below tol. Any denominator entry below ``floor`` aborts.

    Returns (u, v, iterations_used, residual, bad_iteration); bad_iteration
    is -1 when no underflow occurred, else the 1-based iteration at which a
    division would have underflowed (u, v are then unusable).
    """
    n = K.shape[0]
    m = K.shape[1]
    u = np.full(n, 1.0 / n)
    v = np.full(m, 1.0 / m)
    resid = np.inf
    it = 0
    bad = -1
    while it < max_iter:
        s = K.T @ u
        if s.min() < floor:
            bad = it + 1
            break
        v = b / s
        t = K @ v
        if t.min() < floor:
            bad = it + 1
            break
        u = a / t
        it += 1
        row_err = np.abs(u * t - a).max()
        col_err = np.abs(v * (K.T @ u) - b).max()
        resid = max(row_err, col_err)
        if resid < tol:
            break
    return u, v, it, resid, bad


def plan_from_uv(K, u, v):
    """Transport plan diag(u) K diag(v)."""
    return u.reshape(-1, 1) * K * v.reshape(1, -1)


# ---------------------------------------------------------------------------
# Sinkhorn, log domain


def lse_rows_plus(M, g):
    """out_i = logsumexp_j(M[i, j] + g[j])."""
    n = M.shape[0]
    out = np.empty(n)
    for i in range(n):
        row = M[i] + g
        mx = row.max()
        if mx == -np.inf:
            out[i] = -np.inf
        else:
            out[i] = mx + np.log(np.exp(row - mx).sum())
    return out


def lse_cols_plus(M, f):
    """out_j = logsumexp_i(M[i, j] + f[i]); row-sweep form for cache locality."""
    n = M.shape[0]
    m = M.shape[1]
    mx = np.full(m, -np.inf)
    for i in range(n):
        mx = np.maximum(mx, M[i] + f[i])
    s = np.zeros(m)
    for i in range(n):
        s += np.exp(M[i] + f[i] - mx)
    out = np.empty(m)
    for j in range(m):
        if mx[j] == -np.inf:
            out[j] = -np.inf
        else:
            out[j] = mx[j] + np.log(s[j])
    return out


def sinkhorn_log(M, a, b, loga, logb, max_iter, tol):
    """Log-domain scaling on M = -C/eps; returns (log u, log v, iters, residual).

    Same iterate order and initialization as sinkhorn_scale, expressed on
    log potentials so that small eps / large costs cannot underflow.
    """
    n = M.shape[0]
    m = M.shape[1]
    f = np.full(n, -np.log(n * 1.0))
    g = np.full(m, -np.log(m * 1.0))
    resid = np.inf
    it = 0
    while it < max_iter:
        g = logb - lse_cols_plus(M, f)
        f = loga - lse_rows_plus(M, g)
        it += 1
        row_err = np.abs(np.exp(f + lse_rows_plus(M, g)) - a).max()
        col_err = np.abs(np.exp(g + lse_cols_plus(M, f)) - b).max()
        resid = max(row_err, col_err)
        if resid < tol:
            break
    return f, g, it, resid


def plan_from_log(M, f, g):
    """Transport plan exp(f_i + M_ij + g_j)."""
    return np.exp(f.reshape(-1, 1) + M + g.reshape(1, -1))


# ---------------------------------------------------------------------------
# Sinkhorn, unrolled with history (training path)


def sinkhorn_unrolled(K, a, b, n_iter):
    """Fixed-depth scaling keeping every iterate for reverse-mode replay.

    Returns (U, V) of shapes (n_iter+1, N) and (n_iter+1, J); row 0 holds
    the uniform initializers, row k the state after iteration k.
    """
    n = K.shape[0]
    m = K.shape[1]
    U = np.empty((n_iter + 1, n))
    V = np.empty((n_iter + 1, m))
    U[0, :] = 1.0 / n
    V[0, :] = 1.0 / m
    for k in range(1, n_iter + 1):
        s = K.T @ U[k - 1]
        V[k, :] = b / s
        t = K @ V[k]
        U[k, :] = a / t
    return U, V


def sinkhorn_unrolled_backward(K, a, b, U, V, gu_last, gv_last, gK, n_iter):
    """Reverse sweep through the unrolled scaling iterations.

    gu_last / gv_last are the upstream gradients on U[n_iter] and V[n_iter];
    gK is the gradient already accumulated on K (from the plan), mutated in
    place. Returns (ga, gK): gradient on the source intensities and the
    completed kernel-matrix gradient. The reference intensities b are treated
    as constants.
    """
    n = K.shape[0]
    ga = np.zeros(n)
    gu = gu_last
    for k in range(n_iter, 0, -1):
        uk = U[k]
        vk = V[k]
        t = a / uk
        s = b / vk
        ga += gu / t
        gt = -(gu / t) * uk
        gK += gt.reshape(-1, 1) * vk.reshape(1, -1)
        gvk = K.T @ gt
        if k == n_iter:
            gvk = gvk + gv_last
        gs = -(gvk * vk) / s
        gK += U[k - 1].reshape(-1, 1) * gs.reshape(1, -1)
        gu = K @ gs
    return ga, gK


def sinkhorn_unrolled_log(M, loga, logb, n_iter):
    """Fixed-depth scaling in log potentials, keeping every iterate.

    The same iterate map as sinkhorn_unrolled (row k holds log u / log v
    after iteration k), evaluated through logsumexp so that rows of
    exp(M) = exp(-C/eps) may underflow without poisoning the pass. Row 0 of
    G is a placeholder; the first update writes G[1].
    """
    n = M.shape[0]
    m = M.shape[1]
    F = np.empty((n_iter + 1, n))
    G = np.empty((n_iter + 1, m))
    F[0, :] = -np.log(n * 1.0)
    G[0, :] = 0.0
    for k in range(1, n_iter + 1):
        G[k, :] = logb - lse_cols_plus(M, F[k - 1])
        F[k, :] = loga - lse_rows_plus(M, G[k])
    return F, G


def sinkhorn_unrolled_log_backward(M, loga, logb, F, G, gf_last, gg_last, gM, n_iter):
    """Reverse sweep through the log-domain iterates.

    gf_last / gg_last are upstream gradients on F[n_iter] and G[n_iter]; gM
    carries the gradient already accumulated on M from the plan. Returns
    (gloga, gM); logb is constant. The softmax matrices of each update are
    rebuilt from the stored potentials: the row normalizer of update k is
    loga - F[k] and the column normalizer logb - G[k], both exact identities
    of the forward recursion.
    """
    n = M.shape[0]
    gloga = np.zeros(n)
    gf = gf_last
    for k in range(n_iter, 0, -1):
        gloga += gf
        S = np.exp(M + G[k].reshape(1, -1) - loga.reshape(-1, 1) + F[k].reshape(-1, 1))
        gM -= gf.reshape(-1, 1) * S
        gg = -(S.T @ gf)
        if k == n_iter:
            gg = gg + gg_last
        T = np.exp(M + F[k - 1].reshape(-1, 1) - logb.reshape(1, -1) + G[k].reshape(1, -1))
        gM -= T * gg.reshape(1, -1)
        gf = -(T @ gg)
    return gloga, gM


# ---------------------------------------------------------------------------
# toy-model forward/backward


def lift_forward(obs, W1, b1, W2, b2):
    """Per-observation lift 1 -> hidden -> d. obs (N,) -> X (N, d)."""
    pre1 = obs.reshape(-1, 1) * W1.reshape(1, -1) + b1.reshape(1, -1)
    h = np.maximum(pre1, 0.0)
    X = h @ W2.T + b2.reshape(1, -1)
    return pre1, h, X


def lift_backward(gX, obs, pre1, h, W2):
    """Gradients of the lift wrt its parameters; returns (gW1, gb1, gW2, gb2)."""
    gW2 = gX.T @ h
    gb2 = gX.sum(axis=0)
    gh = gX @ W2
    gpre1 = np.where(pre1 > 0.0, gh, 0.0)
    gW1 = gpre1.T @ obs
    gb1 = gpre1.sum(axis=0)
    return gW1, gb1, gW2, gb2


def toy_forward_ot(obs, W1, b1, W2, b2, Zt, uatt, use_att, eps, n_iter, Wc, bc):
    """Lift, (optional) attention weights, unrolled transport, classify.

    The fixed-depth scaling runs in log potentials so that observations
    lifted far from every reference point (exp(-C/eps) underflowing to a
    zero row) still produce a finite plan. Returns every intermediate the
    backward pass needs: (logits, pre1, h, X, s_att, a, C, F, G, P, phi)
    with phi laid out (J, d), one row per reference point.
    """
    n = obs.shape[0]
    J = Zt.shape[0]
    pre1, h, X = lift_forward(obs, W1, b1, W2, b2)
    if use_att:
        s_att = X @ uatt
        e = np.exp(s_att - s_att.max())
        a = e / e.sum()
    else:
        s_att = np.zeros(n)
        a = np.full(n, 1.0 / n)
    C = squared_distances(X, Zt)
    M = -C / eps
    loga = np.log(a)
    logb = np.full(J, -np.log(J * 1.0))
    F, G = sinkhorn_unrolled_log(M, loga, logb, n_iter)
    P = np.exp(F[n_iter].reshape(-1, 1) + M + G[n_iter].reshape(1, -1))
    phi = P.T @ X - Zt
    logits = Wc @ phi.ravel() + bc
    return logits, pre1, h, X, s_att, a, C, F, G, P, phi


def toy_backward_ot(
    glogits, obs, pre1, h, X, a, C, F, G, P, phi,
    W2, Zt, uatt, use_att, eps, n_iter, Wc,
):
    """Reverse-mode gradients of the transport-aggregated toy model.

    Returns (gW1, gb1, gW2, gb2, gZt, guatt, gWc, gbc); gZt is laid out
    (J, d) like Zt, guatt is zeros when attention is off. The attention
    gradient is taken through log a directly (the potentials consume log a),
    which avoids dividing by attention weights that may underflow.
    """
    n, d = X.shape
    J = Zt.shape[0]
    agg = phi.ravel()
    gWc = glogits.reshape(-1, 1) * agg.reshape(1, -1)
    gbc = glogits.copy()
    gphi = (Wc.T @ glogits).reshape(J, d)
    gP = X @ gphi.T
    gX = P @ gphi
    gZt = -gphi
    GPP = gP * P
    gf_last = GPP.sum(axis=1)
    gg_last = GPP.sum(axis=0)
    gM = GPP
    M = -C / eps
    loga = np.log(a)
    logb = np.full(J, -np.log(J * 1.0))
    gloga, gM = sinkhorn_unrolled_log_backward(
        M, loga, logb, F, G, gf_last, gg_last, gM, n_iter
    )
    gC = -gM / eps
    rs = gC.sum(axis=1)
    cs = gC.sum(axis=0)
    gX = gX + 2.0 * (X * rs.reshape(-1, 1) - gC @ Zt)
    gZt = gZt + 2.0 * (Zt * cs.reshape(-1, 1) - gC.T @ X)
    guatt = np.zeros(d)
    if use_att:
        gs_att = gloga - a * gloga.sum()
        guatt = X.T @ gs_att
        gX = gX + gs_att.reshape(-1, 1) * uatt.reshape(1, -1)
    gW1, gb1, gW2, gb2 = lift_backward(gX, obs, pre1, h, W2)
    return gW1, gb1, gW2, gb2, gZt, guatt, gWc, gbc


def toy_forward_stats(obs, W1, b1, W2, b2, Wc, bc, var_floor):
    """Lift, mean/std pooling, classify.

    Returns (logits, pre1, h, X, mean, var, sigma, agg). The std of a
    coordinate whose variance is at or below var_floor is exactly 0.
    """
    pre1, h, X = lift_forward(obs, W1, b1, W2, b2)
    n = X.shape[0]
    w = 1.0 / n
    mean = X.sum(axis=0) * w
    dev = X - mean.reshape(1, -1)
    var = (dev * dev).sum(axis=0) * w
    sigma = np.where(var > var_floor, np.sqrt(var), 0.0)
    agg = np.concatenate((mean, sigma))
    logits = Wc @ agg + bc
    return logits, pre1, h, X, mean, var, sigma, agg


def toy_backward_stats(glogits, obs, pre1, h, X, mean, var, sigma, agg, W2, Wc, var_floor):
    """Reverse-mode gradients of the statistics-pooled toy model.

    Returns (gW1, gb1, gW2, gb2, gWc, gbc). Coordinates in the floored
    zero-std branch contribute no variance gradient.
    """
    n, d = X.shape
    gWc = glogits.reshape(-1, 1) * agg.reshape(1, -1)
    gbc = glogits.copy()
    gagg = Wc.T @ glogits
    gmean = gagg[:d].copy()
    gsig = gagg[d:]
    sigma_safe = np.where(sigma > 0.0, sigma, 1.0)
    gvar = np.where(var > var_floor, gsig / (2.0 * sigma_safe), 0.0)
    w = 1.0 / n
    dev = X - mean.reshape(1, -1)
    gdev = 2.0 * w * dev * gvar.reshape(1, -1)
    gmean = gmean - gdev.sum(axis=0)
    gX = gdev + w * gmean.reshape(1, -1)
    gW1, gb1, gW2, gb2 = lift_backward(gX, obs, pre1, h, W2)
    return gW1, gb1, gW2, gb2, gWc, gbc


# ---------------------------------------------------------------------------
# backend dispatch

_KERNEL_NAMES = (
    "squared_distances",
    "sinkhorn_scale",
    "plan_from_uv",
    "lse_rows_plus",
    "lse_cols_plus",
    "sinkhorn_log",
    "plan_from_log",
    "sinkhorn_unrolled",
    "sinkhorn_unrolled_backward",
    "sinkhorn_unrolled_log",
    "sinkhorn_unrolled_log_backward",
    "lift_forward",
    "lift_backward",
    "toy_forward_ot",
    "toy_backward_ot",
    "toy_forward_stats",
    "toy_backward_stats",
)

_PY_IMPLS = {name: globals()[name] for name in _KERNEL_NAMES}
_JIT_IMPLS: dict = {}
_active_backend = "numpy"


def current_backend() -> str:
    """Name of the backend the module attributes are currently bound to."""
    return _active_backend


def set_backend(name: str) -> None:
    """Bind all kernels to 'numba' or 'numpy' implementations."""
    global _active_backend
    if name == "numpy":
        for nm in _KERNEL_NAMES:
            globals()[nm] = _PY_IMPLS[nm]
        _active_backend = "numpy"
        return
    if name != "numba":
        raise ValueError(f"unknown backend {name!r}")
    if not _JIT_IMPLS:
        for nm in _KERNEL_NAMES:
            _JIT_IMPLS[nm] = compile_kernel(_PY_IMPLS[nm])
    for nm in _KERNEL_NAMES:
        globals()[nm] = _JIT_IMPLS[nm]
    _active_backend = "numba"


def python_impl(name: str):
    """The uncompiled implementation of a kernel, for benchmarks and tests."""
    return _PY_IMPLS[name]


set_backend(resolve_backend())
