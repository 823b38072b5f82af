"""Hot numeric kernels with a numba path and a pure-numpy path.

Each kernel ``name`` exists as ``name_numba`` (explicit loops, njit) and
``name_numpy`` (vectorized). The public ``name`` is bound to one of them at
import time according to :data:`fecembed._accel.USE_NUMBA`. Both paths agree
exactly on discrete outputs and to rounding (summation order) on real ones;
``tests/test_kernels.py`` checks that.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# distance kind codes shared with metrics.DistanceKind
L1, L2, COSINE = 0, 1, 2


# --------------------------------------------------------------------------
# symmetric triplet hinge loss
# --------------------------------------------------------------------------

@njit
def triplet_loss_batch_numba(ea, eb, ec, margins):
    n, d = ea.shape
    loss = np.zeros(n)
    ga = np.zeros((n, d))
    gb = np.zeros((n, d))
    gc = np.zeros((n, d))
    for i in range(n):
        dab = 0.0
        dac = 0.0
        dbc = 0.0
        for k in range(d):
            u = ea[i, k] - eb[i, k]
            v = ea[i, k] - ec[i, k]
            w = eb[i, k] - ec[i, k]
            dab += u * u
            dac += v * v
            dbc += w * w
        h1 = dab - dac + margins[i]
        h2 = dab - dbc + margins[i]
        if h1 > 0.0:
            loss[i] += h1
            for k in range(d):
                ga[i, k] += 2.0 * (ec[i, k] - eb[i, k])
                gb[i, k] += 2.0 * (eb[i, k] - ea[i, k])
                gc[i, k] += 2.0 * (ea[i, k] - ec[i, k])
        if h2 > 0.0:
            loss[i] += h2
            for k in range(d):
                ga[i, k] += 2.0 * (ea[i, k] - eb[i, k])
                gb[i, k] += 2.0 * (ec[i, k] - ea[i, k])
                gc[i, k] += 2.0 * (eb[i, k] - ec[i, k])
    return loss, ga, gb, gc


def triplet_loss_batch_numpy(ea, eb, ec, margins):
    dab = np.sum((ea - eb) ** 2, axis=1)
    dac = np.sum((ea - ec) ** 2, axis=1)
    dbc = np.sum((eb - ec) ** 2, axis=1)
    h1 = dab - dac + margins
    h2 = dab - dbc + margins
    a1 = (h1 > 0.0)[:, None]
    a2 = (h2 > 0.0)[:, None]
    loss = np.where(h1 > 0.0, h1, 0.0) + np.where(h2 > 0.0, h2, 0.0)
    ga = 2.0 * (a1 * (ec - eb) + a2 * (ea - eb))
    gb = 2.0 * (a1 * (eb - ea) + a2 * (ec - ea))
    gc = 2.0 * (a1 * (ea - ec) + a2 * (eb - ec))
    return loss, ga, gb, gc


# --------------------------------------------------------------------------
# triplet correctness (strict inequality, ties are wrong)
# --------------------------------------------------------------------------

@njit
def _pair_distance(x, y, kind):
    d = x.shape[0]
    if kind == 0:
        s = 0.0
        for k in range(d):
            s += abs(x[k] - y[k])
        return s
    if kind == 1:
        s = 0.0
        for k in range(d):
            t = x[k] - y[k]
            s += t * t
        return np.sqrt(s)
    dot = 0.0
    nx = 0.0
    ny = 0.0
    for k in range(d):
        dot += x[k] * y[k]
        nx += x[k] * x[k]
        ny += y[k] * y[k]
    return 1.0 - dot / (np.sqrt(nx) * np.sqrt(ny))


@njit
def triplet_correct_numba(ea, eb, ec, kind):
    n = ea.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        dab = _pair_distance(ea[i], eb[i], kind)
        dac = _pair_distance(ea[i], ec[i], kind)
        dbc = _pair_distance(eb[i], ec[i], kind)
        out[i] = dab < dac and dab < dbc
    return out


def _rowwise_distance(x, y, kind):
    if kind == L1:
        return np.sum(np.abs(x - y), axis=1)
    if kind == L2:
        return np.sqrt(np.sum((x - y) ** 2, axis=1))
    dot = np.sum(x * y, axis=1)
    nx = np.sqrt(np.sum(x * x, axis=1))
    ny = np.sqrt(np.sum(y * y, axis=1))
    return 1.0 - dot / (nx * ny)


def triplet_correct_numpy(ea, eb, ec, kind):
    dab = _rowwise_distance(ea, eb, kind)
    dac = _rowwise_distance(ea, ec, kind)
    dbc = _rowwise_distance(eb, ec, kind)
    return (dab < dac) & (dab < dbc)


# --------------------------------------------------------------------------
# complete-linkage agglomerative clustering
# --------------------------------------------------------------------------
# The cluster stored at slot p always has p as its smallest member, so a
# lexicographic scan over slot pairs (i < j) with strict "<" realises the
# (min-index, min-index) tie-break.

@njit
def complete_linkage_numba(dist, k):
    n = dist.shape[0]
    d = dist.copy()
    active = np.ones(n, dtype=np.bool_)
    slot = np.arange(n)
    n_clusters = n
    while n_clusters > k:
        best = np.inf
        bi = -1
        bj = -1
        for i in range(n):
            if not active[i]:
                continue
            for j in range(i + 1, n):
                if active[j] and d[i, j] < best:
                    best = d[i, j]
                    bi = i
                    bj = j
        if bi < 0:
            # every remaining distance is inf/nan; merge the first two slots
            for i in range(n):
                if active[i]:
                    if bi < 0:
                        bi = i
                    elif bj < 0:
                        bj = i
        for m in range(n):
            if active[m] and m != bi and m != bj:
                v = max(d[bi, m], d[bj, m])
                d[bi, m] = v
                d[m, bi] = v
        active[bj] = False
        for p in range(n):
            if slot[p] == bj:
                slot[p] = bi
        n_clusters -= 1
    return _canonical_labels(slot)


@njit
def _canonical_labels(slot):
    n = slot.shape[0]
    code = -np.ones(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    nxt = 0
    for p in range(n):
        s = slot[p]
        if code[s] < 0:
            code[s] = nxt
            nxt += 1
        labels[p] = code[s]
    return labels


def complete_linkage_numpy(dist, k):
    n = dist.shape[0]
    d = np.array(dist, dtype=np.float64, copy=True)
    lower = np.tril(np.ones((n, n), dtype=bool))
    d[lower] = np.inf
    active = np.ones(n, dtype=bool)
    slot = np.arange(n)
    for _ in range(max(n - max(k, 1), 0)):
        flat = int(np.argmin(d))
        bi, bj = divmod(flat, n)
        if not np.isfinite(d[bi, bj]):
            idx = np.flatnonzero(active)
            bi, bj = int(idx[0]), int(idx[1])
        others = active.copy()
        others[[bi, bj]] = False
        merged = np.maximum(_sym(d, bi), _sym(d, bj))
        lo = others & (np.arange(n) < bi)
        hi = others & (np.arange(n) > bi)
        d[lo, bi] = merged[lo]
        d[bi, hi] = merged[hi]
        d[bj, :] = np.inf
        d[:, bj] = np.inf
        active[bj] = False
        slot[slot == bj] = bi
    _, labels = np.unique(slot, return_inverse=True)
    return labels.astype(np.int64)


def _sym(upper, i):
    # row i of the symmetric matrix stored in the strict upper triangle
    return np.concatenate([upper[:i, i], [np.inf], upper[i, i + 1:]])



# --------------------------------------------------------------------------
# fused batchnorm + ReLU6 (train mode, batch statistics)
# --------------------------------------------------------------------------

@njit
def bn_relu6_forward_numba(x, gamma, beta, eps):
    n, w = x.shape
    mean = np.zeros(w)
    var = np.zeros(w)
    for i in range(n):
        for j in range(w):
            mean[j] += x[i, j]
    for j in range(w):
        mean[j] /= n
    for i in range(n):
        for j in range(w):
            t = x[i, j] - mean[j]
            var[j] += t * t
    inv_std = np.empty(w)
    for j in range(w):
        var[j] /= n
        inv_std[j] = 1.0 / np.sqrt(var[j] + eps)
    xhat = np.empty((n, w))
    z = np.empty((n, w))
    act = np.empty((n, w))
    for i in range(n):
        for j in range(w):
            h = (x[i, j] - mean[j]) * inv_std[j]
            xhat[i, j] = h
            v = h * gamma[j] + beta[j]
            z[i, j] = v
            act[i, j] = min(max(v, 0.0), 6.0)
    return xhat, inv_std, mean, var, z, act


def bn_relu6_forward_numpy(x, gamma, beta, eps):
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    z = xhat * gamma + beta
    return xhat, inv_std, mean, var, z, np.minimum(np.maximum(z, 0.0), 6.0)


@njit
def bn_relu6_backward_numba(xhat, inv_std, gamma, z, upstream):
    """Backward through ReLU6 then batchnorm; ``upstream`` is d/d(ReLU6 output)."""
    n, w = xhat.shape
    dxhat = np.empty((n, w))
    dgamma = np.zeros(w)
    dbeta = np.zeros(w)
    s1 = np.zeros(w)
    s2 = np.zeros(w)
    for i in range(n):
        for j in range(w):
            g = upstream[i, j] if 0.0 < z[i, j] < 6.0 else 0.0
            dgamma[j] += g * xhat[i, j]
            dbeta[j] += g
            d = g * gamma[j]
            dxhat[i, j] = d
            s1[j] += d
            s2[j] += d * xhat[i, j]
    dx = np.empty((n, w))
    for i in range(n):
        for j in range(w):
            dx[i, j] = (inv_std[j] / n) * (n * dxhat[i, j] - s1[j] - xhat[i, j] * s2[j])
    return dx, dgamma, dbeta


def bn_relu6_backward_numpy(xhat, inv_std, gamma, z, upstream):
    n = xhat.shape[0]
    g = upstream * ((z > 0.0) & (z < 6.0))
    dgamma = np.sum(g * xhat, axis=0)
    dbeta = np.sum(g, axis=0)
    dxhat = g * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@njit
def adam_update_numba(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam on flat contiguous arrays."""
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

if USE_NUMBA:
    triplet_loss_batch = triplet_loss_batch_numba
    triplet_correct = triplet_correct_numba
    complete_linkage = complete_linkage_numba
    bn_relu6_forward = bn_relu6_forward_numba
    bn_relu6_backward = bn_relu6_backward_numba
    adam_update = adam_update_numba
else:
    triplet_loss_batch = triplet_loss_batch_numpy
    triplet_correct = triplet_correct_numpy
    complete_linkage = complete_linkage_numpy
    bn_relu6_forward = bn_relu6_forward_numpy
    bn_relu6_backward = bn_relu6_backward_numpy
    adam_update = adam_update_numpy
