"""Compiled inner loops for the G-Wishart routines."""

import numpy as np
from numba import njit


@njit(cache=True)
def completion_log_weights(psi_diag, psi_free, free_rows, free_cols, adj, tri):
    """Complete the non-free Cholesky entries and return ``-sum(psi^2)/2``.

    ``psi_diag`` is (n, p), ``psi_free`` is (n, m) for the m edges listed in
    ``free_rows``/``free_cols`` (i < j), ``tri`` is the upper Cholesky factor
    of the inverse rate matrix.  Vertices are completed in index order.
    """
    n, p = psi_diag.shape
    m = psi_free.shape[1]
    out = np.empty(n)
    psi = np.zeros((p, p))
    phi = np.zeros((p, p))
    for s in range(n):
        psi[:, :] = 0.0
        for i in range(p):
            psi[i, i] = psi_diag[s, i]
        for e in range(m):
            psi[free_rows[e], free_cols[e]] = psi_free[s, e]
        acc = 0.0
        for i in range(p):
            for j in range(i + 1, p):
                if adj[i, j]:
                    continue
                total = 0.0
                for k in range(i):
                    total += phi[k, i] * phi[k, j]
                phi_ij = -total / (psi[i, i] * tri[i, i])
                partial = 0.0
                for l in range(i, j):
                    partial += psi[i, l] * tri[l, j]
                value = (phi_ij - partial) / tri[j, j]
                psi[i, j] = value
                acc += value * value
            for j in range(i, p):
                total = 0.0
                for l in range(i, j + 1):
                    total += psi[i, l] * tri[l, j]
                phi[i, j] = total
        out[s] = -0.5 * acc
    return out


@njit(cache=True)
def gwishart_completion(sigma, adj, tol, max_iter):
    """Iterate the neighbourhood regressions that turn a Wishart covariance
    into the covariance of a G-Wishart draw.  Returns (W, iterations);
    iterations is -1 if the tolerance was not reached."""
    p = sigma.shape[0]
    w = sigma.copy()
    old = np.empty_like(w)
    for it in range(max_iter):
        old[:, :] = w
        for j in range(p):
            k = 0
            for i in range(p):
                if i != j and adj[i, j]:
                    k += 1
            if k == 0:
                for i in range(p):
                    if i != j:
                        w[i, j] = 0.0
                        w[j, i] = 0.0
                continue
            nb = np.empty(k, dtype=np.int64)
            k = 0
            for i in range(p):
                if i != j and adj[i, j]:
                    nb[k] = i
                    k += 1
            sub = np.empty((k, k))
            rhs = np.empty(k)
            for a in range(k):
                rhs[a] = sigma[nb[a], j]
                for b in range(k):
                    sub[a, b] = w[nb[a], nb[b]]
            beta = np.linalg.solve(sub, rhs)
            for i in range(p):
                if i == j:
                    continue
                total = 0.0
                for a in range(k):
                    total += w[i, nb[a]] * beta[a]
                w[i, j] = total
                w[j, i] = total
        diff = 0.0
        scale = 0.0
        for a in range(p):
            for b in range(p):
                d = abs(w[a, b] - old[a, b])
                if d > diff:
                    diff = d
                if abs(old[a, b]) > scale:
                    scale = abs(old[a, b])
        if diff <= tol * scale:
            return w, it + 1
    return w, -1


@njit(cache=True)
def _bartlett(df, scale_chol):
    p = scale_chol.shape[0]
    a = np.zeros((p, p))
    for i in range(p):
        a[i, i] = np.sqrt(np.random.chisquare(df - i))
        for j in range(i):
            a[i, j] = np.random.standard_normal()
    la = scale_chol @ a
    w = la @ la.T
    return 0.5 * (w + w.T)


@njit(cache=True)
def rgwish(adj, rate, df, seed, tol, max_iter):
    """G-Wishart draw, component by component.  Returns (K, ok)."""
    np.random.seed(seed)
    p = adj.shape[0]
    k = np.zeros((p, p))
    label = -np.ones(p, dtype=np.int64)
    n_comp = 0
    stack = np.empty(p, dtype=np.int64)
    for v in range(p):
        if label[v] >= 0:
            continue
        label[v] = n_comp
        top = 0
        stack[0] = v
        top = 1
        while top > 0:
            top -= 1
            u = stack[top]
            for w in range(p):
                if adj[u, w] and label[w] < 0:
                    label[w] = n_comp
                    stack[top] = w
                    top += 1
        n_comp += 1
    for c in range(n_comp):
        m = 0
        for v in range(p):
            if label[v] == c:
                m += 1
        idx = np.empty(m, dtype=np.int64)
        m = 0
        for v in range(p):
            if label[v] == c:
                idx[m] = v
                m += 1
        if m == 1:
            v = idx[0]
            k[v, v] = np.random.chisquare(df) / rate[v, v]
            continue
        sub_rate = np.empty((m, m))
        sub_adj = np.zeros((m, m), dtype=np.bool_)
        n_edges = 0
        for a in range(m):
            for b in range(m):
                sub_rate[a, b] = rate[idx[a], idx[b]]
                if a != b and adj[idx[a], idx[b]]:
                    sub_adj[a, b] = True
                    n_edges += 1
        scale_chol = np.linalg.cholesky(np.linalg.inv(sub_rate))
        k_full = _bartlett(df + m - 1, scale_chol)
        if n_edges == m * (m - 1):
            block = k_full
        else:
            sigma = np.linalg.inv(k_full)
            sigma = 0.5 * (sigma + sigma.T)
            w, n_iter = gwishart_completion(sigma, sub_adj, tol, max_iter)
            if n_iter < 0:
                return k, False
            block = np.linalg.inv(w)
            block = 0.5 * (block + block.T)
            for a in range(m):
                for b in range(m):
                    if a != b and not sub_adj[a, b]:
                        block[a, b] = 0.0
        for a in range(m):
            for b in range(m):
                k[idx[a], idx[b]] = block[a, b]
    return k, True
