"""Central finite differences, dense and column-colored sparse."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

REL_STEP = 1e-6


def fd_steps(z, rel=REL_STEP):
    return rel * np.maximum(1.0, np.abs(z))


def gradient(f, z, grad=None, rel=REL_STEP):
    """Gradient of scalar ``f`` at ``z``; an analytic ``grad`` takes precedence."""
    z = np.asarray(z, dtype=float)
    if grad is not None:
        return np.asarray(grad(z), dtype=float)
    h = fd_steps(z, rel)
    out = np.empty_like(z)
    zp = z.copy()
    for j in range(len(z)):
        zj = z[j]
        zp[j] = zj + h[j]
        fp = f(zp)
        zp[j] = zj - h[j]
        fm = f(zp)
        zp[j] = zj
        out[j] = (fp - fm) / (2 * h[j])
    return out


def jacobian(F, z, jac=None, rel=REL_STEP):
    """Dense Jacobian of vector ``F`` at ``z``; an analytic ``jac`` takes precedence."""
    z = np.asarray(z, dtype=float)
    if jac is not None:
        J = jac(z)
        return J.toarray() if sp.issparse(J) else np.asarray(J, dtype=float)
    h = fd_steps(z, rel)
    m = len(np.atleast_1d(F(z)))
    J = np.empty((m, len(z)))
    zp = z.copy()
    for j in range(len(z)):
        zj = z[j]
        zp[j] = zj + h[j]
        # copies: evaluators may return views into their argument
        fp = np.array(F(zp), dtype=float, ndmin=1)
        zp[j] = zj - h[j]
        fm = np.array(F(zp), dtype=float, ndmin=1)
        zp[j] = zj
        J[:, j] = (fp - fm) / (2 * h[j])
    return J


def color_columns(pattern):
    """Greedy column coloring: columns of one color share no nonzero row."""
    P = sp.csc_matrix(pattern, dtype=bool)
    n = P.shape[1]
    colors = np.full(n, -1, dtype=np.int64)
    # conflict graph through shared rows
    G = (P.T @ P).tocsr()
    order = np.argsort(-np.diff(P.indptr), kind="stable")
    for j in order:
        nbrs = G.indices[G.indptr[j]:G.indptr[j + 1]]
        used = set(colors[nbrs][colors[nbrs] >= 0].tolist())
        c = 0
        while c in used:
            c += 1
        colors[j] = c
    return colors


class SparseJacobian:
    """Colored central-difference Jacobian for a fixed sparsity pattern.

    Each color needs two residual evaluations, so the cost scales with the
    band width of the pattern, not with the number of variables.
    """

    def __init__(self, pattern, rel=REL_STEP):
        P = sp.csc_matrix(pattern, dtype=bool)
        P.sum_duplicates()
        self.shape = P.shape
        self.rel = rel
        self.colors = color_columns(P)
        self.n_colors = int(self.colors.max()) + 1 if P.shape[1] else 0
        coo = P.tocoo()
        self.rows = coo.row.astype(np.int64)
        self.cols = coo.col.astype(np.int64)
        self.groups = [np.flatnonzero(self.colors == c) for c in range(self.n_colors)]

    def __call__(self, F, z):
        z = np.asarray(z, dtype=float)
        h = fd_steps(z, self.rel)
        D = np.zeros((self.shape[0], self.n_colors))
        for c, cols in enumerate(self.groups):
            zp = z.copy()
            zp[cols] += h[cols]
            fp = np.array(F(zp), dtype=float)
            zp[cols] = z[cols] - h[cols]
            fm = np.array(F(zp), dtype=float)
            D[:, c] = fp - fm
        vals = D[self.rows, self.colors[self.cols]] / (2 * h[self.cols])
        return sp.csr_matrix((vals, (self.rows, self.cols)), shape=self.shape)
