"""Independent reference implementations shared by the unit and acceptance tests.

They favour plain loops over speed so that they share no code paths with the package.
"""

import itertools

import numpy as np


def covariance_oracle(x, miss):
    """Double loop over pixel pairs, population normalisation over shared slices."""
    T, n = x.shape
    mean = np.array([np.mean([x[t, i] for t in range(T) if not miss[t, i]]) for i in range(n)])
    cov = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            both = [t for t in range(T) if not miss[t, i] and not miss[t, j]]
            if len(both) < 2:
                continue
            cov[i, j] = sum((x[t, i] - mean[i]) * (x[t, j] - mean[j]) for t in both) / len(both)
    return mean, cov


def space_knn_oracle(vals, miss, k, extent):
    """Exhaustive scan of the spatio-temporal box around each gap."""
    T, H, W = vals.shape
    out = {}
    for t in range(T):
        for r in range(H):
            for c in range(W):
                if not miss[t, r, c]:
                    continue
                cands = []
                for t2 in range(T):
                    for r2 in range(H):
                        for c2 in range(W):
                            dt, dr, dc = t2 - t, r2 - r, c2 - c
                            if (dt, dr, dc) == (0, 0, 0) or miss[t2, r2, c2]:
                                continue
                            if abs(dt) <= 1 and abs(dr) <= extent and abs(dc) <= extent:
                                cands.append((dt * dt + dr * dr + dc * dc, dt, dr, dc, vals[t2, r2, c2]))
                cands.sort()
                out[(t, r, c)] = np.mean([v[-1] for v in cands[:k]]) if cands else None
    return out


def time_knn_oracle(vals, miss, days, k):
    T, H, W = vals.shape
    out = {}
    for t in range(T):
        for r in range(H):
            for c in range(W):
                if not miss[t, r, c]:
                    continue
                cands = sorted((abs(int(days[s]) - int(days[t])), int(days[s]), vals[s, r, c])
                               for s in range(T) if not miss[s, r, c])
                out[(t, r, c)] = np.mean([v[-1] for v in cands[:k]]) if cands else None
    return out


def cube_oracle(vals, miss, side):
    T, H, W = vals.shape
    h = side // 2
    out = {}
    for t, r, c in zip(*np.nonzero(miss)):
        box = [vals[a, b, d] for a in range(max(0, t - h), min(T, t + h + 1))
               for b in range(max(0, r - h), min(H, r + h + 1))
               for d in range(max(0, c - h), min(W, c + h + 1)) if not miss[a, b, d]]
        out[(t, r, c)] = np.mean(box) if box else None
    return out


def simple_fill_oracle(vals, miss, kind):
    out = {}
    gmean = np.mean([v for v, m in zip(vals.ravel(), miss.ravel()) if not m])
    for t, r, c in zip(*np.nonzero(miss)):
        if kind == "fill0":
            out[(t, r, c)] = 0.0
        elif kind == "global-mean":
            out[(t, r, c)] = gmean
        else:
            obs = [vals[t, a, b] for a in range(vals.shape[1]) for b in range(vals.shape[2]) if not miss[t, a, b]]
            out[(t, r, c)] = np.mean(obs) if obs else gmean
    return out


def enumerate_paths(obs, log_pi, log_P, log_B):
    """Score every state path, summing left to right like a forward recursion."""
    n, T = log_pi.size, len(obs)
    paths = np.array(list(itertools.product(range(n), repeat=T)), dtype=np.int64)
    score = log_pi[paths[:, 0]] + log_B[paths[:, 0], obs[0]]
    for t in range(1, T):
        score = score + log_P[paths[:, t - 1], paths[:, t]]
        score = score + log_B[paths[:, t], obs[t]]
    return paths, score


def dense_map_solve(y, obs, prev, DtD, w1, w2, w3):
    """Dense normal-equation solve of one MAP update (``prev`` None for the first date)."""
    n = y.size
    A = np.diag(w1 * obs.astype(float)) + w2 * DtD
    b = w1 * obs * y
    if prev is not None:
        A = A + w3 * np.eye(n)
        b = b + w3 * prev
    return np.linalg.solve(A, b)
