"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def horn_similarity(src, dst):
    """Closed-form absolute orientation via the unit-quaternion eigenproblem.

    Scale is the symmetric ratio of centered spreads, which equals the
    least-squares scale only for noise-free data.
    """
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    S = a.T @ b
    (Sxx, Sxy, Sxz), (Syx, Syy, Syz), (Szx, Szy, Szz) = S
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    w, V = np.linalg.eigh(N)
    q0, qx, qy, qz = V[:, -1]
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ])
    s = np.sqrt((b ** 2).sum() / (a ** 2).sum())
    return s, R, md - s * R @ ms


def reflection_allowed_fit(src, dst):
    """Least-squares fit over all orthogonal matrices (reflections included)."""
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    U, D, Vt = np.linalg.svd(b.T @ a)
    Q = U @ Vt
    s = D.sum() / (a ** 2).sum()
    return s, Q, md - s * Q @ ms


def sq_residual(s, R, t, src, dst):
    return float(((dst - (s * src @ R.T + t)) ** 2).sum())


def exhaustive_best_consensus(src, dst, thr, fit):
    """Largest inlier count over every 3-subset (for small instances)."""
    best = 0
    for idx in itertools.combinations(range(len(src)), 3):
        idx = list(idx)
        try:
            T = fit(src[idx], dst[idx])
        except ValueError:
            continue
        r = np.linalg.norm(dst - T.apply(src), axis=1)
        best = max(best, int((r <= thr).sum()))
    return best


def all_simple_paths(adj, a, b):
    out, stack = [], [(a, [a])]
    while stack:
        u, path = stack.pop()
        if u == b:
            out.append(path)
            continue
        for v in adj.get(u, ()):
            if v not in path:
                stack.append((v, path + [v]))
    return out


def pck_recount(pred, gt, thresholds, scale):
    """Loop-based PCK over names shared by two ``{name: xyz}`` dicts."""
    names = [n for n in pred if n in gt]
    out = []
    for t in thresholds:
        good = 0
        for n in names:
            d = scale * np.sqrt(sum((pred[n][k] - gt[n][k]) ** 2 for k in range(3)))
            good += d <= t
        out.append(good / len(names))
    return out
