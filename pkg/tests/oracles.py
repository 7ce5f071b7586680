"""Independent reference implementations used to check the library.

Everything here is deliberately naive (loops, central differences, all-pairs
distances) and never calls the code paths it verifies.
"""

from __future__ import annotations

import numpy as np


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-10)
    return float(np.linalg.norm((a - b).ravel()) / scale)


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def depthwise_conv_loops(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Zero-padded same-size per-channel convolution, four explicit loops."""
    h, w, c = x.shape
    k = kernels.shape[0]
    p = k // 2
    out = np.zeros_like(x)
    for ch in range(c):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        yy, xj = y + i - p, xx + j - p
                        if 0 <= yy < h and 0 <= xj < w:
                            acc += kernels[i, j, ch] * x[yy, xj, ch]
                out[y, xx, ch] = acc
    return out


def selective_scan_loops(x, delta, b_seq, c_seq, a, d) -> np.ndarray:
    """Unrolled time-varying recurrence with per-step Taylor input weights.

    x, delta: (L, D); b_seq, c_seq: (L, N); a: (D, N) or (N,); d: (D,) or scalar.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    b_seq = np.asarray(b_seq, dtype=float)
    c_seq = np.asarray(c_seq, dtype=float)
    length, dchan = x.shape
    n = b_seq.shape[1]
    a = np.broadcast_to(np.asarray(a, dtype=float), (dchan, n))
    d = np.broadcast_to(np.asarray(d, dtype=float), (dchan,))
    h = np.zeros((dchan, n))
    y = np.zeros((length, dchan))
    for l in range(length):
        a_bar = np.exp(delta[l][:, None] * a)
        b_bar_x = delta[l][:, None] * b_seq[l][None, :] * x[l][:, None]
        h = a_bar * h + b_bar_x
        y[l] = h @ c_seq[l] + d * x[l]
    return y


def confusion_loops(pred, gt, cls):
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p == cls and g == cls:
            tp += 1
        elif p == cls and g != cls:
            fp += 1
        elif p != cls and g == cls:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def boundary_points_loops(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or the image edge."""
    hh, ww = mask.shape
    pts = []
    for y in range(hh):
        for x in range(ww):
            if not mask[y, x]:
                continue
            edge = False
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < hh and 0 <= xx < ww) or not mask[yy, xx]:
                    edge = True
                    break
            if edge:
                pts.append((y, x))
    return np.asarray(pts, dtype=float)


def directed_distances_loops(a_pts, b_pts, spacing=(1.0, 1.0)) -> np.ndarray:
    """All-pairs nearest distances from each point of A to the set B."""
    sy, sx = spacing
    out = np.empty(len(a_pts))
    for i, (ay, ax) in enumerate(a_pts):
        best = np.inf
        for by, bx in b_pts:
            dd = ((ay - by) * sy) ** 2 + ((ax - bx) * sx) ** 2
            if dd < best:
                best = dd
        out[i] = np.sqrt(best)
    return out


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=float))
    rank = int(np.ceil(q * len(values)))
    return float(values[max(rank, 1) - 1])
