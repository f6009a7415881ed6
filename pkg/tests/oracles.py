"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, direct summation) and
shares no code with the library's fast paths.
"""

import numpy as np


def conv2d_direct(x, w, bias=None, stride=1, padding=0):
    """Nested-loop cross-correlation."""
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    y = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ci, i * stride + di, j * stride + dj] * w[co, ci, di, dj]
                    y[bi, co, i, j] = acc + (bias[co] if bias is not None else 0.0)
    return y


def matmul_direct(a, b):
    """Naive double-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def finite_diff_grad(f, x, eps=1e-4):
    """Central finite differences of a scalar function wrt array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_rel_err(analytic, numeric):
    """Scale-relative max deviation between two gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def iou_direct(a, b):
    """Continuous-area IoU of corner-form boxes."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def average_precision_direct(scored_flags, n_gt):
    """All-point interpolated AP from (score, is_tp) pairs and a GT count."""
    if n_gt == 0:
        return None
    order = sorted(range(len(scored_flags)), key=lambda i: -scored_flags[i][0])
    tp = fp = 0
    recalls, precisions = [0.0], [1.0]
    for i in order:
        if scored_flags[i][1]:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    # precision envelope, then sum rectangle areas where recall moves
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    for i in range(1, len(recalls)):
        ap += (recalls[i] - recalls[i - 1]) * precisions[i]
    return ap
