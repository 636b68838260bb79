"""Independent reference implementations used to check the fast code paths.

These are deliberately naive: explicit loops, direct formula evaluation,
no shared helpers with the package.
"""

import math

import numpy as np
import torch


def auc_pairs(anomaly_scores, labels):
    """O(n^2) pair counting; ties count one half."""
    pos = [s for s, y in zip(anomaly_scores, labels) if y == 1]
    neg = [s for s, y in zip(anomaly_scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def auc_pairs_vectorized(anomaly_scores, labels):
    """Same pair count via a full pos x neg comparison matrix (for larger fixtures)."""
    a = np.asarray(anomaly_scores, dtype=np.float64)
    y = np.asarray(labels)
    p = a[y == 1][:, None]
    n = a[y == 0][None, :]
    return float(((p > n).sum() + 0.5 * (p == n).sum()) / (p.size * n.size))


def ap_ranked(anomaly_scores, labels):
    """Walk the stable descending ranking and add recall increment times precision."""
    labels = [int(y) for y in labels]
    order = sorted(range(len(anomaly_scores)), key=lambda i: -anomaly_scores[i])
    n_pos = sum(labels)
    tp = 0
    prev_recall = 0.0
    ap = 0.0
    for k, i in enumerate(order, start=1):
        if labels[i] == 1:
            tp += 1
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / k)
        prev_recall = recall
    return ap


def _gauss(size=11, sigma=1.5):
    w = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma**2)) for i in range(size)]
    s = sum(w)
    w = [v / s for v in w]
    return [[w[i] * w[j] for j in range(size)] for i in range(size)]


def _ssim_maps(x, y, c1=0.01**2, c2=0.03**2):
    g = _gauss()
    h, w = len(x), len(x[0])
    lum, cs = [], []
    for i in range(h - 10):
        for j in range(w - 10):
            mx = my = exx = eyy = exy = 0.0
            for a in range(11):
                for b in range(11):
                    wt = g[a][b]
                    xv, yv = x[i + a][j + b], y[i + a][j + b]
                    mx += wt * xv
                    my += wt * yv
                    exx += wt * xv * xv
                    eyy += wt * yv * yv
                    exy += wt * xv * yv
            vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
            lum.append((2 * mx * my + c1) / (mx * mx + my * my + c1))
            cs.append((2 * cxy + c2) / (vx + vy + c2))
    return lum, cs


def _halve(x):
    h, w = len(x) // 2, len(x[0]) // 2
    return [[(x[2 * i][2 * j] + x[2 * i + 1][2 * j] + x[2 * i][2 * j + 1] + x[2 * i + 1][2 * j + 1]) / 4
             for j in range(w)] for i in range(h)]


def msssim_loss_loops(pred, target, scales, floor=1e-6):
    """1 - MS-SSIM by direct evaluation with Python loops."""
    weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales]
    weights = [w / sum(weights) for w in weights]
    x = [list(map(float, row)) for row in np.asarray(pred)]
    y = [list(map(float, row)) for row in np.asarray(target)]
    terms = []
    for j in range(scales):
        lum, cs = _ssim_maps(x, y)
        if j == scales - 1:
            terms.append(sum(l * c for l, c in zip(lum, cs)) / len(cs))
        else:
            terms.append(sum(cs) / len(cs))
            x, y = _halve(x), _halve(y)
    if scales == 1:
        return 1.0 - terms[0]
    value = 1.0
    for t, w in zip(terms, weights):
        value *= max(t, floor) ** w
    return 1.0 - value


def central_differences(fn, vector, step=1e-5):
    """Central finite-difference gradient of a scalar function of a flat float64 vector."""
    vector = vector.clone().to(torch.float64)
    grad = torch.empty_like(vector)
    for i in range(vector.numel()):
        up = vector.clone()
        up[i] += step
        down = vector.clone()
        down[i] -= step
        grad[i] = (fn(up) - fn(down)) / (2 * step)
    return grad


def abs_branches(pred, target):
    """Signs of every argument of an abs() in the L1 and gradient-difference terms."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    parts = [pred - target]
    for dim in (-1, -2):
        dp = torch.diff(pred, dim=dim)
        dt = torch.diff(target, dim=dim)
        parts += [dp, dt.abs() - dp.abs()]
    return torch.cat([torch.sign(p).reshape(-1) for p in parts])


def relative_error(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    scale = max(float(a.norm()), float(b.norm()), 1e-300)
    return float((a - b).norm()) / scale
