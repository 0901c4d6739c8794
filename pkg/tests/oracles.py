"""Slow, loop-based reference implementations used as test oracles."""

import math
from collections import deque

import numpy as np


def canny_reference(gray, sigma=1.4, low=0.1, high=0.3):
    """Canny written stage by stage with explicit pixel loops."""
    img = [[float(v) for v in row] for row in np.asarray(gray)]
    h, w = len(img), len(img[0])

    radius = max(1, math.ceil(3 * sigma))
    taps = [math.exp(-0.5 * (x / sigma) ** 2) for x in range(-radius, radius + 1)]
    total = sum(taps)
    taps = [t / total for t in taps]

    def clamp(v, n):
        return min(max(v, 0), n - 1)

    rows = [[sum(t * img[clamp(i + k - radius, h)][j] for k, t in enumerate(taps)) for j in range(w)]
            for i in range(h)]
    blur = [[sum(t * rows[i][clamp(j + k - radius, w)] for k, t in enumerate(taps)) for j in range(w)]
            for i in range(h)]

    def px(i, j):
        return blur[clamp(i, h)][clamp(j, w)]

    gx = [[0.0] * w for _ in range(h)]
    gy = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            gx[i][j] = (px(i - 1, j + 1) + 2 * px(i, j + 1) + px(i + 1, j + 1)
                        - px(i - 1, j - 1) - 2 * px(i, j - 1) - px(i + 1, j - 1))
            gy[i][j] = (px(i + 1, j - 1) + 2 * px(i + 1, j) + px(i + 1, j + 1)
                        - px(i - 1, j - 1) - 2 * px(i - 1, j) - px(i - 1, j + 1))
    peak = max(math.hypot(gx[i][j], gy[i][j]) for i in range(h) for j in range(w))
    out = np.zeros((h, w), dtype=np.float32)
    if peak == 0:
        return out
    gx = [[round(v / peak, 9) for v in r] for r in gx]
    gy = [[round(v / peak, 9) for v in r] for r in gy]
    mag = [[math.hypot(gx[i][j], gy[i][j]) for j in range(w)] for i in range(h)]

    def mag_at(i, j):
        return mag[i][j] if 0 <= i < h and 0 <= j < w else 0.0

    thin = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            m = mag[i][j]
            if m == 0:
                continue
            angle = math.degrees(math.atan2(abs(gy[i][j]), abs(gx[i][j])))
            if angle <= 22.5:
                step = (0, 1)
            elif angle >= 67.5:
                step = (1, 0)
            elif gx[i][j] * gy[i][j] > 0:
                step = (1, 1)
            else:
                step = (1, -1)
            dy, dx = step
            if m >= mag_at(i + dy, j + dx) and m >= mag_at(i - dy, j - dx):
                thin[i][j] = m

    seen = [[False] * w for _ in range(h)]
    queue = deque((i, j) for i in range(h) for j in range(w) if thin[i][j] >= high)
    for i, j in queue:
        seen[i][j] = True
    while queue:
        i, j = queue.popleft()
        out[i, j] = 1
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                a, b = i + di, j + dj
                if 0 <= a < h and 0 <= b < w and not seen[a][b] and thin[a][b] >= low:
                    seen[a][b] = True
                    queue.append((a, b))
    return out


def confusion_bruteforce(pred, truth, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        cm[int(t), int(p)] += 1
    return cm


def miou_bruteforce(preds, truths, k):
    inter = [0] * k
    union = [0] * k
    for pred, truth in zip(preds, truths):
        for p, t in zip(np.ravel(pred), np.ravel(truth)):
            for c in range(k):
                a, b = p == c, t == c
                inter[c] += a and b
                union[c] += a or b
    ious = [inter[c] / union[c] for c in range(k) if union[c] > 0]
    return sum(ious) / len(ious)


def boundary_bruteforce(labels, k):
    h, w = labels.shape
    out = np.zeros((k, h, w), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= a < h and 0 <= b < w and labels[a, b] != labels[i, j]:
                    out[labels[i, j], i, j] = 1
    return out


def smoothness_terms(cam, guide, mask, order, alpha=10.0, eps=1e-6):
    """Enumerate every stencil term of the gated smoothness loss."""
    total = 0.0
    k, h, w = cam.shape
    for c in range(k):
        if not mask[c]:
            continue
        for axis in (0, 1):
            for i in range(h):
                for j in range(w):
                    def at(x, off):
                        a, b = (i + off, j) if axis == 0 else (i, j + off)
                        return x[c, a, b] if 0 <= a < h and 0 <= b < w else None

                    if order == 1:
                        pts = [at(cam, 0), at(cam, 1)]
                        gpts = [at(guide, 0), at(guide, 1)]
                        coef = (-1, 1)
                    else:
                        pts = [at(cam, -1), at(cam, 0), at(cam, 1)]
                        gpts = [at(guide, -1), at(guide, 0), at(guide, 1)]
                        coef = (1, -2, 1)
                    if any(p is None for p in pts):
                        d = dg = 0.0
                    else:
                        d = sum(cf * p for cf, p in zip(coef, pts))
                        dg = sum(cf * p for cf, p in zip(coef, gpts))
                    a = abs(d) * math.exp(-alpha * abs(dg))
                    total += math.sqrt(a * a + eps)
    return total
