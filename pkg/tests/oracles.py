"""Independent brute-force reference implementations used as test oracles.

These are written for obviousness, not speed: plain loops over Python
numbers, straight from each metric's definition.
"""

from __future__ import annotations

import math


def cbi(counts):
    total = sum(counts)
    k = len(counts)
    return math.sqrt(sum((c / total - 1 / k) ** 2 for c in counts) / k)


def pcb(counts):
    total = sum(counts)
    k = len(counts)
    return 1 - math.sqrt(sum((c / total - 1 / k) ** 2 for c in counts) / k)


def dse(counts):
    total = sum(counts)
    h = 0.0
    for c in counts:
        if c:
            p = c / total
            h -= p * math.log2(p)
    return h


def ddc(p, q):
    d = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            d += pi * math.log(pi / qi)
    return d


def idde(areas):
    buckets = {"s": 0, "m": 0, "l": 0}
    for a in areas:
        if a < 32 * 32:
            buckets["s"] += 1
        elif a > 96 * 96:
            buckets["l"] += 1
        else:
            buckets["m"] += 1
    n = len(areas)
    return -sum((c / n) * math.log(c / n) for c in buckets.values() if c)


def bqi(ious):
    score = 0.0
    for v in ious:
        if v > 0.7:
            score += 1.0
        elif v > 0.5:
            score += 0.5
    return score / len(ious)


def osr(levels):
    return sum(1 for v in levels if v > 0) / len(levels)


def dice(a, b):
    h, w = len(a), len(a[0])
    inter = sum(1 for i in range(h) for j in range(w) if a[i][j] and b[i][j])
    total = sum(1 for i in range(h) for j in range(w) if a[i][j]) + sum(1 for i in range(h) for j in range(w) if b[i][j])
    return 2 * inter / total


def sdi(features):
    n = len(features)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dot = sum(x * y for x, y in zip(features[i], features[j]))
            ni = math.sqrt(sum(x * x for x in features[i]))
            nj = math.sqrt(sum(y * y for y in features[j]))
            total += dot / (ni * nj)
    return 1 - total / (n * (n - 1))


def gray(img):
    """BT.601 luma of a nested-list or array RGB image, as nested lists."""
    h, w = len(img), len(img[0])
    out = []
    for i in range(h):
        row = []
        for j in range(w):
            px = img[i][j]
            if hasattr(px, "__len__"):
                r, g, b = (float(v) for v in px)
                row.append(0.299 * r + 0.587 * g + 0.114 * b)
            else:
                row.append(float(px))
        out.append(row)
    return out


def ssim(a, b, size=11, sigma=1.5):
    """Mean SSIM over every fully-inside Gaussian window (explicit window loop)."""
    ga, gb = gray(a), gray(b)
    h, w = len(ga), len(ga[0])
    r = [k - (size - 1) / 2 for k in range(size)]
    g = [math.exp(-(x * x) / (2 * sigma * sigma)) for x in r]
    s = sum(g)
    g = [x / s for x in g]
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for y0 in range(h - size + 1):
        for x0 in range(w - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for dy in range(size):
                for dx in range(size):
                    wt = g[dy] * g[dx]
                    pa, pb = ga[y0 + dy][x0 + dx], gb[y0 + dy][x0 + dx]
                    ma += wt * pa
                    mb += wt * pb
                    saa += wt * pa * pa
                    sbb += wt * pb * pb
                    sab += wt * pa * pb
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def sobel_magnitude(img):
    """3x3 Sobel gradient magnitude with replicated borders, one pixel at a time."""
    h, w = len(img), len(img[0])

    def px(i, j):
        return img[min(max(i, 0), h - 1)][min(max(j, 0), w - 1)]

    out = []
    for i in range(h):
        row = []
        for j in range(w):
            gx = (px(i - 1, j + 1) + 2 * px(i, j + 1) + px(i + 1, j + 1)) - (px(i - 1, j - 1) + 2 * px(i, j - 1) + px(i + 1, j - 1))
            gy = (px(i + 1, j - 1) + 2 * px(i + 1, j) + px(i + 1, j + 1)) - (px(i - 1, j - 1) + 2 * px(i - 1, j) + px(i - 1, j + 1))
            row.append(math.sqrt(gx * gx + gy * gy))
        out.append(row)
    return out


def esi(img, edges):
    mag = sobel_magnitude(gray(img))
    vals = [mag[i][j] for i in range(len(edges)) for j in range(len(edges[0])) if edges[i][j]]
    return sum(vals) / len(vals)


def boundary(labels):
    h, w = len(labels), len(labels[0])
    out = [[False] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and labels[ni][nj] != labels[i][j]:
                    out[i][j] = True
    return out


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def union_area_grid(boxes, n=400):
    """Area of a union of boxes on an n x n sample grid (for coarse checks)."""
    hit = 0
    for i in range(n):
        y = (i + 0.5) / n
        for j in range(n):
            x = (j + 0.5) / n
            if any(b[0] <= x < b[2] and b[1] <= y < b[3] for b in boxes):
                hit += 1
    return hit / (n * n)


def rle_runs(mask):
    """Column-major run lengths starting with a zero run (COCO convention)."""
    h, w = len(mask), len(mask[0])
    flat = [bool(mask[i][j]) for j in range(w) for i in range(h)]
    runs, cur, n = [], False, 0
    for v in flat:
        if v == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = v, 1
    runs.append(n)
    return runs


def kl_uniform(counts):
    total = sum(counts)
    k = len(counts)
    return ddc([c / total for c in counts], [1 / k] * k)
