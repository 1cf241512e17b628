"""Independent brute-force oracles used by unit and acceptance tests.

Everything here is written against first principles (loops, ray casting,
exhaustive sorts) and never calls the library code paths it checks.
"""

import numpy as np


def warp_corners(homography, source_size):
    """Forward-map the four source-corner pixel centers."""
    h, w = source_size
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    pts = np.concatenate([corners, np.ones((4, 1))], axis=1) @ np.asarray(homography).T
    return pts[:, :2] / pts[:, 2:3]


def points_in_polygon(points, poly):
    """Even-odd ray casting, vectorized over points; poly is (N, 2)."""
    x = points[:, 0]
    y = points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = ((y1 > y) != (y2 > y)) & (x < (x2 - x1) * (y - y1) / (y2 - y1) + x1)
        inside ^= crosses
    return inside


def distance_to_polygon_edges(points, poly):
    """Min distance from each point to the polygon boundary."""
    best = np.full(len(points), np.inf)
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        ab = b - a
        t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.linalg.norm(points - proj, axis=1)
        best = np.minimum(best, d)
    return best


def quad_mask_oracle(homography, canvas, source_size):
    """(mask, boundary_distance) over the pixel grid via polygon rasterization."""
    H, W = canvas
    poly = warp_corners(homography, source_size)
    ys, xs = np.mgrid[0:H, 0:W]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    inside = points_in_polygon(pts, poly).reshape(H, W)
    dist = distance_to_polygon_edges(pts, poly).reshape(H, W)
    return inside, dist


def topk_retrieval_oracle(query_rows, keys, names, k):
    """Exhaustive retrieval: mean the query rows, normalize, score every key,
    sort all scores with ties broken on lower index, dedup non-null names
    keeping the first (highest-scoring) occurrence, truncate/pad to k with
    ("", -1.0)."""
    q = np.asarray(query_rows, dtype=np.float64)
    if q.ndim == 2:
        q = sum(q[i] for i in range(q.shape[0])) / q.shape[0]
    norm = float(np.sqrt(sum(x * x for x in q)))
    q = q / norm if norm > 0 else q
    scores = [float(np.dot(q, k_)) for k_ in keys]
    order = sorted(range(len(keys)), key=lambda i: (-scores[i], i))
    picked = []
    seen = set()
    for i in order:
        if names[i] == "":
            picked.append(i)
        elif names[i] not in seen:
            seen.add(names[i])
            picked.append(i)
        if len(picked) == k:
            break
    out_names = [names[i] for i in picked]
    out_scores = [scores[i] for i in picked]
    out_idx = list(picked)
    while len(out_names) < k:
        out_names.append("")
        out_scores.append(-1.0)
        out_idx.append(-1)
    return out_names, out_scores, out_idx


def mask_pool_oracle(grid, mask):
    out = np.zeros_like(grid)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            for c in range(grid.shape[2]):
                out[i, j, c] = mask[i, j] * grid[i, j, c]
    return out


def block_mean_oracle(mask, gh, gw):
    H, W = mask.shape
    bh, bw = H // gh, W // gw
    out = np.zeros((gh, gw))
    for i in range(gh):
        for j in range(gw):
            total = 0.0
            for a in range(bh):
                for b in range(bw):
                    total += mask[i * bh + a, j * bw + b]
            out[i, j] = total / (bh * bw)
    return out


def bce_oracle(pred, target, eps=1e-7):
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    total = 0.0
    n = 0
    for pi, ti in zip(p.ravel(), t.ravel()):
        total += -(ti * np.log(pi) + (1.0 - ti) * np.log(1.0 - pi))
        n += 1
    return total / n
