"""Brute-force reference implementations used by the tests.

Everything here is written with explicit Python loops over plain floats so it
shares no code path with the vectorized library functions it checks.
"""
from __future__ import annotations

import math

import numpy as np
import torch


def loop_softmax(values: list[float]) -> list[float]:
    top = max(values)
    ex = [math.exp(v - top) for v in values]
    s = sum(ex)
    return [e / s for e in ex]


def loop_pseudo_queries(m, f):
    """m: (N, H, W), f: (D, H, W) -> (N, D)"""
    n, h, w = m.shape
    d = f.shape[0]
    out = np.zeros((n, d))
    for i in range(n):
        for k in range(d):
            acc = 0.0
            for r in range(h):
                for c in range(w):
                    acc += float(m[i, r, c]) * float(f[k, r, c])
            out[i, k] = acc
    return out


def loop_bu_argmax(m):
    """m: (N, H, W) -> (N, 2); first strict maximum in row-major order."""
    n, h, w = m.shape
    out = np.zeros((n, 2))
    for i in range(n):
        best, br, bc = -math.inf, 0, 0
        for r in range(h):
            for c in range(w):
                if float(m[i, r, c]) > best:
                    best, br, bc = float(m[i, r, c]), r, c
        out[i] = ((bc + 0.5) / w, (br + 0.5) / h)
    return out


def loop_td_points(q, f, temperature=1.0):
    """q: (N, D), f: (D, H, W) -> soft-argmax of scaled dot-product similarity."""
    n, d = q.shape
    _, h, w = f.shape
    out = np.zeros((n, 2))
    for i in range(n):
        sims = []
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for k in range(d):
                    acc += float(q[i, k]) * float(f[k, r, c])
                sims.append(acc / math.sqrt(d) / temperature)
        p = loop_softmax(sims)
        x = y = 0.0
        for idx, pv in enumerate(p):
            r, c = divmod(idx, w)
            x += pv * (c + 0.5) / w
            y += pv * (r + 0.5) / h
        out[i] = (x, y)
    return out


def loop_crop(f, point, size):
    """Window of f (C, H, W) centred on the grid cell containing ``point``."""
    c_, h, w = f.shape
    col = min(max(int(math.floor(float(point[0]) * w)), 0), w - 1)
    row = min(max(int(math.floor(float(point[1]) * h)), 0), h - 1)
    r0, c0 = row - size // 2, col - size // 2
    out = np.zeros((c_, size, size))
    for ch in range(c_):
        for i in range(size):
            for j in range(size):
                r, c = r0 + i, c0 + j
                if 0 <= r < h and 0 <= c < w:
                    out[ch, i, j] = float(f[ch, r, c])
    return out


def loop_head_similarity(q_a, q_bu):
    """q_a: (T, N_TD, D), q_bu: (T, N_BU, D) -> (N_TD,) mean over t of max cosine."""
    t_, n, d = q_a.shape
    m = q_bu.shape[1]
    out = np.zeros(n)
    for head in range(n):
        total = 0.0
        for t in range(t_):
            best = -math.inf
            na = math.sqrt(sum(float(q_a[t, head, k]) ** 2 for k in range(d)))
            for j in range(m):
                nb = math.sqrt(sum(float(q_bu[t, j, k]) ** 2 for k in range(d)))
                dot = sum(float(q_a[t, head, k]) * float(q_bu[t, j, k]) for k in range(d))
                best = max(best, dot / (na * nb))
            total += best
        out[head] = total / t_
    return out


def loop_gaussian_heatmap(point, h, w, sigma):
    vals = []
    for r in range(h):
        for c in range(w):
            dx = (c + 0.5) / w - float(point[0])
            dy = (r + 0.5) / h - float(point[1])
            vals.append(math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)))
    s = sum(vals)
    return np.array([v / s for v in vals]).reshape(h, w)


def central_difference(fn, x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Gradient of scalar ``fn`` at float64 tensor ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn(x).detach())
        flat[i] = orig - eps
        down = float(fn(x).detach())
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float(torch.linalg.vector_norm(a - b))
    den = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)), 1e-12)
    return num / den
