import math

import numpy as np
import pytest

import cytran.tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def naive_conv2d(x, w, b, stride, padding, groups):
    """Explicit-loop cross-correlation, the reference for conv2d."""
    n, c, h, wd = x.shape
    co, cg, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    og = co // groups
    out = np.zeros((n, co, ho, wo))
    for ni in range(n):
        for o in range(co):
            grp = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(cg):
                        for a in range(k):
                            for bb in range(k):
                                acc += w[o, ci, a, bb] * xp[ni, grp * cg + ci, i * stride + a, j * stride + bb]
                    out[ni, o, i, j] = acc
    return out


def naive_transposed_conv2d(x, w, b, stride, padding, output_padding):
    """Scatter every input pixel times the kernel into the output, then crop."""
    n, c, h, wd = x.shape
    _, co, k, _ = w.shape
    hf = (h - 1) * stride + k + output_padding
    wf = (wd - 1) * stride + k + output_padding
    full = np.zeros((n, co, hf, wf))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    full[ni, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[ni, ci, i, j] * w[ci]
    out = full[:, :, padding : hf - padding, padding : wf - padding]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def naive_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Brute-force SSIM: explicit Gaussian-weighted moments in every valid window."""
    half = (size - 1) / 2
    w = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2)) for j in range(size)] for i in range(size)]
    total = sum(map(sum, w))
    w = [[v / total for v in row] for row in w]
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    for r in range(a.shape[0] - size + 1):
        for c in range(a.shape[1] - size + 1):
            ma = mb = 0.0
            for i in range(size):
                for j in range(size):
                    ma += w[i][j] * a[r + i, c + j]
                    mb += w[i][j] * b[r + i, c + j]
            va = vb = cov = 0.0
            for i in range(size):
                for j in range(size):
                    da, db = a[r + i, c + j] - ma, b[r + i, c + j] - mb
                    va += w[i][j] * da * da
                    vb += w[i][j] * db * db
                    cov += w[i][j] * da * db
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)
