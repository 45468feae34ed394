"""Brute-force reference computations, written voxel by voxel with plain loops.

Nothing here imports the package's numerical code, so these stay
independent of the vectorised paths they check.
"""

import itertools
import math

import numpy as np


def trilinear_at(vol, x):
    """8-corner weighted sum at continuous coordinate ``x`` with border clamping."""
    lo, hi, frac = [], [], []
    for a in range(3):
        s = vol.shape[a]
        xa = min(max(float(x[a]), 0.0), s - 1.0)
        i0 = int(math.floor(xa))
        lo.append(i0)
        hi.append(min(i0 + 1, s - 1))
        frac.append(xa - i0)
    total = 0.0
    for bits in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for a, b in enumerate(bits):
            w *= frac[a] if b else 1.0 - frac[a]
            idx.append(hi[a] if b else lo[a])
        total += w * float(vol[tuple(idx)])
    return total


def warp_oracle(vol, u):
    out = np.zeros(vol.shape)
    for p in np.ndindex(vol.shape):
        out[p] = trilinear_at(vol, [p[a] + u[(a, *p)] for a in range(3)])
    return out


def nearest_oracle(labels, u):
    out = np.zeros_like(labels)
    for p in np.ndindex(labels.shape):
        idx = []
        for a in range(3):
            x = p[a] + float(u[(a, *p)])
            r = int(math.copysign(math.floor(abs(x) + 0.5), x))
            idx.append(min(max(r, 0), labels.shape[a] - 1))
        out[p] = labels[tuple(idx)]
    return out


def upsample_field_oracle(u, shape):
    """Fine voxel j reads the coarse grid at j / 2; displacements doubled."""
    out = np.zeros((3, *shape))
    for c in range(3):
        for j in np.ndindex(*shape):
            out[(c, *j)] = 2.0 * trilinear_at(u[c], [ja / 2.0 for ja in j])
    return out


def resample_oracle(vol, target):
    """Corner-aligned resampling: output index j maps to j * (s - 1) / (t - 1)."""
    out = np.zeros(target)
    for j in np.ndindex(*target):
        x = [j[a] * (vol.shape[a] - 1) / (target[a] - 1) for a in range(3)]
        out[j] = trilinear_at(vol, x)
    return out


def nlcc_oracle(a, b, window, eps):
    h = window // 2
    pa = np.pad(a.astype(np.float64), h)
    pb = np.pad(b.astype(np.float64), h)
    n = window**3
    total = 0.0
    for p in np.ndindex(a.shape):
        sl = tuple(slice(p[k], p[k] + window) for k in range(3))
        wa, wb = pa[sl].ravel(), pb[sl].ravel()
        ma, mb = wa.sum() / n, wb.sum() / n
        cross = sum((x - ma) * (y - mb) for x, y in zip(wa, wb))
        va = sum((x - ma) ** 2 for x in wa)
        vb = sum((y - mb) ** 2 for y in wb)
        total += cross * cross / (va * vb + eps)
    return -total / a.size


def smoothness_oracle(u):
    shape = u.shape[1:]
    total = 0.0
    for c in range(3):
        for p in np.ndindex(*shape):
            for d in range(3):
                q = list(p)
                q[d] += 1
                if q[d] < shape[d]:
                    total += (float(u[(c, *q)]) - float(u[(c, *p)])) ** 2
    return total / (9 * int(np.prod(shape)))


def conv3x3x3_oracle(x, weight, bias):
    """Zero-padded 'same' convolution of a (C, D, H, W) array."""
    c_in, *shape = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((weight.shape[0], *shape))
    for o in range(weight.shape[0]):
        for p in np.ndindex(*shape):
            acc = float(bias[o])
            for c in range(c_in):
                for k in np.ndindex(3, 3, 3):
                    acc += float(weight[(o, c, *k)]) * float(xp[c, p[0] + k[0], p[1] + k[1], p[2] + k[2]])
            out[(o, *p)] = acc
    return out


def dice_oracle(a, b, r):
    na = sum(1 for v in a.ravel() if v == r)
    nb = sum(1 for v in b.ravel() if v == r)
    both = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x == r and y == r)
    return 1.0 if na + nb == 0 else 2.0 * both / (na + nb)
