"""Compiled inner loops for the velocity-space operators.

Everything here works on plain arrays so the public modules can stay in
numpy.  The kernel of the linearized collision operator is written in the
Carleman form

    K(v, w) = 2 k_g(v, w) - k_1(v, w)

    k_1(v, w) = 2 pi C |v - w|^g sqrt(mu(v)) sqrt(mu(w))
    k_g(v, w) = (2 C / r) (2 pi)^(-3/2) exp(-((v.n)^2 + (w.n)^2) / 4) I(r, p)

with r = |w - v|, n = (w - v) / r, p = |v - (v.n) n| and I(r, p) the
integral of (r^2 + |y|^2)^((g-1)/2) exp(-|p + y|^2 / 2) over the plane
orthogonal to n.  I is split into an analytic singular part and a bounded
remainder that is tabulated on a uniform (r, p) grid.
"""
import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi
MU_NORM = (2.0 * math.pi) ** -1.5


@njit(cache=True)
def singular_part(r, gamma):
    # int_0^1 (r^2 + s^2)^((gamma-1)/2) s ds
    if abs(gamma + 1.0) < 1e-12:
        return 0.5 * math.log((1.0 + r * r) / (r * r))
    e = 0.5 * (gamma + 1.0)
    return ((1.0 + r * r) ** e - (r * r) ** e) / (gamma + 1.0)


@njit(cache=True)
def _lagrange_weights(x, out):
    # 4-point Lagrange weights on nodes -1, 0, 1, 2 at offset x
    out[0] = -x * (x - 1.0) * (x - 2.0) / 6.0
    out[1] = (x + 1.0) * (x - 1.0) * (x - 2.0) / 2.0
    out[2] = -(x + 1.0) * x * (x - 2.0) / 2.0
    out[3] = (x + 1.0) * x * (x - 1.0) / 6.0


@njit(cache=True)
def table_lookup(table, dr, dp, r, p):
    """Cubic interpolation of a table sampled at (i*dr, j*dp), even in p."""
    nr, npp = table.shape
    sr = r / dr
    i = int(math.floor(sr))
    if i < 1:
        i = 1
    if i > nr - 3:
        i = nr - 3
    xr = sr - i
    if xr > 2.0:
        xr = 2.0
    sp = p / dp
    j = int(math.floor(sp))
    if j > npp - 3:
        j = npp - 3
    xp = sp - j
    if xp > 2.0:
        xp = 2.0
    wr = np.empty(4)
    wp = np.empty(4)
    _lagrange_weights(xr, wr)
    _lagrange_weights(xp, wp)
    acc = 0.0
    for a in range(4):
        ia = i - 1 + a
        row = 0.0
        for b in range(4):
            jb = abs(j - 1 + b)
            row += wp[b] * table[ia, jb]
        acc += wr[a] * row
    return acc


@njit(cache=True)
def plane_integral(r, p, gamma, table, dr, dp):
    if gamma == 1.0:
        return TWO_PI
    return TWO_PI * (math.exp(-0.5 * p * p) * singular_part(r, gamma)
                     + table_lookup(table, dr, dp, r, p))


@njit(cache=True)
def kernel_value(v0, v1, v2, w0, w1, w2, gamma, amp, table, dr, dp):
    d0 = w0 - v0
    d1 = w1 - v1
    d2 = w2 - v2
    r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    vn = (v0 * d0 + v1 * d1 + v2 * d2) / r
    wn = vn + r
    vv = v0 * v0 + v1 * v1 + v2 * v2
    ww = w0 * w0 + w1 * w1 + w2 * w2
    p2 = vv - vn * vn
    if p2 < 0.0:
        p2 = 0.0
    ii = plane_integral(r, math.sqrt(p2), gamma, table, dr, dp)
    kg = 2.0 * amp / r * MU_NORM * math.exp(-0.25 * (vn * vn + wn * wn)) * ii
    k1 = TWO_PI * amp * r ** gamma * MU_NORM * math.exp(-0.25 * (vv + ww))
    return 2.0 * kg - k1


@njit(cache=True)
def fill_kernel(nodes, h3, gamma, amp, table, dr, dp, out, row0, row1):
    n = nodes.shape[0]
    for i in range(row0, row1):
        v0, v1, v2 = nodes[i, 0], nodes[i, 1], nodes[i, 2]
        for j in range(n):
            if j == i:
                continue
            out[i - row0, j] = h3 * kernel_value(v0, v1, v2, nodes[j, 0], nodes[j, 1],
                                                 nodes[j, 2], gamma, amp, table, dr, dp)


@njit(cache=True)
def cell_kernel(nodes, offsets, qw, gamma, amp, table, dr, dp):
    n = nodes.shape[0]
    out = np.zeros(n)
    for i in range(n):
        v0, v1, v2 = nodes[i, 0], nodes[i, 1], nodes[i, 2]
        acc = 0.0
        for q in range(offsets.shape[0]):
            acc += qw[q] * kernel_value(v0, v1, v2, v0 + offsets[q, 0], v1 + offsets[q, 1],
                                        v2 + offsets[q, 2], gamma, amp, table, dr, dp)
        out[i] = acc
    return out


@njit(cache=True)
def relative_speed_moment(points, nodes, h3, h, gamma, centre_weight, laplace_weight):
    """Lattice quadrature of int |v - u|^gamma mu(u) du.

    The node lattice is translated so that v itself is a lattice point.
    That point gets ``centre_weight`` times mu(v) plus ``laplace_weight``
    times the Laplacian of mu at v (the first two corrections of the
    punctured rule); every other lattice point has the plain weight h^3.
    At grid nodes the translation is zero.
    """
    m = points.shape[0]
    n = nodes.shape[0]
    out = np.zeros(m)
    lo = nodes[0, 0]
    for a in range(m):
        p0, p1, p2 = points[a, 0], points[a, 1], points[a, 2]
        s0 = p0 - (lo + h * round((p0 - lo) / h))
        s1 = p1 - (lo + h * round((p1 - lo) / h))
        s2 = p2 - (lo + h * round((p2 - lo) / h))
        acc = 0.0
        for j in range(n):
            u0 = nodes[j, 0] + s0
            u1 = nodes[j, 1] + s1
            u2 = nodes[j, 2] + s2
            d0 = p0 - u0
            d1 = p1 - u1
            d2 = p2 - u2
            r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if r < 1e-9 * h:
                continue
            acc += h3 * r ** gamma * MU_NORM * math.exp(-0.5 * (u0 * u0 + u1 * u1 + u2 * u2))
        pp = p0 * p0 + p1 * p1 + p2 * p2
        acc += (centre_weight + laplace_weight * (pp - 3.0)) * MU_NORM * math.exp(-0.5 * pp)
        out[a] = acc
    return out


@njit(cache=True)
def _stencil(x, lo, h, nax, idx, wt):
    s = (x - lo) / h
    i = int(math.floor(s))
    if i < 0:
        i = 0
    if i > nax - 2:
        i = nax - 2
    t = s - i
    if t < 0.0:
        t = 0.0
    if t > 1.0:
        t = 1.0
    idx[0] = i
    idx[1] = i + 1
    wt[0] = 1.0 - t
    wt[1] = t


@njit(cache=True)
def _trilinear(hT, ix, wx, iy, wy, iz, wz, nax, acc):
    """acc[m] = trilinear interpolant of hT[:, m] (node-major storage)."""
    nprof = acc.shape[0]
    for m in range(nprof):
        acc[m] = 0.0
    for a in range(2):
        for b in range(2):
            wab = wx[a] * wy[b]
            base = (ix[a] * nax + iy[b]) * nax
            for c in range(2):
                w = wab * wz[c]
                if w == 0.0:
                    continue
                row = base + iz[c]
                for m in range(nprof):
                    acc[m] += w * hT[row, m]


@njit(cache=True)
def gamma_quadrature(hf, hg, nodes, mu, h3, lo, h, nax, gamma, amp, cos_nodes,
                     cos_weights, n_azimuth):
    """Gain minus loss of Gamma(f, g) for a batch of profiles.

    hf, hg hold f / sqrt(mu) and g / sqrt(mu) on the nodes, one profile per
    column (node-major, so the batch is contiguous).  Only the upper hemisphere of omega (relative to v - u) is visited;
    omega and -omega give the same post-collision pair so its weight is
    doubled.  The returned array still has to be multiplied by sqrt(mu).
    """
    nprof = hf.shape[1]
    n = nodes.shape[0]
    out = np.zeros((n, nprof))
    tf = np.empty(nprof)
    tg = np.empty(nprof)
    ncos = cos_nodes.shape[0]
    dphi = 2.0 * math.pi / n_azimuth
    cphi = np.empty(n_azimuth)
    sphi = np.empty(n_azimuth)
    for k in range(n_azimuth):
        cphi[k] = math.cos((k + 0.5) * dphi)
        sphi[k] = math.sin((k + 0.5) * dphi)
    ang = 0.0
    for c in range(ncos):
        ang += 2.0 * cos_weights[c] * cos_nodes[c] * dphi * n_azimuth
    ix = np.empty(2, np.int64)
    iy = np.empty(2, np.int64)
    iz = np.empty(2, np.int64)
    jx = np.empty(2, np.int64)
    jy = np.empty(2, np.int64)
    jz = np.empty(2, np.int64)
    wx = np.empty(2)
    wy = np.empty(2)
    wz = np.empty(2)
    ux = np.empty(2)
    uy = np.empty(2)
    uz = np.empty(2)
    gain = np.empty(nprof)
    for i in range(n):
        v0, v1, v2 = nodes[i, 0], nodes[i, 1], nodes[i, 2]
        for j in range(n):
            if j == i:
                continue
            u0, u1, u2 = nodes[j, 0], nodes[j, 1], nodes[j, 2]
            g0 = v0 - u0
            g1 = v1 - u1
            g2 = v2 - u2
            gn = math.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
            n0 = g0 / gn
            n1 = g1 / gn
            n2 = g2 / gn
            # orthonormal frame around the relative velocity
            if abs(n0) < 0.9:
                a0, a1, a2 = 1.0, 0.0, 0.0
            else:
                a0, a1, a2 = 0.0, 1.0, 0.0
            dot = a0 * n0 + a1 * n1 + a2 * n2
            e0 = a0 - dot * n0
            e1 = a1 - dot * n1
            e2 = a2 - dot * n2
            en = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            e0 /= en
            e1 /= en
            e2 /= en
            f0 = n1 * e2 - n2 * e1
            f1 = n2 * e0 - n0 * e2
            f2 = n0 * e1 - n1 * e0
            scale = h3 * mu[j] * amp * gn ** gamma
            for m in range(nprof):
                gain[m] = 0.0
            for c in range(ncos):
                ct = cos_nodes[c]
                st = math.sqrt(1.0 - ct * ct)
                wc = 2.0 * cos_weights[c] * ct * dphi
                for k in range(n_azimuth):
                    o0 = ct * n0 + st * (cphi[k] * e0 + sphi[k] * f0)
                    o1 = ct * n1 + st * (cphi[k] * e1 + sphi[k] * f1)
                    o2 = ct * n2 + st * (cphi[k] * e2 + sphi[k] * f2)
                    pr = gn * ct
                    _stencil(v0 - pr * o0, lo, h, nax, ix, wx)
                    _stencil(v1 - pr * o1, lo, h, nax, iy, wy)
                    _stencil(v2 - pr * o2, lo, h, nax, iz, wz)
                    _stencil(u0 + pr * o0, lo, h, nax, jx, ux)
                    _stencil(u1 + pr * o1, lo, h, nax, jy, uy)
                    _stencil(u2 + pr * o2, lo, h, nax, jz, uz)
                    _trilinear(hf, ix, wx, iy, wy, iz, wz, nax, tf)
                    _trilinear(hg, jx, ux, jy, uy, jz, uz, nax, tg)
                    for m in range(nprof):
                        gain[m] += wc * tf[m] * tg[m]
            for m in range(nprof):
                out[i, m] += scale * (gain[m] - ang * hf[i, m] * hg[j, m])
    return out
