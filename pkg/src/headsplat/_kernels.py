"""Numba kernels for tile-based EWA splatting and its analytic backward pass.

All arrays are float64.  Per-Gaussian work and per-tile work are parallel
loops with disjoint writes; every reduction across tiles happens in a
sequential loop in a fixed order, so results do not depend on thread count.
"""

import math
import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip the TBB probe; workqueue is always available
    numba.config.THREADING_LAYER = "workqueue"

TILE = 16
ALPHA_MAX = 0.999
T_MIN = 1e-4
# Footprint cut at the 3 sigma ellipse, the extent used for tile binning.  With
# p the Gaussian exponent and e = exp(p_min) the kernel is
#     (exp(p) - e (1 + p - p_min)) / (1 - e (1 - p_min))
# which is 1 at the centre and reaches zero with zero slope at the cut, so the
# truncation adds no jump or kink for finite differences to trip over.
SIGMA_CUT = 3.0
POWER_MIN = -0.5 * SIGMA_CUT * SIGMA_CUT
EXP_CUT = math.exp(POWER_MIN)
CUT_NORM = 1.0 / (1.0 - EXP_CUT * (1.0 - POWER_MIN))

VISIBLE = 0
CULLED_NEAR = 1
CULLED_OFFSCREEN = 2
SKIPPED_SINGULAR = 3


@njit(cache=True, inline="always")
def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@njit(cache=True, inline="always")
def _quat_rot(w, x, y, z, R):
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(cache=True, inline="always")
def _mm(A, B):
    # small dense products; explicit loops beat BLAS calls at this size
    n, k = A.shape
    m = B.shape[1]
    C = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += A[i, l] * B[l, j]
            C[i, j] = acc
    return C


@njit(cache=True, inline="always")
def _mmT(A, B):
    # A @ B.T
    n, k = A.shape
    m = B.shape[0]
    C = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += A[i, l] * B[j, l]
            C[i, j] = acc
    return C


@njit(cache=True, inline="always")
def _mTm(A, B):
    # A.T @ B
    k, n = A.shape
    m = B.shape[1]
    C = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += A[l, i] * B[l, j]
            C[i, j] = acc
    return C


@njit(cache=True, parallel=True)
def preprocess(params, Rwc, tcw, fx, fy, cx, cy, width, height, near, blur):
    """Project every Gaussian to screen space.

    Returns mean2d (N,2), cov2d (N,3 as A,B,C), conic (N,3 as a,b,c),
    depth (N), opacity (N), color (N,3), tile rect (N,4 as x0,y0,x1,y1
    inclusive) and a status code per Gaussian.
    """
    n = params.shape[0]
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    opac = np.zeros(n)
    color = np.zeros((n, 3))
    rect = np.zeros((n, 4), dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    for i in prange(n):
        px = params[i, 6]
        py = params[i, 7]
        pz = params[i, 8]
        x = Rwc[0, 0] * px + Rwc[0, 1] * py + Rwc[0, 2] * pz + tcw[0]
        y = Rwc[1, 0] * px + Rwc[1, 1] * py + Rwc[1, 2] * pz + tcw[1]
        z = Rwc[2, 0] * px + Rwc[2, 1] * py + Rwc[2, 2] * pz + tcw[2]
        depth[i] = -z
        if not (-z > near):
            status[i] = CULLED_NEAR
            continue
        qw = params[i, 9]
        qx = params[i, 10]
        qy = params[i, 11]
        qz = params[i, 12]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        R = np.empty((3, 3))
        if not (qn > 0.0) or not math.isfinite(qn):
            status[i] = SKIPPED_SINGULAR
            continue
        _quat_rot(qw / qn, qx / qn, qy / qn, qz / qn, R)
        s0 = math.exp(params[i, 3])
        s1 = math.exp(params[i, 4])
        s2 = math.exp(params[i, 5])
        # Sigma = (R S)(R S)^T, then camera-space V = Rwc Sigma Rwc^T
        M = np.empty((3, 3))
        for r in range(3):
            M[r, 0] = R[r, 0] * s0
            M[r, 1] = R[r, 1] * s1
            M[r, 2] = R[r, 2] * s2
        RM = _mm(Rwc, M)
        V = _mmT(RM, RM)
        j00 = -fx / z
        j02 = fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        # J V J^T with J = [[j00, 0, j02], [0, j11, j12]]
        a0 = j00 * V[0, 0] + j02 * V[2, 0]
        a1 = j00 * V[0, 1] + j02 * V[2, 1]
        a2 = j00 * V[0, 2] + j02 * V[2, 2]
        b1 = j11 * V[1, 1] + j12 * V[2, 1]
        b2 = j11 * V[1, 2] + j12 * V[2, 2]
        A = a0 * j00 + a2 * j02 + blur
        B = a1 * j11 + a2 * j12
        C = b1 * j11 + b2 * j12 + blur
        det = A * C - B * B
        if not (det > 1e-12) or not math.isfinite(det):
            status[i] = SKIPPED_SINGULAR
            continue
        u = cx - fx * x / z
        v = cy + fy * y / z
        mid = 0.5 * (A + C)
        lam = mid + math.sqrt(max(mid * mid - det, 0.0))
        rad = SIGMA_CUT * math.sqrt(lam)
        umin = (u - rad) / TILE
        umax = (u + rad) / TILE
        vmin = (v - rad) / TILE
        vmax = (v + rad) / TILE
        if umax < 0.0 or vmax < 0.0 or umin >= tiles_x or vmin >= tiles_y:
            status[i] = CULLED_OFFSCREEN
            continue
        rect[i, 0] = max(0, int(math.floor(umin)))
        rect[i, 1] = max(0, int(math.floor(vmin)))
        rect[i, 2] = min(tiles_x - 1, int(math.floor(umax)))
        rect[i, 3] = min(tiles_y - 1, int(math.floor(vmax)))
        mean2d[i, 0] = u
        mean2d[i, 1] = v
        cov2d[i, 0] = A
        cov2d[i, 1] = B
        cov2d[i, 2] = C
        conic[i, 0] = C / det
        conic[i, 1] = -B / det
        conic[i, 2] = A / det
        opac[i] = _sigmoid(params[i, 13])
        color[i, 0] = _sigmoid(params[i, 0])
        color[i, 1] = _sigmoid(params[i, 1])
        color[i, 2] = _sigmoid(params[i, 2])
    return mean2d, cov2d, conic, depth, opac, color, rect, status


@njit(cache=True)
def bin_tiles(order, rect, status, n_tiles_x, n_tiles_y):
    """Per-tile splat lists, each in the global front-to-back `order`."""
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        if status[i] != VISIBLE:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    ranges = np.cumsum(counts)
    fill = ranges[:-1].copy()
    point_list = np.empty(ranges[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        if status[i] != VISIBLE:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                t = ty * n_tiles_x + tx
                point_list[fill[t]] = i
                fill[t] += 1
    return ranges, point_list


@njit(cache=True, parallel=True)
def rasterize(ranges, point_list, mean2d, conic, opac, color, bg, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    image = np.zeros((height, width, 3))
    final_T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for t in prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t]
        end = ranges[t + 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                fx_ = px + 0.5
                fy_ = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = 0
                for k in range(start, end):
                    i = point_list[k]
                    dx = fx_ - mean2d[i, 0]
                    dy = fy_ - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) \
                        - conic[i, 1] * dx * dy
                    last = k - start + 1
                    if power > 0.0 or power < POWER_MIN:
                        continue
                    G = (math.exp(power) - EXP_CUT * (1.0 + power - POWER_MIN)) * CUT_NORM
                    alpha = min(ALPHA_MAX, opac[i] * G)
                    w = alpha * T
                    r += color[i, 0] * w
                    g += color[i, 1] * w
                    b += color[i, 2] * w
                    T *= 1.0 - alpha
                    if T < T_MIN:
                        break
                image[py, px, 0] = r + T * bg[0]
                image[py, px, 1] = g + T * bg[1]
                image[py, px, 2] = b + T * bg[2]
                final_T[py, px] = T
                n_contrib[py, px] = last
    return image, final_T, n_contrib


@njit(cache=True, parallel=True)
def rasterize_backward(ranges, point_list, mean2d, conic, opac, color, bg,
                       final_T, n_contrib, grad_image, width, height):
    """Gradients per (tile, splat) pair.

    Columns: d mean u, d mean v, d conic a, d conic b, d conic c,
    d opacity, d color r, g, b (all w.r.t. activated quantities).
    Transmittance is recovered back to front by dividing out (1 - alpha).
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    pair_grad = np.zeros((point_list.shape[0], 9))
    for t in prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                gr = grad_image[py, px, 0]
                gg = grad_image[py, px, 1]
                gb = grad_image[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                fx_ = px + 0.5
                fy_ = py + 0.5
                T = final_T[py, px]
                # colour composited behind the current splat, per unit transmittance
                sr = bg[0]
                sg = bg[1]
                sb = bg[2]
                for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    i = point_list[k]
                    dx = fx_ - mean2d[i, 0]
                    dy = fy_ - mean2d[i, 1]
                    ca = conic[i, 0]
                    cb = conic[i, 1]
                    cc = conic[i, 2]
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power > 0.0 or power < POWER_MIN:
                        continue
                    E = math.exp(power)
                    G = (E - EXP_CUT * (1.0 + power - POWER_MIN)) * CUT_NORM
                    raw = opac[i] * G
                    alpha = min(ALPHA_MAX, raw)
                    T = T / (1.0 - alpha)
                    cr = color[i, 0]
                    cg = color[i, 1]
                    cbl = color[i, 2]
                    w = alpha * T
                    pair_grad[k, 6] += w * gr
                    pair_grad[k, 7] += w * gg
                    pair_grad[k, 8] += w * gb
                    d_alpha = T * ((cr - sr) * gr + (cg - sg) * gg + (cbl - sb) * gb)
                    sr = cr * alpha + sr * (1.0 - alpha)
                    sg = cg * alpha + sg * (1.0 - alpha)
                    sb = cbl * alpha + sb * (1.0 - alpha)
                    if raw >= ALPHA_MAX:
                        continue
                    pair_grad[k, 5] += G * d_alpha
                    d_power = opac[i] * (E - EXP_CUT) * CUT_NORM * d_alpha
                    pair_grad[k, 0] += d_power * (ca * dx + cb * dy)
                    pair_grad[k, 1] += d_power * (cb * dx + cc * dy)
                    pair_grad[k, 2] += -0.5 * d_power * dx * dx
                    pair_grad[k, 3] += -d_power * dx * dy
                    pair_grad[k, 4] += -0.5 * d_power * dy * dy
    return pair_grad


@njit(cache=True)
def reduce_pairs(point_list, pair_grad, n):
    out = np.zeros((n, 9))
    for k in range(point_list.shape[0]):
        i = point_list[k]
        for c in range(9):
            out[i, c] += pair_grad[k, c]
    return out


@njit(cache=True, parallel=True)
def preprocess_backward(params, Rwc, tcw, fx, fy, status, conic, opac, color, grad2d):
    """Chain screen-space gradients back to the 14 pre-activation channels."""
    n = params.shape[0]
    out = np.zeros((n, 14))
    for i in prange(n):
        if status[i] != VISIBLE:
            continue
        # colour and opacity through their sigmoids
        for c in range(3):
            out[i, c] = grad2d[i, 6 + c] * color[i, c] * (1.0 - color[i, c])
        out[i, 13] = grad2d[i, 5] * opac[i] * (1.0 - opac[i])

        px = params[i, 6]
        py = params[i, 7]
        pz = params[i, 8]
        x = Rwc[0, 0] * px + Rwc[0, 1] * py + Rwc[0, 2] * pz + tcw[0]
        y = Rwc[1, 0] * px + Rwc[1, 1] * py + Rwc[1, 2] * pz + tcw[1]
        z = Rwc[2, 0] * px + Rwc[2, 1] * py + Rwc[2, 2] * pz + tcw[2]
        qw = params[i, 9]
        qx = params[i, 10]
        qy = params[i, 11]
        qz = params[i, 12]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        w = qw / qn
        qx_ = qx / qn
        qy_ = qy / qn
        qz_ = qz / qn
        R = np.empty((3, 3))
        _quat_rot(w, qx_, qy_, qz_, R)
        s = np.empty(3)
        for c in range(3):
            s[c] = math.exp(params[i, 3 + c])
        M = np.empty((3, 3))
        for r in range(3):
            for c in range(3):
                M[r, c] = R[r, c] * s[c]
        RM = _mm(Rwc, M)
        V = _mmT(RM, RM)
        J = np.zeros((2, 3))
        J[0, 0] = -fx / z
        J[0, 2] = fx * x / (z * z)
        J[1, 1] = fy / z
        J[1, 2] = -fy * y / (z * z)

        # conic = inv(cov2d): dL/dcov = -conic . dL/dconic . conic (full matrices)
        Q = np.empty((2, 2))
        Q[0, 0] = conic[i, 0]
        Q[0, 1] = conic[i, 1]
        Q[1, 0] = conic[i, 1]
        Q[1, 1] = conic[i, 2]
        GQ = np.empty((2, 2))
        GQ[0, 0] = grad2d[i, 2]
        GQ[0, 1] = 0.5 * grad2d[i, 3]
        GQ[1, 0] = 0.5 * grad2d[i, 3]
        GQ[1, 1] = grad2d[i, 4]
        Gcov = -_mm(_mm(Q, GQ), Q)

        # cov2d = J V J^T + blur I
        dV = _mm(_mTm(J, Gcov), J)
        dJ = 2.0 * _mm(_mm(Gcov, J), V)
        dSigma = _mm(_mTm(Rwc, dV), Rwc)
        dM = 2.0 * _mm(dSigma, M)
        dR = np.empty((3, 3))
        for c in range(3):
            ds = dM[0, c] * R[0, c] + dM[1, c] * R[1, c] + dM[2, c] * R[2, c]
            out[i, 3 + c] = ds * s[c]
            for r in range(3):
                dR[r, c] = dM[r, c] * s[c]

        # rotation matrix w.r.t. the unit quaternion (w, x, y, z)
        X = qx_
        Y = qy_
        Z = qz_
        dw = 2.0 * (-Z * dR[0, 1] + Y * dR[0, 2] + Z * dR[1, 0]
                    - X * dR[1, 2] - Y * dR[2, 0] + X * dR[2, 1])
        dx = 2.0 * (Y * dR[0, 1] + Z * dR[0, 2] + Y * dR[1, 0] - 2.0 * X * dR[1, 1]
                    - w * dR[1, 2] + Z * dR[2, 0] + w * dR[2, 1] - 2.0 * X * dR[2, 2])
        dy = 2.0 * (-2.0 * Y * dR[0, 0] + X * dR[0, 1] + w * dR[0, 2] + X * dR[1, 0]
                    + Z * dR[1, 2] - w * dR[2, 0] + Z * dR[2, 1] - 2.0 * Y * dR[2, 2])
        dz = 2.0 * (-2.0 * Z * dR[0, 0] - w * dR[0, 1] + X * dR[0, 2] + w * dR[1, 0]
                    - 2.0 * Z * dR[1, 1] + Y * dR[1, 2] + X * dR[2, 0] + Y * dR[2, 1])
        # through the normalisation q / |q|: tangent-space projection
        dot = w * dw + X * dx + Y * dy + Z * dz
        out[i, 9] = (dw - w * dot) / qn
        out[i, 10] = (dx - X * dot) / qn
        out[i, 11] = (dy - Y * dot) / qn
        out[i, 12] = (dz - Z * dot) / qn

        # camera-space position: mean2d plus the Jacobian's dependence on it
        gu = grad2d[i, 0]
        gv = grad2d[i, 1]
        z2 = z * z
        z3 = z2 * z
        dpx = gu * (-fx / z) + dJ[0, 2] * fx / z2
        dpy = gv * (fy / z) + dJ[1, 2] * (-fy / z2)
        dpz = (gu * (fx * x / z2) + gv * (-fy * y / z2)
               + dJ[0, 0] * fx / z2 + dJ[0, 2] * (-2.0 * fx * x / z3)
               + dJ[1, 1] * (-fy / z2) + dJ[1, 2] * (2.0 * fy * y / z3))
        for c in range(3):
            out[i, 6 + c] = Rwc[0, c] * dpx + Rwc[1, c] * dpy + Rwc[2, c] * dpz
    return out
