"""Numba-compiled kernels: the hot per-pixel and per-labeling loops.

Every function here has a signature-identical pure-numpy twin in
`numpyimpl.py`; the active backend is chosen in `__init__.py` via the
SEMREFINE_NO_NUMBA environment flag. Keep the arithmetic expressions in the
two files literally identical so results agree across backends.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def rasterize(vertices, facets, normals, R, t, center, fx, fy, cx, cy, width, height, z_eps, cull):
    """Z-buffer triangle fill with perspective-correct barycentrics.

    Pixel (ix, iy) is sampled at (ix + 0.5, iy + 0.5). Pixels exactly on a
    shared edge are resolved by the top-left rule, so two facets never both
    claim such a pixel. Facets with any vertex behind the camera, degenerate
    normals, or (optionally) back-facing orientation are skipped.
    """
    depth = np.full((height, width), np.inf, np.float64)
    fid = np.full((height, width), -1, np.int32)
    bary = np.zeros((height, width, 3), np.float64)

    for f in range(facets.shape[0]):
        ia, ib, ic = facets[f, 0], facets[f, 1], facets[f, 2]
        nx, ny, nz = normals[f, 0], normals[f, 1], normals[f, 2]
        if nx == 0.0 and ny == 0.0 and nz == 0.0:
            continue

        ax, ay, az = vertices[ia, 0], vertices[ia, 1], vertices[ia, 2]
        bx, by, bz = vertices[ib, 0], vertices[ib, 1], vertices[ib, 2]
        cx_, cy_, cz = vertices[ic, 0], vertices[ic, 1], vertices[ic, 2]

        if cull:
            gx = (ax + bx + cx_) / 3.0 - center[0]
            gy = (ay + by + cy_) / 3.0 - center[1]
            gz = (az + bz + cz) / 3.0 - center[2]
            if nx * gx + ny * gy + nz * gz >= 0.0:
                continue

        za = R[2, 0] * ax + R[2, 1] * ay + R[2, 2] * az + t[2]
        zb = R[2, 0] * bx + R[2, 1] * by + R[2, 2] * bz + t[2]
        zc = R[2, 0] * cx_ + R[2, 1] * cy_ + R[2, 2] * cz + t[2]
        if za <= z_eps or zb <= z_eps or zc <= z_eps:
            continue

        ua = fx * (R[0, 0] * ax + R[0, 1] * ay + R[0, 2] * az + t[0]) / za + cx
        va = fy * (R[1, 0] * ax + R[1, 1] * ay + R[1, 2] * az + t[1]) / za + cy
        ub = fx * (R[0, 0] * bx + R[0, 1] * by + R[0, 2] * bz + t[0]) / zb + cx
        vb = fy * (R[1, 0] * bx + R[1, 1] * by + R[1, 2] * bz + t[1]) / zb + cy
        uc = fx * (R[0, 0] * cx_ + R[0, 1] * cy_ + R[0, 2] * cz + t[0]) / zc + cx
        vc = fy * (R[1, 0] * cx_ + R[1, 1] * cy_ + R[1, 2] * cz + t[1]) / zc + cy

        area2 = (ub - ua) * (vc - va) - (vb - va) * (uc - ua)
        if area2 == 0.0:
            continue
        o = 1.0 if area2 > 0.0 else -1.0
        aabs = area2 * o

        # Edge k is opposite vertex k; coefficients of w(p) = A*pu + B*pv + C.
        a0 = -o * (vc - vb)
        b0 = o * (uc - ub)
        c0 = o * ((vc - vb) * ub - (uc - ub) * vb)
        a1 = -o * (va - vc)
        b1 = o * (ua - uc)
        c1 = o * ((va - vc) * uc - (ua - uc) * vc)
        a2 = -o * (vb - va)
        b2 = o * (ub - ua)
        c2 = o * ((vb - va) * ua - (ub - ua) * va)
        # Effective edge direction is (B, -A): top edge has dv == 0 and du > 0,
        # a left edge has dv < 0.
        tl0 = a0 > 0.0 or (a0 == 0.0 and b0 > 0.0)
        tl1 = a1 > 0.0 or (a1 == 0.0 and b1 > 0.0)
        tl2 = a2 > 0.0 or (a2 == 0.0 and b2 > 0.0)

        umin = min(ua, min(ub, uc))
        umax = max(ua, max(ub, uc))
        vmin = min(va, min(vb, vc))
        vmax = max(va, max(vb, vc))
        px0 = int(math.ceil(umin - 0.5))
        px1 = int(math.floor(umax - 0.5))
        py0 = int(math.ceil(vmin - 0.5))
        py1 = int(math.floor(vmax - 0.5))
        if px0 < 0:
            px0 = 0
        if py0 < 0:
            py0 = 0
        if px1 > width - 1:
            px1 = width - 1
        if py1 > height - 1:
            py1 = height - 1

        for py in range(py0, py1 + 1):
            pv = py + 0.5
            for px in range(px0, px1 + 1):
                pu = px + 0.5
                w0 = a0 * pu + b0 * pv + c0
                w1 = a1 * pu + b1 * pv + c1
                w2 = a2 * pu + b2 * pv + c2
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if w0 == 0.0 and not tl0:
                    continue
                if w1 == 0.0 and not tl1:
                    continue
                if w2 == 0.0 and not tl2:
                    continue
                l0 = w0 / aabs
                l1 = w1 / aabs
                l2 = w2 / aabs
                invz = l0 / za + l1 / zb + l2 / zc
                z = 1.0 / invz
                if z < depth[py, px]:
                    depth[py, px] = z
                    fid[py, px] = f
                    bary[py, px, 0] = l0 / (za * invz)
                    bary[py, px, 1] = l1 / (zb * invz)
                    bary[py, px, 2] = l2 / (zc * invz)
    return depth, fid, bary


@njit(cache=True)
def _clip_halfplane(xs, ys, n, axis, sign, bound, oxs, oys):
    """Sutherland-Hodgman against one axis-aligned half-plane; returns new count."""
    m = 0
    for i in range(n):
        x0 = xs[i]
        y0 = ys[i]
        j = i + 1
        if j == n:
            j = 0
        x1 = xs[j]
        y1 = ys[j]
        c0 = x0 if axis == 0 else y0
        c1 = x1 if axis == 0 else y1
        in0 = (c0 - bound) * sign >= 0.0
        in1 = (c1 - bound) * sign >= 0.0
        if in0:
            oxs[m] = x0
            oys[m] = y0
            m += 1
        if in0 != in1:
            tt = (bound - c0) / (c1 - c0)
            oxs[m] = x0 + tt * (x1 - x0)
            oys[m] = y0 + tt * (y1 - y0)
            m += 1
    return m


@njit(cache=True)
def coverage_aa(vertices, facets, selected, normals, R, t, center, fx, fy, cx, cy, width, height, z_eps, cull):
    """Exact per-pixel area coverage of the selected facets (analytic antialiasing).

    Each facet contributes the exact area of its screen triangle clipped to
    each pixel square. Overlapping facets simply sum (no z-resolution), so the
    result is only meaningful for self-occlusion-free views; values are
    clamped to [0, 1].
    """
    cov = np.zeros((height, width), np.float64)
    xs = np.empty(16, np.float64)
    ys = np.empty(16, np.float64)
    txs = np.empty(16, np.float64)
    tys = np.empty(16, np.float64)

    for si in range(selected.shape[0]):
        f = selected[si]
        ia, ib, ic = facets[f, 0], facets[f, 1], facets[f, 2]
        nx, ny, nz = normals[f, 0], normals[f, 1], normals[f, 2]
        if nx == 0.0 and ny == 0.0 and nz == 0.0:
            continue
        ax, ay, az = vertices[ia, 0], vertices[ia, 1], vertices[ia, 2]
        bx, by, bz = vertices[ib, 0], vertices[ib, 1], vertices[ib, 2]
        cx_, cy_, cz = vertices[ic, 0], vertices[ic, 1], vertices[ic, 2]
        if cull:
            gx = (ax + bx + cx_) / 3.0 - center[0]
            gy = (ay + by + cy_) / 3.0 - center[1]
            gz = (az + bz + cz) / 3.0 - center[2]
            if nx * gx + ny * gy + nz * gz >= 0.0:
                continue
        za = R[2, 0] * ax + R[2, 1] * ay + R[2, 2] * az + t[2]
        zb = R[2, 0] * bx + R[2, 1] * by + R[2, 2] * bz + t[2]
        zc = R[2, 0] * cx_ + R[2, 1] * cy_ + R[2, 2] * cz + t[2]
        if za <= z_eps or zb <= z_eps or zc <= z_eps:
            continue
        ua = fx * (R[0, 0] * ax + R[0, 1] * ay + R[0, 2] * az + t[0]) / za + cx
        va = fy * (R[1, 0] * ax + R[1, 1] * ay + R[1, 2] * az + t[1]) / za + cy
        ub = fx * (R[0, 0] * bx + R[0, 1] * by + R[0, 2] * bz + t[0]) / zb + cx
        vb = fy * (R[1, 0] * bx + R[1, 1] * by + R[1, 2] * bz + t[1]) / zb + cy
        uc = fx * (R[0, 0] * cx_ + R[0, 1] * cy_ + R[0, 2] * cz + t[0]) / zc + cx
        vc = fy * (R[1, 0] * cx_ + R[1, 1] * cy_ + R[1, 2] * cz + t[1]) / zc + cy

        umin = min(ua, min(ub, uc))
        umax = max(ua, max(ub, uc))
        vmin = min(va, min(vb, vc))
        vmax = max(va, max(vb, vc))
        px0 = int(math.floor(umin))
        px1 = int(math.ceil(umax)) - 1
        py0 = int(math.floor(vmin))
        py1 = int(math.ceil(vmax)) - 1
        if px0 < 0:
            px0 = 0
        if py0 < 0:
            py0 = 0
        if px1 > width - 1:
            px1 = width - 1
        if py1 > height - 1:
            py1 = height - 1

        for py in range(py0, py1 + 1):
            for px in range(px0, px1 + 1):
                xs[0] = ua
                ys[0] = va
                xs[1] = ub
                ys[1] = vb
                xs[2] = uc
                ys[2] = vc
                n = 3
                n = _clip_halfplane(xs, ys, n, 0, 1.0, float(px), txs, tys)
                if n == 0:
                    continue
                n = _clip_halfplane(txs, tys, n, 0, -1.0, float(px + 1), xs, ys)
                if n == 0:
                    continue
                n = _clip_halfplane(xs, ys, n, 1, 1.0, float(py), txs, tys)
                if n == 0:
                    continue
                n = _clip_halfplane(txs, tys, n, 1, -1.0, float(py + 1), xs, ys)
                if n < 3:
                    continue
                area = 0.0
                for i in range(n):
                    j = i + 1
                    if j == n:
                        j = 0
                    area += xs[i] * ys[j] - xs[j] * ys[i]
                cov[py, px] += abs(area) * 0.5

    for py in range(height):
        for px in range(width):
            if cov[py, px] > 1.0:
                cov[py, px] = 1.0
    return cov


@njit(cache=True)
def _bilinear_with_grad(img, u, v):
    """Bilinear sample and the exact spatial derivative of the interpolant."""
    h, w = img.shape
    xf = u - 0.5
    yf = v - 0.5
    x0 = int(math.floor(xf))
    y0 = int(math.floor(yf))
    if x0 > w - 2:
        x0 = w - 2
    if x0 < 0:
        x0 = 0
    if y0 > h - 2:
        y0 = h - 2
    if y0 < 0:
        y0 = 0
    ax = xf - x0
    ay = yf - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    top = v00 + ax * (v01 - v00)
    bot = v10 + ax * (v11 - v10)
    val = top + ay * (bot - top)
    gu = (1.0 - ay) * (v01 - v00) + ay * (v11 - v10)
    gv = bot - top
    return val, gu, gv


@njit(cache=True)
def reproject(depth_i, fid_i, rit_i, ti, fxi, fyi, cxi, cyi,
              image_j, fid_j, rj, tj, fxj, fyj, cxj, cyj, center_j,
              normals, plane_off, z_eps, rel_tol):
    """Warp image_j into view i through the surface encoded by view i's buffers.

    Occlusion is tested against view j's facet-id buffer: the 3D point must
    hit the plane of the facet seen at its projection in view j within a
    relative ray-depth tolerance. Returns (values, valid, u_j, v_j).
    """
    h, w = depth_i.shape
    hj, wj = image_j.shape
    out = np.zeros((h, w), np.float64)
    valid = np.zeros((h, w), np.uint8)
    xu = np.full((h, w), -1.0, np.float64)
    xv = np.full((h, w), -1.0, np.float64)
    for iy in range(h):
        for ix in range(w):
            if fid_i[iy, ix] < 0:
                continue
            z = depth_i[iy, ix]
            xc = (ix + 0.5 - cxi) / fxi * z
            yc = (iy + 0.5 - cyi) / fyi * z
            sx = xc - ti[0]
            sy = yc - ti[1]
            sz = z - ti[2]
            px_ = rit_i[0, 0] * sx + rit_i[0, 1] * sy + rit_i[0, 2] * sz
            py_ = rit_i[1, 0] * sx + rit_i[1, 1] * sy + rit_i[1, 2] * sz
            pz_ = rit_i[2, 0] * sx + rit_i[2, 1] * sy + rit_i[2, 2] * sz
            qx = rj[0, 0] * px_ + rj[0, 1] * py_ + rj[0, 2] * pz_ + tj[0]
            qy = rj[1, 0] * px_ + rj[1, 1] * py_ + rj[1, 2] * pz_ + tj[1]
            qz = rj[2, 0] * px_ + rj[2, 1] * py_ + rj[2, 2] * pz_ + tj[2]
            if qz <= z_eps:
                continue
            uj = fxj * qx / qz + cxj
            vj = fyj * qy / qz + cyj
            pxj = int(math.floor(uj))
            pyj = int(math.floor(vj))
            if pxj < 0 or pxj >= wj or pyj < 0 or pyj >= hj:
                continue
            fj = fid_j[pyj, pxj]
            if fj < 0:
                continue
            nx, ny, nz = normals[fj, 0], normals[fj, 1], normals[fj, 2]
            dirx = px_ - center_j[0]
            diry = py_ - center_j[1]
            dirz = pz_ - center_j[2]
            den = nx * dirx + ny * diry + nz * dirz
            if den == 0.0:
                continue
            ts = (plane_off[fj] - (nx * center_j[0] + ny * center_j[1] + nz * center_j[2])) / den
            if abs(ts - 1.0) > rel_tol:
                continue
            if uj < 0.5 or uj > wj - 0.5 or vj < 0.5 or vj > hj - 0.5:
                continue
            val, gu, gv = _bilinear_with_grad(image_j, uj, vj)
            out[iy, ix] = val
            valid[iy, ix] = 1
            xu[iy, ix] = uj
            xv[iy, ix] = vj
    return out, valid, xu, xv


@njit(cache=True)
def scatter_pair_gradient(dfield, fid, bary, depth, xu, xv,
                          rit_i, ti, fxi, fyi, cxi, cyi, center_i,
                          image_j, rj, tj, fxj, fyj,
                          facets, normals, grazing, grad, support):
    """Chain per-pixel flow through the moving-surface geometry (cross-view).

    dfield is dE/d(warped image value) per pixel. Each nonzero pixel
    contributes phi_k * dfield * (gradJ . dPi_j . d_i) / (n . d_i) * n to its
    facet's three vertices. Pixels with |n . d_i| below `grazing` are dropped.
    """
    h, w = dfield.shape
    for iy in range(h):
        for ix in range(w):
            dval = dfield[iy, ix]
            if dval == 0.0:
                continue
            f = fid[iy, ix]
            if f < 0:
                continue
            z = depth[iy, ix]
            xc = (ix + 0.5 - cxi) / fxi * z
            yc = (iy + 0.5 - cyi) / fyi * z
            sx = xc - ti[0]
            sy = yc - ti[1]
            sz = z - ti[2]
            px_ = rit_i[0, 0] * sx + rit_i[0, 1] * sy + rit_i[0, 2] * sz
            py_ = rit_i[1, 0] * sx + rit_i[1, 1] * sy + rit_i[1, 2] * sz
            pz_ = rit_i[2, 0] * sx + rit_i[2, 1] * sy + rit_i[2, 2] * sz
            dx = px_ - center_i[0]
            dy = py_ - center_i[1]
            dz = pz_ - center_i[2]
            dn = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= dn
            dy /= dn
            dz /= dn
            nx, ny, nz = normals[f, 0], normals[f, 1], normals[f, 2]
            a = nx * dx + ny * dy + nz * dz
            if abs(a) < grazing:
                continue
            val, gu, gv = _bilinear_with_grad(image_j, xu[iy, ix], xv[iy, ix])
            qx = rj[0, 0] * px_ + rj[0, 1] * py_ + rj[0, 2] * pz_ + tj[0]
            qy = rj[1, 0] * px_ + rj[1, 1] * py_ + rj[1, 2] * pz_ + tj[1]
            qz = rj[2, 0] * px_ + rj[2, 1] * py_ + rj[2, 2] * pz_ + tj[2]
            rx = rj[0, 0] * dx + rj[0, 1] * dy + rj[0, 2] * dz
            ry = rj[1, 0] * dx + rj[1, 1] * dy + rj[1, 2] * dz
            rz = rj[2, 0] * dx + rj[2, 1] * dy + rj[2, 2] * dz
            jx = fxj * (rx * qz - qx * rz) / (qz * qz)
            jy = fyj * (ry * qz - qy * rz) / (qz * qz)
            s = dval * (gu * jx + gv * jy) / a
            support[iy, ix] = 1
            for k in range(3):
                vi = facets[f, k]
                wk = bary[iy, ix, k] * s
                grad[vi, 0] += wk * nx
                grad[vi, 1] += wk * ny
                grad[vi, 2] += wk * nz


@njit(cache=True)
def icm_sweeps(unary, facet_neighbors, labels, cost_same, cost_diff, max_sweeps):
    """Iterated conditional modes, facet-index sweep order, smallest-label ties.

    Mutates `labels` in place; returns the number of sweeps performed.
    """
    m, nl = unary.shape
    sweeps = 0
    for _ in range(max_sweeps):
        changed = 0
        for f in range(m):
            best_l = 0
            best_c = np.inf
            for l in range(nl):
                c = unary[f, l]
                for k in range(3):
                    nb = facet_neighbors[f, k]
                    if nb >= 0:
                        if labels[nb] == l:
                            c += cost_same
                        else:
                            c += cost_diff
                if c < best_c:
                    best_c = c
                    best_l = l
            if best_l != labels[f]:
                labels[f] = best_l
                changed += 1
        sweeps += 1
        if changed == 0:
            break
    return sweeps


@njit(cache=True)
def bruteforce_labeling(unary, edges, cost_same, cost_diff):
    """Exact MRF minimum by lexicographic enumeration; first minimum wins."""
    m, nl = unary.shape
    cur = np.zeros(m, np.int64)
    best = np.zeros(m, np.int64)
    best_e = np.inf
    while True:
        e = 0.0
        for f in range(m):
            e += unary[f, cur[f]]
        for k in range(edges.shape[0]):
            if cur[edges[k, 0]] == cur[edges[k, 1]]:
                e += cost_same
            else:
                e += cost_diff
        if e < best_e:
            best_e = e
            for f in range(m):
                best[f] = cur[f]
        i = m - 1
        while i >= 0:
            cur[i] += 1
            if cur[i] < nl:
                break
            cur[i] = 0
            i -= 1
        if i < 0:
            break
    return best_e, best
