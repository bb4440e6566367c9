"""Pure-numpy fallbacks for the numba kernels (SEMREFINE_NO_NUMBA=1).

Same signatures and same arithmetic as `numbaimpl`, expressed with
vectorized numpy where that is possible without changing results.
Accumulation uses np.add.at in row-major pixel order so sums visit the same
sequence as the compiled loops.
"""

import math

import numpy as np


def _project_triple(vertices, facets, f, R, t, fx, fy, cx, cy):
    ia, ib, ic = facets[f]
    out = []
    for idx in (ia, ib, ic):
        x, y, z = vertices[idx]
        zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
        uc = fx * (R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]) / zc + cx
        vc = fy * (R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]) / zc + cy
        out.append((uc, vc, zc))
    return out


def rasterize(vertices, facets, normals, R, t, center, fx, fy, cx, cy, width, height, z_eps, cull):
    depth = np.full((height, width), np.inf, np.float64)
    fid = np.full((height, width), -1, np.int32)
    bary = np.zeros((height, width, 3), np.float64)

    for f in range(facets.shape[0]):
        nx, ny, nz = normals[f]
        if nx == 0.0 and ny == 0.0 and nz == 0.0:
            continue
        ia, ib, ic = facets[f]
        a = vertices[ia]
        b = vertices[ib]
        c = vertices[ic]
        if cull:
            g = (a + b + c) / 3.0 - center
            if nx * g[0] + ny * g[1] + nz * g[2] >= 0.0:
                continue
        tri = _project_triple(vertices, facets, f, R, t, fx, fy, cx, cy)
        (ua, va, za), (ub, vb, zb), (uc, vc, zc) = tri
        if za <= z_eps or zb <= z_eps or zc <= z_eps:
            continue
        area2 = (ub - ua) * (vc - va) - (vb - va) * (uc - ua)
        if area2 == 0.0:
            continue
        o = 1.0 if area2 > 0.0 else -1.0
        aabs = area2 * o

        a0 = -o * (vc - vb)
        b0 = o * (uc - ub)
        c0 = o * ((vc - vb) * ub - (uc - ub) * vb)
        a1 = -o * (va - vc)
        b1 = o * (ua - uc)
        c1 = o * ((va - vc) * uc - (ua - uc) * vc)
        a2 = -o * (vb - va)
        b2 = o * (ub - ua)
        c2 = o * ((vb - va) * ua - (ub - ua) * va)
        tl0 = a0 > 0.0 or (a0 == 0.0 and b0 > 0.0)
        tl1 = a1 > 0.0 or (a1 == 0.0 and b1 > 0.0)
        tl2 = a2 > 0.0 or (a2 == 0.0 and b2 > 0.0)

        px0 = max(0, int(math.ceil(min(ua, ub, uc) - 0.5)))
        px1 = min(width - 1, int(math.floor(max(ua, ub, uc) - 0.5)))
        py0 = max(0, int(math.ceil(min(va, vb, vc) - 0.5)))
        py1 = min(height - 1, int(math.floor(max(va, vb, vc) - 0.5)))
        if px1 < px0 or py1 < py0:
            continue

        pu = np.arange(px0, px1 + 1) + 0.5
        pv = (np.arange(py0, py1 + 1) + 0.5)[:, None]
        w0 = a0 * pu + b0 * pv + c0
        w1 = a1 * pu + b1 * pv + c1
        w2 = a2 * pu + b2 * pv + c2
        inside = (
            ((w0 > 0.0) | ((w0 == 0.0) & tl0))
            & ((w1 > 0.0) | ((w1 == 0.0) & tl1))
            & ((w2 > 0.0) | ((w2 == 0.0) & tl2))
        )
        if not inside.any():
            continue
        l0 = w0 / aabs
        l1 = w1 / aabs
        l2 = w2 / aabs
        invz = l0 / za + l1 / zb + l2 / zc
        with np.errstate(divide="ignore"):
            z = 1.0 / invz
        sub = (slice(py0, py1 + 1), slice(px0, px1 + 1))
        win = inside & (z < depth[sub])
        if not win.any():
            continue
        depth[sub] = np.where(win, z, depth[sub])
        fid[sub] = np.where(win, f, fid[sub])
        bary[sub][..., 0] = np.where(win, l0 / (za * invz), bary[sub][..., 0])
        bary[sub][..., 1] = np.where(win, l1 / (zb * invz), bary[sub][..., 1])
        bary[sub][..., 2] = np.where(win, l2 / (zc * invz), bary[sub][..., 2])
    return depth, fid, bary


def _clip_polygon_to_pixel(poly, px, py):
    for axis, sign, bound in ((0, 1.0, px), (0, -1.0, px + 1.0), (1, 1.0, py), (1, -1.0, py + 1.0)):
        if not poly:
            return poly
        out = []
        n = len(poly)
        for i in range(n):
            p0 = poly[i]
            p1 = poly[(i + 1) % n]
            c0 = p0[axis]
            c1 = p1[axis]
            in0 = (c0 - bound) * sign >= 0.0
            in1 = (c1 - bound) * sign >= 0.0
            if in0:
                out.append(p0)
            if in0 != in1:
                tt = (bound - c0) / (c1 - c0)
                out.append((p0[0] + tt * (p1[0] - p0[0]), p0[1] + tt * (p1[1] - p0[1])))
        poly = out
    return poly


def coverage_aa(vertices, facets, selected, normals, R, t, center, fx, fy, cx, cy, width, height, z_eps, cull):
    cov = np.zeros((height, width), np.float64)
    for f in selected:
        nx, ny, nz = normals[f]
        if nx == 0.0 and ny == 0.0 and nz == 0.0:
            continue
        ia, ib, ic = facets[f]
        a = vertices[ia]
        b = vertices[ib]
        c = vertices[ic]
        if cull:
            g = (a + b + c) / 3.0 - center
            if nx * g[0] + ny * g[1] + nz * g[2] >= 0.0:
                continue
        tri = _project_triple(vertices, facets, f, R, t, fx, fy, cx, cy)
        (ua, va, za), (ub, vb, zb), (uc, vc, zc) = tri
        if za <= z_eps or zb <= z_eps or zc <= z_eps:
            continue
        px0 = max(0, int(math.floor(min(ua, ub, uc))))
        px1 = min(width - 1, int(math.ceil(max(ua, ub, uc))) - 1)
        py0 = max(0, int(math.floor(min(va, vb, vc))))
        py1 = min(height - 1, int(math.ceil(max(va, vb, vc))) - 1)
        for py in range(py0, py1 + 1):
            for px in range(px0, px1 + 1):
                poly = _clip_polygon_to_pixel([(ua, va), (ub, vb), (uc, vc)], float(px), float(py))
                if len(poly) < 3:
                    continue
                area = 0.0
                n = len(poly)
                for i in range(n):
                    x0, y0 = poly[i]
                    x1, y1 = poly[(i + 1) % n]
                    area += x0 * y1 - x1 * y0
                cov[py, px] += abs(area) * 0.5
    np.clip(cov, None, 1.0, out=cov)
    return cov


def _bilinear_with_grad_vec(img, u, v):
    h, w = img.shape
    xf = u - 0.5
    yf = v - 0.5
    x0 = np.clip(np.floor(xf).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(yf).astype(np.int64), 0, h - 2)
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


def _backproject_grid(depth, fxi, fyi, cxi, cyi, rit_i, ti, sel):
    iy, ix = np.nonzero(sel)
    z = depth[iy, ix]
    xc = (ix + 0.5 - cxi) / fxi * z
    yc = (iy + 0.5 - cyi) / fyi * z
    sx = xc - ti[0]
    sy = yc - ti[1]
    sz = z - ti[2]
    px_ = rit_i[0, 0] * sx + rit_i[0, 1] * sy + rit_i[0, 2] * sz
    py_ = rit_i[1, 0] * sx + rit_i[1, 1] * sy + rit_i[1, 2] * sz
    pz_ = rit_i[2, 0] * sx + rit_i[2, 1] * sy + rit_i[2, 2] * sz
    return iy, ix, z, xc, yc, np.stack([px_, py_, pz_], axis=1)


def reproject(depth_i, fid_i, rit_i, ti, fxi, fyi, cxi, cyi,
              image_j, fid_j, rj, tj, fxj, fyj, cxj, cyj, center_j,
              normals, plane_off, z_eps, rel_tol):
    h, w = depth_i.shape
    hj, wj = image_j.shape
    out = np.zeros((h, w), np.float64)
    valid = np.zeros((h, w), np.uint8)
    xu = np.full((h, w), -1.0, np.float64)
    xv = np.full((h, w), -1.0, np.float64)

    covered = fid_i >= 0
    if not covered.any():
        return out, valid, xu, xv
    iy, ix, z, xc, yc, pw = _backproject_grid(depth_i, fxi, fyi, cxi, cyi, rit_i, ti, covered)
    qx = rj[0, 0] * pw[:, 0] + rj[0, 1] * pw[:, 1] + rj[0, 2] * pw[:, 2] + tj[0]
    qy = rj[1, 0] * pw[:, 0] + rj[1, 1] * pw[:, 1] + rj[1, 2] * pw[:, 2] + tj[1]
    qz = rj[2, 0] * pw[:, 0] + rj[2, 1] * pw[:, 1] + rj[2, 2] * pw[:, 2] + tj[2]
    ok = qz > z_eps
    with np.errstate(divide="ignore", invalid="ignore"):
        uj = fxj * qx / qz + cxj
        vj = fyj * qy / qz + cyj
    pxj = np.floor(uj).astype(np.int64)
    pyj = np.floor(vj).astype(np.int64)
    ok &= (pxj >= 0) & (pxj < wj) & (pyj >= 0) & (pyj < hj)
    fj = np.where(ok, fid_j[np.clip(pyj, 0, hj - 1), np.clip(pxj, 0, wj - 1)], -1)
    ok &= fj >= 0
    fj_safe = np.clip(fj, 0, None)
    nrm = normals[fj_safe]
    direc = pw - center_j
    den = np.einsum("ij,ij->i", nrm, direc)
    ok &= den != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = (plane_off[fj_safe] - nrm @ center_j) / den
    ok &= np.abs(ts - 1.0) <= rel_tol
    ok &= (uj >= 0.5) & (uj <= wj - 0.5) & (vj >= 0.5) & (vj <= hj - 0.5)
    if not ok.any():
        return out, valid, xu, xv
    val, _, _ = _bilinear_with_grad_vec(image_j, uj[ok], vj[ok])
    out[iy[ok], ix[ok]] = val
    valid[iy[ok], ix[ok]] = 1
    xu[iy[ok], ix[ok]] = uj[ok]
    xv[iy[ok], ix[ok]] = vj[ok]
    return out, valid, xu, xv


def scatter_pair_gradient(dfield, fid, bary, depth, xu, xv,
                          rit_i, ti, fxi, fyi, cxi, cyi, center_i,
                          image_j, rj, tj, fxj, fyj,
                          facets, normals, grazing, grad, support):
    sel = (dfield != 0.0) & (fid >= 0)
    if not sel.any():
        return
    iy, ix, z, xc, yc, pw = _backproject_grid(depth, fxi, fyi, cxi, cyi, rit_i, ti, sel)
    d = pw - center_i
    dn = np.linalg.norm(d, axis=1)
    d /= dn[:, None]
    f = fid[iy, ix]
    nrm = normals[f]
    a = np.einsum("ij,ij->i", nrm, d)
    ok = np.abs(a) >= grazing
    if not ok.any():
        return
    iy, ix, pw, d, f, nrm, a = iy[ok], ix[ok], pw[ok], d[ok], f[ok], nrm[ok], a[ok]
    val, gu, gv = _bilinear_with_grad_vec(image_j, xu[iy, ix], xv[iy, ix])
    qx = rj[0, 0] * pw[:, 0] + rj[0, 1] * pw[:, 1] + rj[0, 2] * pw[:, 2] + tj[0]
    qy = rj[1, 0] * pw[:, 0] + rj[1, 1] * pw[:, 1] + rj[1, 2] * pw[:, 2] + tj[1]
    qz = rj[2, 0] * pw[:, 0] + rj[2, 1] * pw[:, 1] + rj[2, 2] * pw[:, 2] + tj[2]
    rx = rj[0, 0] * d[:, 0] + rj[0, 1] * d[:, 1] + rj[0, 2] * d[:, 2]
    ry = rj[1, 0] * d[:, 0] + rj[1, 1] * d[:, 1] + rj[1, 2] * d[:, 2]
    rz = rj[2, 0] * d[:, 0] + rj[2, 1] * d[:, 1] + rj[2, 2] * d[:, 2]
    jx = fxj * (rx * qz - qx * rz) / (qz * qz)
    jy = fyj * (ry * qz - qy * rz) / (qz * qz)
    s = dfield[iy, ix] * (gu * jx + gv * jy) / a
    support[iy, ix] = 1
    contrib = (bary[iy, ix, :, None] * (s[:, None] * nrm)[:, None, :]).reshape(-1, 3)
    np.add.at(grad, facets[f].reshape(-1), contrib)


def icm_sweeps(unary, facet_neighbors, labels, cost_same, cost_diff, max_sweeps):
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
                        c += cost_same if labels[nb] == l else cost_diff
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


def bruteforce_labeling(unary, edges, cost_same, cost_diff):
    m, nl = unary.shape
    total = nl ** m
    best_e = np.inf
    best = np.zeros(m, np.int64)
    chunk = 1 << 16
    cols = np.arange(m)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = np.empty((len(idx), m), np.int64)
        rem = idx.copy()
        for f in range(m - 1, -1, -1):
            digits[:, f] = rem % nl
            rem //= nl
        e = unary[cols, digits].sum(axis=1)
        if len(edges):
            same = digits[:, edges[:, 0]] == digits[:, edges[:, 1]]
            e = e + np.where(same, cost_same, cost_diff).sum(axis=1)
        k = int(np.argmin(e))
        if e[k] < best_e:
            best_e = float(e[k])
            best = digits[k].copy()
    return best_e, best
