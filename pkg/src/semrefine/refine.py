"""Variational mesh refinement.

Three energy terms over the mesh surface:

* photometric: for every ordered camera pair (i, j), ZNCC window error
  between image i and image j warped into view i through the surface; the
  per-vertex gradient chains the per-pixel error derivative through the
  warp, the projection Jacobian of camera j and the ray geometry, and is
  distributed with the rendered barycentric weights along the facet normal.
* semantic (single view): per camera and label, gated squared difference
  between the blurred classifier mask and the blurred rendering of the mesh
  's own labels; the gate is 1 only where the unblurred rendered-mask window
  is mixed. The rendered mask changes only where its boundary (label edges
  and silhouettes) sweeps pixels, so the gradient is a line integral along
  the projected boundary edges weighted by the blurred residual field;
  misclassified blobs far from rendered label boundaries contribute nothing.
* smoothness: edge-based quadratic energy whose gradient is the umbrella
  direction scaled by vertex degree.

All energies are plain pixel sums (unit pixel measure). Gradients are exact
derivatives of the reported energies up to rendering-coverage discreteness,
which is what the finite-difference checker in `gradcheck` verifies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels
from .camera import DEPTH_EPS
from .errors import ConfigError, DataError, NonFiniteGradient
from .geometry import (
    AdjacencyIndex,
    LabeledMesh,
    build_adjacency,
    smoothness_energy_gradient,
    subdivide,
)
from .labeling import LabelingConfig, compute_class_normal_stats, compute_data_term, solve_icm
from .render import (
    rasterize,
    render_label_coverage_aa,
    render_label_masks,
    reproject_image,
    visibility_matrix,
)

log = logging.getLogger(__name__)

# Absolute floor (in summed gray^2 units) below which a window counts as
# textureless for ZNCC purposes.
VAR_EPS = 1e-6
# A camera pair is skipped when fewer than this fraction of pixels reproject.
MIN_OVERLAP = 0.01
# Line-integral sampling density along projected boundary edges.
EDGE_SAMPLES_PER_PX = 8.0


@dataclass
class RefineConfig:
    """Refinement parameters; the schedule runs `levels` resolution levels of
    `iterations_per_level` descent steps each, subdividing in between."""

    window_radius: int = 3
    step_size: float = 0.25
    iterations_per_level: int = 5
    levels: int = 3
    lambda_photo: float = 1.0
    lambda_sem: float = 1.0
    lambda_smooth: float = 0.5
    mask_blur_sigma: float = 1.5
    grazing_threshold: float = 0.01

    def validate(self):
        if self.window_radius < 1:
            raise ConfigError("window_radius must be >= 1")
        if self.iterations_per_level < 1:
            raise ConfigError("iterations_per_level must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if min(self.lambda_photo, self.lambda_sem, self.lambda_smooth) < 0:
            raise ConfigError("term weights must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.mask_blur_sigma <= 0:
            raise ConfigError("mask_blur_sigma must be positive")


@dataclass
class EnergyReport:
    """Per-term energies, their weighted total and per-camera breakdowns."""

    photo: float = 0.0
    sem: float = 0.0
    smooth: float = 0.0
    lambda_photo: float = 1.0
    lambda_sem: float = 1.0
    lambda_smooth: float = 0.5
    photo_pairs: dict = field(default_factory=dict)
    sem_cameras: dict = field(default_factory=dict)
    support: dict = field(default_factory=dict)
    magnitudes: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return (
            self.lambda_photo * self.photo
            + self.lambda_sem * self.sem
            + self.lambda_smooth * self.smooth
        )


def zncc_error(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """1 - ZNCC of two equally sized windows, in [0, 2].

    Invariant to affine intensity changes of either window; windows with
    (near-)zero variance on either side return the neutral value 1.
    """
    a = np.asarray(patch_a, dtype=np.float64).ravel()
    b = np.asarray(patch_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError("zncc_error: windows differ in size")
    if a.size < 2:
        raise DataError("zncc_error: need at least 2 pixels")
    az = a - a.mean()
    bz = b - b.mean()
    sa = float(az @ az)
    sb = float(bz @ bz)
    if sa <= VAR_EPS or sb <= VAR_EPS:
        return 1.0
    return 1.0 - float(az @ bz) / math.sqrt(sa * sb)


def ssd_sem_error(window_2d: np.ndarray, window_3d: np.ndarray) -> float:
    """Gated binary SSD: sum of squared differences, zeroed unless the
    rendered-mask window contains both a covered and an uncovered pixel."""
    w2 = np.asarray(window_2d, dtype=np.float64)
    w3 = np.asarray(window_3d, dtype=np.float64)
    if w2.shape != w3.shape:
        raise DataError("ssd_sem_error: windows differ in size")
    chi = 1.0 if (w3.max() > 0.5 and w3.min() < 0.5) else 0.0
    return chi * float(((w2 - w3) ** 2).sum())


def _box_sum(img: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window around each pixel, clipped at borders."""
    h, w = img.shape
    p = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=p[1:, 1:])
    y = np.arange(h)
    x = np.arange(w)
    y0 = np.maximum(y - r, 0)
    y1 = np.minimum(y + r, h - 1) + 1
    x0 = np.maximum(x - r, 0)
    x1 = np.minimum(x + r, w - 1) + 1
    return p[np.ix_(y1, x1)] - p[np.ix_(y0, x1)] - p[np.ix_(y1, x0)] + p[np.ix_(y0, x0)]


def _window_counts(shape, r: int) -> np.ndarray:
    h, w = shape
    y = np.arange(h)
    x = np.arange(w)
    cy = np.minimum(y + r, h - 1) - np.maximum(y - r, 0) + 1
    cx = np.minimum(x + r, w - 1) - np.maximum(x - r, 0) + 1
    return np.outer(cy, cx).astype(np.float64)


def _interior_mask(shape, r: int) -> np.ndarray:
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    if h > 2 * r and w > 2 * r:
        out[r : h - r, r : w - r] = True
    return out


def zncc_error_field(image_a: np.ndarray, image_b: np.ndarray, valid: np.ndarray, radius: int,
                     restrict: np.ndarray | None = None):
    """Windowed ZNCC error over an image pair plus its derivative field.

    Returns (energy, win_ok, dfield) where dfield[y] is the derivative of
    the total error with respect to image_b[y], accumulated over every window
    containing y. Only windows fully inside the image with all pixels valid
    participate; zero-variance windows contribute the neutral error 1 and no
    derivative. `restrict` additionally intersects the window-center set
    (used by the gradient checker to freeze the integration domain).
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    v = valid.astype(np.float64)
    n = float((2 * radius + 1) ** 2)

    win_ok = (_box_sum(v, radius) > n - 0.5) & _interior_mask(a.shape, radius)
    if restrict is not None:
        win_ok &= restrict
    if not win_ok.any():
        return 0.0, win_ok, np.zeros_like(a)

    sa_sum = _box_sum(a, radius)
    sb_sum = _box_sum(b * v, radius)
    saa = _box_sum(a * a, radius)
    sbb = _box_sum(b * b * v, radius)
    sab = _box_sum(a * b * v, radius)

    var_a = saa - sa_sum * sa_sum / n
    var_b = sbb - sb_sum * sb_sum / n
    cov = sab - sa_sum * sb_sum / n

    good = win_ok & (var_a > VAR_EPS) & (var_b > VAR_EPS)
    denom = np.sqrt(np.where(good, var_a * var_b, 1.0))
    rho = np.where(good, cov / denom, 0.0)

    err = np.where(win_ok, 1.0, 0.0)
    err[good] = 1.0 - rho[good]
    energy = float(err.sum())

    c1 = np.where(good, 1.0 / denom, 0.0)
    c2 = np.where(good, cov / np.where(good, var_b, 1.0) / denom, 0.0)

    abar = sa_sum / n
    bbar = sb_sum / n
    dfield = -(
        a * _box_sum(c1, radius)
        - _box_sum(c1 * abar, radius)
        - b * _box_sum(c2, radius)
        + _box_sum(c2 * bbar, radius)
    )
    dfield *= v
    return energy, win_ok, dfield


def _prepare_views(mesh: LabeledMesh, cameras, views):
    if views is None:
        return [rasterize(mesh, cam) for cam in cameras]
    return views


def photometric_gradient(mesh: LabeledMesh, cameras, images, config: RefineConfig,
                         views=None, record_support: bool = False,
                         frozen_windows: dict | None = None):
    """ZNCC photo-consistency gradient over all ordered camera pairs.

    Camera pairs sharing fewer than MIN_OVERLAP of their pixels are skipped
    with a warning. Pixels at grazing incidence (|n.d| below the configured
    threshold), invalid reprojections and textureless windows contribute
    nothing. `frozen_windows` optionally maps an ordered pair (i, j) to a
    boolean window-center mask that freezes the integration domain (gradient
    checking). Returns (gradient (n,3), EnergyReport).
    """
    config.validate()
    if len(cameras) != len(images):
        raise DataError("need one image per camera")
    for cam, img in zip(cameras, images):
        if img.shape != (cam.height, cam.width):
            raise DataError(f"image {img.shape} does not match camera {(cam.height, cam.width)}")
    grad = np.zeros((mesh.n_vertices, 3))
    report = EnergyReport(
        lambda_photo=config.lambda_photo,
        lambda_sem=config.lambda_sem,
        lambda_smooth=config.lambda_smooth,
    )
    if len(cameras) < 2:
        return grad, report
    views = _prepare_views(mesh, cameras, views)
    imgs = [np.ascontiguousarray(im, dtype=np.float64) for im in images]
    supports = [np.zeros((cam.height, cam.width), np.uint8) for cam in cameras]
    mags = [np.zeros((cam.height, cam.width)) for cam in cameras]

    for i in range(len(cameras)):
        cam_i = cameras[i]
        view_i = views[i]
        rit_i = np.ascontiguousarray(cam_i.rotation.T)
        for j in range(len(cameras)):
            if i == j:
                continue
            cam_j = cameras[j]
            warped, valid, xu, xv = reproject_image(
                imgs[j], cam_j, view_i, mesh, cam_i, view_j=views[j]
            )
            frac = float(valid.mean())
            if frac < MIN_OVERLAP:
                log.warning("camera pair (%d, %d): insufficient overlap (%.2f%%), skipped",
                            i, j, 100.0 * frac)
                continue
            restrict = frozen_windows.get((i, j)) if frozen_windows else None
            energy, _, dfield = zncc_error_field(
                imgs[i], warped, valid, config.window_radius, restrict=restrict
            )
            report.photo_pairs[(i, j)] = energy
            report.photo += energy
            if record_support:
                mags[i] += np.abs(dfield)
            _kernels.scatter_pair_gradient(
                dfield, view_i.facet_id, view_i.bary, view_i.depth, xu, xv,
                rit_i, cam_i.translation, cam_i.fx, cam_i.fy, cam_i.cx, cam_i.cy,
                cam_i.center,
                imgs[j], cam_j.rotation, cam_j.translation, cam_j.fx, cam_j.fy,
                mesh.facets, view_i.normals, config.grazing_threshold,
                grad, supports[i],
            )
    if record_support:
        report.support["photo"] = supports
        report.magnitudes["photo"] = mags
    return grad, report


def chi_gate(rendered_mask: np.ndarray, radius: int) -> np.ndarray:
    """1 where the window of the unblurred rendered mask holds both a covered
    and an uncovered pixel (border windows are clipped to the image)."""
    m = rendered_mask.astype(np.float64)
    s = _box_sum(m, radius)
    cnt = _window_counts(m.shape, radius)
    return ((s > 0.5) & (s < cnt - 0.5)).astype(np.float64)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="constant", cval=0.0)


def _blur_grad(img: np.ndarray, sigma: float):
    gx = gaussian_filter(np.asarray(img, dtype=np.float64), sigma, order=(0, 1),
                         mode="constant", cval=0.0)
    gy = gaussian_filter(np.asarray(img, dtype=np.float64), sigma, order=(1, 0),
                         mode="constant", cval=0.0)
    return gx, gy


def _rendered_facets(mesh: LabeledMesh, normals: np.ndarray, cam) -> np.ndarray:
    """Facets participating in a render from `cam`: non-degenerate,
    front-facing, all vertices in front of the camera."""
    ok = np.einsum("ij,ij->i", normals, normals) > 0.5
    centroids = mesh.vertices[mesh.facets].mean(axis=1)
    ok &= np.einsum("ij,ij->i", normals, centroids - cam.center) < 0.0
    z = mesh.vertices @ cam.rotation[2] + cam.translation[2]
    ok &= (z > DEPTH_EPS)[mesh.facets].all(axis=1)
    return ok


def _boundary_edges(mesh: LabeledMesh, adjacency: AdjacencyIndex, rendered: np.ndarray,
                    label: int) -> np.ndarray:
    """(E, 3) rows (va, vb, facet): edges bounding the rendered coverage of
    `label` (silhouettes, edges to other labels, edges to culled facets)."""
    sel = np.flatnonzero(rendered & (mesh.facet_labels == label))
    if sel.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    nb = adjacency.facet_neighbors[sel]  # (S, 3)
    nb_safe = np.clip(nb, 0, None)
    interior = (nb >= 0) & rendered[nb_safe] & (mesh.facet_labels[nb_safe] == label)
    rows = []
    tris = mesh.facets[sel]
    for k in range(3):
        on_boundary = ~interior[:, k]
        if not on_boundary.any():
            continue
        va = tris[on_boundary, k]
        vb = tris[on_boundary, (k + 1) % 3]
        rows.append(np.stack([va, vb, sel[on_boundary]], axis=1))
    if not rows:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(rows, axis=0)


def _scatter_boundary_gradient(weight_field: np.ndarray, mesh: LabeledMesh, cam,
                               edges: np.ndarray, grad: np.ndarray,
                               samples_per_px: float = EDGE_SAMPLES_PER_PX):
    """Accumulate the boundary-sweep line integral into the vertex gradient.

    For a boundary point q(s) moving with the edge's interpolated vertex
    motion, the covered area behind it grows at rate (n_out . dq); the energy
    changes by the blurred residual field sampled at the pixel containing q.
    Midpoint rule along each projected edge, about `samples_per_px` samples
    per pixel of arc length.
    """
    if len(edges) == 0:
        return
    h, w = weight_field.shape
    R = cam.rotation
    t = cam.translation
    verts = mesh.vertices
    for va, vb, f in edges:
        a = verts[va]
        b = verts[vb]
        other = int(mesh.facets[f].sum() - va - vb)
        e = b - a
        ec = R @ e
        qa, _ = cam.project_many(a[None, :])
        qb, _ = cam.project_many(b[None, :])
        edge_px = float(np.hypot(*(qb[0] - qa[0])))
        n = max(2, int(math.ceil(edge_px * samples_per_px)))
        s = (np.arange(n) + 0.5) / n
        x = a + s[:, None] * e
        pc = x @ R.T + t
        z = pc[:, 2]
        # image tangent dq/ds and arc speed
        tu = cam.fx * (ec[0] * z - pc[:, 0] * ec[2]) / (z * z)
        tv = cam.fy * (ec[1] * z - pc[:, 1] * ec[2]) / (z * z)
        speed = np.hypot(tu, tv)
        run = speed > 1e-12
        if not run.any():
            continue
        nu = np.where(run, tv / np.maximum(speed, 1e-12), 0.0)
        nv = np.where(run, -tu / np.maximum(speed, 1e-12), 0.0)
        # orient the normal away from the facet interior
        qm_u = cam.fx * pc[:, 0] / z + cam.cx
        qm_v = cam.fy * pc[:, 1] / z + cam.cy
        qo, _ = cam.project_many(verts[other][None, :])
        mid = n // 2
        side = nu[mid] * (qo[0, 0] - qm_u[mid]) + nv[mid] * (qo[0, 1] - qm_v[mid])
        if side > 0.0:
            nu = -nu
            nv = -nv
        px = np.floor(qm_u).astype(np.int64)
        py = np.floor(qm_v).astype(np.int64)
        inb = run & (px >= 0) & (px < w) & (py >= 0) & (py < h)
        if not inb.any():
            continue
        wq = np.zeros(n)
        wq[inb] = weight_field[py[inb], px[inb]]
        coef = wq * speed / n
        # J^T n_img per sample, transformed back to world coordinates
        gu = cam.fx / z * nu
        gv = cam.fy / z * nv
        gz = -(cam.fx * pc[:, 0] * nu + cam.fy * pc[:, 1] * nv) / (z * z)
        vec = np.stack([gu, gv, gz], axis=1) @ R  # (n, 3) world rows: R^T @ cam-vec
        grad[va] += ((1.0 - s) * coef) @ vec
        grad[vb] += (s * coef) @ vec


def semantic_gradient_single_view(mesh: LabeledMesh, cameras, masks, config: RefineConfig,
                                  views=None, antialias: bool = False,
                                  frozen_chi=None, record_support: bool = False,
                                  adjacency: AdjacencyIndex | None = None):
    """Single-view semantic gradient: each camera's classifier mask against
    the rendering of the mesh's own labels in the same view.

    Per camera and label, both masks are Gaussian-blurred surrogates; the
    energy is the per-pixel gated squared difference sum(chi * (m3 - m2)^2)
    with chi evaluated on the unblurred rendered-mask window. The rendered
    mask varies only where its projected boundary (label edges, silhouettes)
    sweeps pixels, so the gradient is a line integral of the blurred residual
    field along those edges, distributed to the edge endpoints.

    `antialias` renders the label coverage with exact pixel areas, making the
    energy differentiable in the vertex positions (used by the gradient
    checker); the default binary rendering matches `render_label_masks`
    exactly. `frozen_chi` fixes the gate (list per camera of (L, H, W))
    during finite differencing.
    """
    config.validate()
    mask_list = masks.masks if hasattr(masks, "masks") else masks
    if len(mask_list) != len(cameras):
        raise DataError("need one mask stack per camera")
    grad = np.zeros((mesh.n_vertices, 3))
    report = EnergyReport(
        lambda_photo=config.lambda_photo,
        lambda_sem=config.lambda_sem,
        lambda_smooth=config.lambda_smooth,
    )
    views = _prepare_views(mesh, cameras, views)
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    supports = [np.zeros((cam.height, cam.width), np.uint8) for cam in cameras]
    mags = [np.zeros((cam.height, cam.width)) for cam in cameras]
    labels_present = np.flatnonzero(np.bincount(mesh.facet_labels, minlength=mesh.label_count))

    for ci, cam in enumerate(cameras):
        view = views[ci]
        m3_stack = render_label_masks(view, mesh)
        rendered = _rendered_facets(mesh, view.normals, cam)
        cam_energy = 0.0
        for l in labels_present:
            m2 = mask_list[ci][l].astype(np.float64)
            if m2.shape != (cam.height, cam.width):
                raise DataError(f"mask {ci}/{l} does not match the camera size")
            m3_bin = m3_stack[l]
            if antialias:
                m3 = render_label_coverage_aa(mesh, cam, int(l))
            else:
                m3 = m3_bin.astype(np.float64)
            if frozen_chi is not None:
                chi = frozen_chi[ci][l]
            else:
                chi = chi_gate(m3_bin, config.window_radius)
            m3b = _blur(m3, config.mask_blur_sigma)
            m2b = _blur(m2, config.mask_blur_sigma)
            resid = m3b - m2b
            cam_energy += float((chi * resid * resid).sum())
            wfield = 2.0 * chi * resid
            supports[ci] |= (wfield != 0.0).astype(np.uint8)
            if record_support:
                mags[ci] += np.abs(wfield)
            weight_field = _blur(wfield, config.mask_blur_sigma)
            edges = _boundary_edges(mesh, adjacency, rendered, int(l))
            _scatter_boundary_gradient(weight_field, mesh, cam, edges, grad)
        report.sem_cameras[ci] = cam_energy
        report.sem += cam_energy
    if record_support:
        report.support["sem"] = supports
        report.magnitudes["sem"] = mags
    return grad, report


def semantic_gradient_pairwise(mesh: LabeledMesh, cameras, masks, config: RefineConfig,
                               views=None, record_support: bool = False):
    """Cross-view baseline: classifier masks of view j reprojected through the
    mesh into view i and compared with view i's own classifier masks.

    Uses the plain (ungated) squared difference of the blurred masks, so
    misclassifications of either view produce gradient flow wherever they
    land. Only used for robustness comparisons against the single-view term.
    """
    config.validate()
    mask_list = masks.masks if hasattr(masks, "masks") else masks
    grad = np.zeros((mesh.n_vertices, 3))
    report = EnergyReport(
        lambda_photo=config.lambda_photo,
        lambda_sem=config.lambda_sem,
        lambda_smooth=config.lambda_smooth,
    )
    if len(cameras) < 2:
        return grad, report
    views = _prepare_views(mesh, cameras, views)
    supports = [np.zeros((cam.height, cam.width), np.uint8) for cam in cameras]
    nl = mesh.label_count
    blurred = [
        [_blur(mask_list[ci][l].astype(np.float64), config.mask_blur_sigma) for l in range(nl)]
        for ci in range(len(cameras))
    ]

    for i in range(len(cameras)):
        cam_i = cameras[i]
        view_i = views[i]
        rit_i = np.ascontiguousarray(cam_i.rotation.T)
        for j in range(len(cameras)):
            if i == j:
                continue
            cam_j = cameras[j]
            pair_energy = 0.0
            for l in range(nl):
                warped, valid, xu, xv = reproject_image(
                    blurred[j][l], cam_j, view_i, mesh, cam_i, view_j=views[j]
                )
                if float(valid.mean()) < MIN_OVERLAP:
                    continue
                resid = (warped - blurred[i][l]) * valid
                pair_energy += float((resid * resid).sum())
                dfield = 2.0 * resid
                _kernels.scatter_pair_gradient(
                    dfield, view_i.facet_id, view_i.bary, view_i.depth, xu, xv,
                    rit_i, cam_i.translation, cam_i.fx, cam_i.fy, cam_i.cx, cam_i.cy,
                    cam_i.center,
                    blurred[j][l], cam_j.rotation, cam_j.translation, cam_j.fx, cam_j.fy,
                    mesh.facets, view_i.normals, config.grazing_threshold,
                    grad, supports[i],
                )
            report.photo_pairs[(i, j)] = pair_energy
            report.sem += pair_energy
    if record_support:
        report.support["sem_pairwise"] = supports
    return grad, report


def total_gradient(mesh: LabeledMesh, cameras, images, masks, config: RefineConfig,
                   adjacency: AdjacencyIndex | None = None, views=None,
                   record_support: bool = False):
    """Weighted sum of the photometric, semantic and smoothness gradients.

    The smoothness part is the gradient of the edge-based quadratic energy:
    per vertex it is the umbrella (neighbor-mean) direction scaled by the
    vertex degree and negated, so descending the total moves vertices toward
    their neighbor means.
    """
    config.validate()
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    views = _prepare_views(mesh, cameras, views)
    grad = np.zeros((mesh.n_vertices, 3))
    report = EnergyReport(
        lambda_photo=config.lambda_photo,
        lambda_sem=config.lambda_sem,
        lambda_smooth=config.lambda_smooth,
    )
    if config.lambda_photo > 0.0:
        g, rep = photometric_gradient(mesh, cameras, images, config, views=views,
                                      record_support=record_support)
        grad += config.lambda_photo * g
        report.photo = rep.photo
        report.photo_pairs = rep.photo_pairs
        report.support.update(rep.support)
        report.magnitudes.update(rep.magnitudes)
    if config.lambda_sem > 0.0:
        g, rep = semantic_gradient_single_view(mesh, cameras, masks, config, views=views,
                                               record_support=record_support,
                                               adjacency=adjacency)
        grad += config.lambda_sem * g
        report.sem = rep.sem
        report.sem_cameras = rep.sem_cameras
        report.support.update(rep.support)
        report.magnitudes.update(rep.magnitudes)
    energy_s, grad_s = smoothness_energy_gradient(mesh, adjacency)
    report.smooth = energy_s
    grad += config.lambda_smooth * grad_s
    return grad, report


def refine_loop(mesh: LabeledMesh, cameras, images, masks,
                refine_config: RefineConfig, labeling_config: LabelingConfig,
                on_iteration=None, record_support: bool = False):
    """Coarse-to-fine descent with relabeling at every resolution change.

    Each level runs `iterations_per_level` normalized descent steps
    (step = step_size * mean_edge_length * G / max vertex gradient norm),
    then subdivides (except after the last level) and re-solves the MRF
    labeling with freshly computed visibility, data term and normal stats.
    Returns (refined mesh, list of EnergyReport per iteration).
    """
    refine_config.validate()
    labeling_config.validate()
    mesh = mesh.copy()
    reports = []
    for level in range(refine_config.levels):
        adjacency = build_adjacency(mesh)
        for it in range(refine_config.iterations_per_level):
            grad, report = total_gradient(
                mesh, cameras, images, masks, refine_config, adjacency=adjacency,
                record_support=record_support,
            )
            if not np.isfinite(grad).all():
                bad = int(np.flatnonzero(~np.isfinite(grad).all(axis=1))[0])
                raise NonFiniteGradient(
                    f"non-finite gradient at vertex {bad} (level {level}, iteration {it})",
                    vertex_index=bad,
                )
            gmax = float(np.linalg.norm(grad, axis=1).max()) if len(grad) else 0.0
            if gmax > 0.0:
                step = refine_config.step_size * adjacency.mean_edge_length / gmax
                mesh.vertices = mesh.vertices - step * grad
            reports.append(report)
            if on_iteration is not None:
                on_iteration(level, it, mesh, report)
        if level < refine_config.levels - 1:
            mesh = subdivide(mesh)
        mesh = relabel(mesh, cameras, masks, labeling_config)
    return mesh, reports


def relabel(mesh: LabeledMesh, cameras, masks, labeling_config: LabelingConfig) -> LabeledMesh:
    """One MRF labeling pass: visibility -> data term -> stats -> ICM."""
    views = [rasterize(mesh, cam) for cam in cameras]
    vis = visibility_matrix(mesh, cameras, views)
    data = compute_data_term(mesh, cameras, masks, vis, labeling_config)
    stats = compute_class_normal_stats(mesh, labeling_config)
    adjacency = build_adjacency(mesh)
    labels = solve_icm(mesh, adjacency, data, stats, mesh.facet_labels, labeling_config)
    out = mesh.copy()
    out.facet_labels = labels
    return out
