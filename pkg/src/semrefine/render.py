"""Software rendering: depth/facet-id/barycentric buffers, label masks,
cross-view image reprojection and per-vertex visibility.

Everything is z-buffer based and deterministic: identical inputs produce
bit-identical buffers. Visibility and occlusion tests compare a point's ray
depth against the plane of the facet occupying its pixel, which is robust to
the depth slope across a pixel; the relative tolerance is REL_DEPTH_TOL.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import DEPTH_EPS, Camera
from .errors import DataError
from .geometry import LabeledMesh, facet_normals

# Relative ray-depth tolerance for z-buffer visibility/occlusion decisions.
REL_DEPTH_TOL = 1e-3


@dataclass
class RenderedView:
    """Per-pixel buffers from one camera.

    depth:    camera-frame z, +inf where empty
    facet_id: facet index, -1 where empty
    bary:     perspective-correct barycentric weights of the hit facet
    """

    camera: Camera
    depth: np.ndarray
    facet_id: np.ndarray
    bary: np.ndarray
    normals: np.ndarray = field(repr=False, default=None)
    plane_offsets: np.ndarray = field(repr=False, default=None)

    @property
    def coverage(self) -> np.ndarray:
        return self.facet_id >= 0


@dataclass
class SemanticMaskSet:
    """Per camera, per label binary masks, optionally with truth label images.

    masks[i] has shape (label_count, H_i, W_i) with values {0, 1}; at most one
    label is set per pixel. truth_labels[i], when present, holds the
    ground-truth label index per pixel with UNLABELED for background.
    """

    masks: list
    label_count: int
    truth_labels: list | None = None

    UNLABELED = 255

    def validate(self, cameras: list[Camera] | None = None):
        for i, m in enumerate(self.masks):
            if m.ndim != 3 or m.shape[0] != self.label_count:
                raise DataError(f"mask stack {i} must be (label_count, H, W)")
            if (m.sum(axis=0) > 1).any():
                raise DataError(f"mask stack {i}: a pixel carries more than one label")
            if cameras is not None:
                cam = cameras[i]
                if m.shape[1:] != (cam.height, cam.width):
                    raise DataError(
                        f"mask stack {i} is {m.shape[1:]}, camera expects "
                        f"{(cam.height, cam.width)}"
                    )


def _plane_offsets(mesh: LabeledMesh, normals: np.ndarray) -> np.ndarray:
    v0 = mesh.vertices[mesh.facets[:, 0]]
    return np.einsum("ij,ij->i", normals, v0)


def rasterize(mesh: LabeledMesh, camera: Camera, cull_backfaces: bool = True) -> RenderedView:
    """Render the mesh into per-pixel depth/facet-id/barycentric buffers."""
    normals = facet_normals(mesh)
    depth, fid, bary = _kernels.rasterize(
        mesh.vertices,
        mesh.facets,
        normals,
        camera.rotation,
        camera.translation,
        camera.center,
        camera.fx,
        camera.fy,
        camera.cx,
        camera.cy,
        camera.width,
        camera.height,
        DEPTH_EPS,
        cull_backfaces,
    )
    return RenderedView(
        camera=camera,
        depth=depth,
        facet_id=fid,
        bary=bary,
        normals=normals,
        plane_offsets=_plane_offsets(mesh, normals),
    )


def render_label_masks(view: RenderedView, mesh: LabeledMesh) -> np.ndarray:
    """Binary per-label masks (label_count, H, W): pixels showing facets of each label."""
    covered = view.facet_id >= 0
    out = np.zeros((mesh.label_count,) + view.facet_id.shape, dtype=np.uint8)
    if covered.any():
        lab = mesh.facet_labels[view.facet_id[covered]]
        ys, xs = np.nonzero(covered)
        out[lab, ys, xs] = 1
    return out


def render_label_image(view: RenderedView, mesh: LabeledMesh, unlabeled: int = 255) -> np.ndarray:
    """Per-pixel label index, `unlabeled` where the mesh does not project."""
    out = np.full(view.facet_id.shape, unlabeled, dtype=np.int32)
    covered = view.facet_id >= 0
    out[covered] = mesh.facet_labels[view.facet_id[covered]]
    return out


def render_label_coverage_aa(mesh: LabeledMesh, camera: Camera, label: int,
                             cull_backfaces: bool = True) -> np.ndarray:
    """Exact-area (antialiased) coverage of one label's facets, in [0, 1].

    Continuous in the vertex positions, which makes energies built on it
    finite-difference checkable; only meaningful for views without
    self-occlusion (overlaps are additively clamped).
    """
    normals = facet_normals(mesh)
    selected = np.flatnonzero(mesh.facet_labels == label).astype(np.int64)
    return _kernels.coverage_aa(
        mesh.vertices,
        mesh.facets,
        selected,
        normals,
        camera.rotation,
        camera.translation,
        camera.center,
        camera.fx,
        camera.fy,
        camera.cx,
        camera.cy,
        camera.width,
        camera.height,
        DEPTH_EPS,
        cull_backfaces,
    )


def reproject_image(image_j: np.ndarray, camera_j: Camera, view_i: RenderedView,
                    mesh: LabeledMesh, camera_i: Camera,
                    view_j: RenderedView | None = None):
    """Warp image_j into camera i through the surface seen in view_i.

    For every covered pixel of view_i the 3D point is recovered from depth,
    projected into camera j, occlusion-tested against view_j and sampled
    bilinearly. Returns (image, valid_mask); invalid pixels carry 0.
    """
    if image_j.shape != (camera_j.height, camera_j.width):
        raise DataError(
            f"image_j is {image_j.shape}, camera j expects {(camera_j.height, camera_j.width)}"
        )
    if view_j is None:
        view_j = rasterize(mesh, camera_j)
    out, valid, xu, xv = _kernels.reproject(
        view_i.depth,
        view_i.facet_id,
        np.ascontiguousarray(camera_i.rotation.T),
        camera_i.translation,
        camera_i.fx,
        camera_i.fy,
        camera_i.cx,
        camera_i.cy,
        np.ascontiguousarray(image_j, dtype=np.float64),
        view_j.facet_id,
        camera_j.rotation,
        camera_j.translation,
        camera_j.fx,
        camera_j.fy,
        camera_j.cx,
        camera_j.cy,
        camera_j.center,
        view_j.normals,
        view_j.plane_offsets,
        DEPTH_EPS,
        REL_DEPTH_TOL,
    )
    return out, valid.astype(bool), xu, xv


def visibility_matrix(mesh: LabeledMesh, cameras: list[Camera],
                      views: list[RenderedView] | None = None) -> np.ndarray:
    """Boolean (n_cameras, n_vertices) visibility table.

    A vertex is visible in camera i when it projects inside the image and
    either the facet rendered at its pixel is incident to it or the depth
    buffer value matches its own ray depth within REL_DEPTH_TOL (checked
    against the rendered facet's plane, not the raw buffer sample).
    """
    if views is None:
        views = [rasterize(mesh, cam) for cam in cameras]
    n = mesh.n_vertices
    vis_mat = np.zeros((len(cameras), n), dtype=bool)
    for ci, (cam, view) in enumerate(zip(cameras, views)):
        pix, z = cam.project_many(mesh.vertices)
        inside = (
            (z > DEPTH_EPS)
            & (pix[:, 0] >= 0.0)
            & (pix[:, 0] < cam.width)
            & (pix[:, 1] >= 0.0)
            & (pix[:, 1] < cam.height)
        )
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            continue
        px = np.floor(pix[idx, 0]).astype(np.int64)
        py = np.floor(pix[idx, 1]).astype(np.int64)
        fid = view.facet_id[py, px]
        covered = fid >= 0
        fid_safe = np.where(covered, fid, 0)
        incident = covered & (mesh.facets[fid_safe] == idx[:, None]).any(axis=1)

        # Ray-plane depth of the rendered facet along each vertex's own ray.
        nrm = view.normals[fid_safe]
        direc = mesh.vertices[idx] - cam.center
        den = np.einsum("ij,ij->i", nrm, direc)
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = (view.plane_offsets[fid_safe] - nrm @ cam.center) / den
        depth_ok = covered & (den != 0.0) & (np.abs(ts - 1.0) <= REL_DEPTH_TOL)
        vis_mat[ci, idx] = incident | depth_ok
    return vis_mat


def vertex_visibility(mesh: LabeledMesh, cameras: list[Camera],
                      views: list[RenderedView] | None = None) -> list[list[int]]:
    """Per-vertex list of camera indices where the vertex is visible."""
    mat = visibility_matrix(mesh, cameras, views)
    return [list(np.flatnonzero(mat[:, v])) for v in range(mesh.n_vertices)]
