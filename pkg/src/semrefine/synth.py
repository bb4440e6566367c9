"""Synthetic scene factory: ground-truth labeled meshes, procedurally
textured renders, exact semantic masks, controlled mask corruption and
controlled mesh perturbation.

Everything is a pure function of (spec, seed): fixed seeds give
byte-identical scenes. Textures are functions of world position so that all
cameras observe a consistent surface signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .camera import make_camera
from .errors import DataError
from .geometry import LabeledMesh, facet_normals, vertex_normals
from .render import SemanticMaskSet, RenderedView, rasterize, render_label_image, render_label_masks

SCENE_KINDS = ("two_label_plane", "plane_box", "split_cylinder")
TEXTURE_KINDS = ("checker", "value_noise")


@dataclass
class SceneSpec:
    kind: str = "two_label_plane"
    texture: str = "checker"
    texture_frequency: float = 7.0
    n_cameras: int = 4
    arc_radius: float = 3.0
    arc_span_deg: float = 35.0
    width: int = 128
    height: int = 128
    grid: int = 9
    seed: int = 0
    textureless_band: float = 0.0  # half-width of an untextured band around x=0

    def validate(self):
        if self.kind not in SCENE_KINDS:
            raise DataError(f"unknown scene kind {self.kind!r}")
        if self.texture not in TEXTURE_KINDS:
            raise DataError(f"unknown texture kind {self.texture!r}")
        if self.n_cameras < 2:
            raise DataError("need at least 2 cameras")
        if self.grid < 2:
            raise DataError("grid must be >= 2")


@dataclass
class NoiseSpec:
    rate: float = 0.05
    blob_radius_range: tuple = (3, 8)
    seed: int = 0
    guard_band_px: float = 0.0  # keep blob centers this far from true class borders
    max_attempts: int = 10000

    def validate(self):
        if not 0.0 <= self.rate <= 1.0:
            raise DataError("noise rate must be in [0, 1]")


@dataclass
class Scene:
    spec: SceneSpec
    truth_mesh: LabeledMesh
    cameras: list
    images: list  # uint8 (H, W) per camera
    masks: SemanticMaskSet
    views: list = field(default_factory=list, repr=False)


def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1), vectorized (splitmix64-style)."""
    seed_mix = (seed * 0x2545F4914F6CDD1D + 0x632BE59BD9B4E019) & 0xFFFFFFFFFFFFFFFF
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
            ^ iz.astype(np.uint64) * np.uint64(0x94D049BB133111EB)
            ^ np.uint64(seed_mix)
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise_3d(points: np.ndarray, frequency: float, seed: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1] at world points (n, 3)."""
    p = np.asarray(points, dtype=np.float64) * frequency
    p0 = np.floor(p)
    f = _smoothstep(p - p0)
    i0 = p0.astype(np.int64)
    out = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (f[:, 0] if dx else 1.0 - f[:, 0])
                    * (f[:, 1] if dy else 1.0 - f[:, 1])
                    * (f[:, 2] if dz else 1.0 - f[:, 2])
                )
                out += w * _hash01(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed)
    return out


def texture_values(points: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Procedural texture (gray levels) at world points."""
    p = np.asarray(points, dtype=np.float64)
    if spec.texture == "checker":
        cells = np.floor(p * spec.texture_frequency).astype(np.int64).sum(axis=1)
        vals = np.where(cells % 2 == 0, 64.0, 192.0)
    else:
        vals = 32.0 + 191.0 * value_noise_3d(p, spec.texture_frequency, spec.seed)
    if spec.textureless_band > 0.0:
        vals = np.where(np.abs(p[:, 0]) < spec.textureless_band, 128.0, vals)
    return vals


def _plane_grid(grid: int, half: float = 1.0):
    """Grid mesh over [-half, half]^2 at z=0, facets wound to face -z."""
    lin = np.linspace(-half, half, grid)
    xx, yy = np.meshgrid(lin, lin, indexing="xy")
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(grid * grid)], axis=1)
    facets = []
    for r in range(grid - 1):
        for c in range(grid - 1):
            a = r * grid + c
            b = a + 1
            d = a + grid
            e = d + 1
            facets.append([a, e, b])
            facets.append([a, d, e])
    return verts, np.array(facets, dtype=np.int64)


def _box(center, size_xyz):
    """Axis-aligned box shell without the +z face, outward winding.

    The +z face is omitted because the box sits on the plane (which closes
    that side); faces are returned grouped as (side_facets, top_facets) where
    "top" is the -z face (toward the cameras).
    """
    cx, cy, cz = center
    sx, sy, sz = (s / 2.0 for s in size_xyz)
    corners = np.array(
        [
            [cx - sx, cy - sy, cz - sz],
            [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz],
            [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz],
            [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz],
            [cx - sx, cy + sy, cz + sz],
        ]
    )
    # -z face (indices 0..3) wound to face -z; side faces wound outward.
    top = [[0, 1, 2], [0, 2, 3]]
    sides = [
        [0, 4, 5], [0, 5, 1],  # y = cy - sy
        [1, 5, 6], [1, 6, 2],  # x = cx + sx
        [2, 6, 7], [2, 7, 3],  # y = cy + sy
        [3, 7, 4], [3, 4, 0],  # x = cx - sx
    ]
    return corners, np.array(sides, dtype=np.int64), np.array(top, dtype=np.int64)


def scene_mesh(spec: SceneSpec) -> LabeledMesh:
    """Ground-truth mesh for a scene kind; cameras look from -z toward +z."""
    spec.validate()
    if spec.kind == "two_label_plane":
        verts, facets = _plane_grid(spec.grid)
        cent = verts[facets].mean(axis=1)
        labels = (cent[:, 0] >= 0.0).astype(np.int64)
        return LabeledMesh(verts, facets, labels, 2)
    if spec.kind == "plane_box":
        verts, facets = _plane_grid(spec.grid)
        labels = [0] * len(facets)
        bverts, bsides, btop = _box((0.0, 0.0, -0.175), (0.6, 0.6, 0.35))
        off = len(verts)
        verts = np.concatenate([verts, bverts], axis=0)
        facets = np.concatenate([facets, bsides + off, btop + off], axis=0)
        labels = np.array(labels + [1] * len(bsides) + [2] * len(btop), dtype=np.int64)
        return LabeledMesh(verts, facets, labels, 3)
    # split_cylinder: front half-cylinder, axis along y, split by angle sign
    n_phi = max(spec.grid, 8)
    n_y = spec.grid
    radius = 0.8
    phi = np.linspace(-math.pi / 2, math.pi / 2, n_phi)
    ys = np.linspace(-1.0, 1.0, n_y)
    pp, yy = np.meshgrid(phi, ys, indexing="xy")
    verts = np.stack(
        [radius * np.sin(pp).ravel(), yy.ravel(), -radius * np.cos(pp).ravel()], axis=1
    )
    facets = []
    for r in range(n_y - 1):
        for c in range(n_phi - 1):
            a = r * n_phi + c
            b = a + 1
            d = a + n_phi
            e = d + 1
            facets.append([a, b, e])
            facets.append([a, e, d])
    facets = np.array(facets, dtype=np.int64)
    cent_phi = pp.ravel()[facets].mean(axis=1)
    labels = (cent_phi >= 0.0).astype(np.int64)
    mesh = LabeledMesh(verts, facets, labels, 2)
    # fix winding so normals point away from the cylinder axis
    normals = facet_normals(mesh)
    outward = verts[facets].mean(axis=1)
    outward[:, 1] = 0.0
    flip = np.einsum("ij,ij->i", normals, outward) < 0.0
    facets[flip] = facets[flip][:, [0, 2, 1]]
    return LabeledMesh(verts, facets, labels, 2)


def scene_cameras(spec: SceneSpec) -> list:
    """Cameras on an arc at -z looking at the origin, small deterministic
    vertical offsets to avoid exactly axis-aligned degeneracies."""
    cams = []
    span = math.radians(spec.arc_span_deg)
    for k in range(spec.n_cameras):
        frac = 0.5 if spec.n_cameras == 1 else k / (spec.n_cameras - 1)
        theta = (frac - 0.5) * span
        eye = (
            spec.arc_radius * math.sin(theta),
            0.12 * math.sin(2.3 * k + 0.7),
            -spec.arc_radius * math.cos(theta),
        )
        f = 1.3 * min(spec.width, spec.height)
        cams.append(make_camera(eye, (0.0, 0.0, 0.0), f, f, spec.width, spec.height))
    return cams


def render_textured_image(mesh: LabeledMesh, view: RenderedView, spec: SceneSpec) -> np.ndarray:
    """Texture-render one view of the mesh; background is 0."""
    cam = view.camera
    covered = view.coverage
    out = np.zeros((cam.height, cam.width))
    if covered.any():
        ys, xs = np.nonzero(covered)
        z = view.depth[ys, xs]
        xc = (xs + 0.5 - cam.cx) / cam.fx * z
        yc = (ys + 0.5 - cam.cy) / cam.fy * z
        pts = (np.stack([xc, yc, z], axis=1) - cam.translation) @ cam.rotation
        out[ys, xs] = texture_values(pts, spec)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> Scene:
    """Ground-truth mesh, cameras, textured renders and exact label masks."""
    spec.validate()
    mesh = scene_mesh(spec)
    cams = scene_cameras(spec)
    views = [rasterize(mesh, cam) for cam in cams]
    images = [render_textured_image(mesh, v, spec) for v in views]
    masks = [render_label_masks(v, mesh) for v in views]
    truth_labels = [render_label_image(v, mesh) for v in views]
    mask_set = SemanticMaskSet(masks=masks, label_count=mesh.label_count,
                               truth_labels=truth_labels)
    mask_set.validate(cams)
    return Scene(spec, mesh, cams, images, mask_set, views)


def label_image_from_masks(stack: np.ndarray, unlabeled: int = SemanticMaskSet.UNLABELED):
    """Collapse a (L, H, W) binary stack into a label image."""
    covered = stack.any(axis=0)
    out = np.full(stack.shape[1:], unlabeled, dtype=np.int32)
    out[covered] = stack[:, covered].argmax(axis=0)
    return out


def masks_from_label_image(img: np.ndarray, label_count: int,
                           unlabeled: int = SemanticMaskSet.UNLABELED) -> np.ndarray:
    out = np.zeros((label_count,) + img.shape, dtype=np.uint8)
    for l in range(label_count):
        out[l] = (img == l).astype(np.uint8)
    return out


def class_boundary_mask(label_image: np.ndarray,
                        unlabeled: int = SemanticMaskSet.UNLABELED,
                        include_silhouette: bool = True) -> np.ndarray:
    """Covered pixels on a border of a label region.

    With include_silhouette the border to unlabeled background counts too
    (it bounds the class regions in the image just like a class-class edge).
    """
    img = np.asarray(label_image)
    covered = img != unlabeled
    out = np.zeros(img.shape, dtype=bool)
    diff_r = img[:, 1:] != img[:, :-1]
    if not include_silhouette:
        diff_r &= covered[:, 1:] & covered[:, :-1]
    out[:, 1:] |= diff_r & covered[:, 1:]
    out[:, :-1] |= diff_r & covered[:, :-1]
    diff_d = img[1:, :] != img[:-1, :]
    if not include_silhouette:
        diff_d &= covered[1:, :] & covered[:-1, :]
    out[1:, :] |= diff_d & covered[1:, :]
    out[:-1, :] |= diff_d & covered[:-1, :]
    return out


def corrupt_masks(masks: SemanticMaskSet, noise: NoiseSpec) -> SemanticMaskSet:
    """Blob corruption: contiguous disks of labeled pixels reassigned to a
    uniformly chosen wrong label, independently seeded per camera, until the
    per-image flip count reaches rate * H * W (within the last blob's size).

    With guard_band_px > 0 blob centers keep that distance from true class
    borders of the uncorrupted masks.
    """
    noise.validate()
    new_masks = []
    for ci, stack in enumerate(masks.masks):
        labels = label_image_from_masks(stack)
        nl = stack.shape[0]
        h, w = labels.shape
        target = int(round(noise.rate * h * w))
        rng = np.random.default_rng((noise.seed, ci))
        work = labels.copy()
        if target > 0:
            if noise.guard_band_px > 0:
                boundary = class_boundary_mask(labels)
                if boundary.any():
                    dist = distance_transform_edt(~boundary)
                else:
                    dist = np.full(labels.shape, np.inf)
            flipped = 0
            attempts = 0
            while flipped < target and attempts < noise.max_attempts:
                attempts += 1
                cyx = rng.integers(0, (h, w))
                cy, cx = int(cyx[0]), int(cyx[1])
                radius = float(rng.uniform(*noise.blob_radius_range))
                wrong = int(rng.integers(0, nl))
                if work[cy, cx] == SemanticMaskSet.UNLABELED:
                    continue
                if noise.guard_band_px > 0 and dist[cy, cx] < noise.guard_band_px + radius:
                    continue
                y0 = max(0, int(cy - radius))
                y1 = min(h, int(cy + radius) + 1)
                x0 = max(0, int(cx - radius))
                x1 = min(w, int(cx + radius) + 1)
                yy, xx = np.mgrid[y0:y1, x0:x1]
                disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
                region = work[y0:y1, x0:x1]
                change = disk & (region != SemanticMaskSet.UNLABELED) & (region != wrong)
                flipped += int(change.sum())
                region[change] = wrong
        new_masks.append(masks_from_label_image(work, nl))
    return SemanticMaskSet(masks=new_masks, label_count=masks.label_count,
                           truth_labels=masks.truth_labels)


def perturb_mesh(mesh: LabeledMesh, amplitude: float, seed: int = 0) -> LabeledMesh:
    """Displace vertices along their normals by a smooth low-frequency field.

    The maximum displacement is exactly amplitude * bounding box diagonal;
    amplitude 0 returns an identical copy. Labels are untouched.
    """
    if amplitude < 0:
        raise DataError("amplitude must be >= 0")
    out = mesh.copy()
    if amplitude == 0.0 or mesh.n_vertices == 0:
        return out
    rng = np.random.default_rng(seed)
    diag = mesh.bounding_box_diagonal()
    extent = max(diag, 1e-12)
    field = np.zeros(mesh.n_vertices)
    for _ in range(3):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        wavelength = extent * rng.uniform(0.6, 1.2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        field += np.cos(2.0 * math.pi * (mesh.vertices @ direction) / wavelength + phase)
    peak = np.abs(field).max()
    if peak > 0:
        field /= peak
    normals = vertex_normals(mesh)
    out.vertices = mesh.vertices + (amplitude * diag) * field[:, None] * normals
    return out
