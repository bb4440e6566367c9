"""Facet labeling as an MRF: data term sampled at vertices, class-normal
prior estimated from the mesh itself, Potts-style smoothness, an ICM solver
and an exhaustive oracle for small instances.

Probabilities are used unnormalized (the normal prior can exceed 1); only
energy differences matter. Energy is the negative log of the labeling
probability product, so lower is better. Ties always go to the smaller
label index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, DimensionMismatch, InstanceTooLarge
from .geometry import AdjacencyIndex, LabeledMesh, facet_normals

log = logging.getLogger(__name__)

BRUTEFORCE_LIMIT = 10**7


@dataclass
class LabelingConfig:
    """Parameters of the labeling MRF.

    beta:        floor of the per-vertex data term, in (0, 1)
    mu:          weight of the normal prior
    smooth_same / smooth_diff: pairwise probabilities for equal / different
                 neighbor labels
    min_angle_variance: floor on the per-class angle spread, radians
    """

    beta: float = 0.1
    mu: float = 1.5
    smooth_same: float = 0.8
    smooth_diff: float = 0.2
    min_angle_variance: float = 0.05

    def validate(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must be in (0, 1)")
        if self.mu <= 0.0:
            raise ConfigError("mu must be positive")
        if not 0.0 < self.smooth_diff < self.smooth_same < 1.0:
            raise ConfigError("need 0 < smooth_diff < smooth_same < 1")
        if self.min_angle_variance <= 0.0:
            raise ConfigError("min_angle_variance must be positive")


@dataclass
class ClassNormalStats:
    """Per-label mean normal and squared angle spread.

    Labels without support (or with a vanishing normal sum) are disabled:
    their prior is the neutral value 1.
    """

    mean_normals: np.ndarray  # (L, 3), rows of disabled labels are zero
    angle_variances: np.ndarray  # (L,), squared radians, floored
    support: np.ndarray  # (L,) facet counts
    enabled: np.ndarray  # (L,) bool


def compute_class_normal_stats(mesh: LabeledMesh, config: LabelingConfig) -> ClassNormalStats:
    """Mean normal (normalized vector sum, area-unweighted) and mean squared
    angular deviation per label, floored at min_angle_variance**2."""
    config.validate()
    nl = mesh.label_count
    normals = facet_normals(mesh)
    usable = np.einsum("ij,ij->i", normals, normals) > 0.5  # degenerate facets excluded

    mean_normals = np.zeros((nl, 3))
    variances = np.full(nl, config.min_angle_variance**2)
    support = np.zeros(nl, dtype=np.int64)
    enabled = np.zeros(nl, dtype=bool)
    for l in range(nl):
        sel = (mesh.facet_labels == l) & usable
        support[l] = int(sel.sum())
        if support[l] == 0:
            continue
        s = normals[sel].sum(axis=0)
        mag = np.linalg.norm(s)
        if mag < 1e-9:
            log.warning("label %d: normal sum is degenerate, prior disabled", l)
            continue
        m = s / mag
        angles = np.arccos(np.clip(normals[sel] @ m, -1.0, 1.0))
        variances[l] = max(float((angles**2).mean()), config.min_angle_variance**2)
        mean_normals[l] = m
        enabled[l] = True
    return ClassNormalStats(mean_normals, variances, support, enabled)


def norm_term(stats: ClassNormalStats, facet_normal: np.ndarray, label: int,
              config: LabelingConfig) -> float:
    """mu * exp(-angle(n, m_l)^2 / (2 a_l^2)); 1 for disabled labels."""
    if not stats.enabled[label]:
        return 1.0
    cosang = float(np.clip(facet_normal @ stats.mean_normals[label], -1.0, 1.0))
    ang = math.acos(cosang)
    return config.mu * math.exp(-(ang**2) / (2.0 * stats.angle_variances[label]))


def norm_term_table(mesh: LabeledMesh, stats: ClassNormalStats,
                    config: LabelingConfig) -> np.ndarray:
    """(m, L) table of the normal prior for every facet/label pair."""
    normals = facet_normals(mesh)
    nl = mesh.label_count
    out = np.ones((mesh.n_facets, nl))
    for l in range(nl):
        if not stats.enabled[l]:
            continue
        ang = np.arccos(np.clip(normals @ stats.mean_normals[l], -1.0, 1.0))
        out[:, l] = config.mu * np.exp(-(ang**2) / (2.0 * stats.angle_variances[l]))
    return out


def compute_data_term(mesh: LabeledMesh, cameras, masks, visibility,
                      config: LabelingConfig) -> np.ndarray:
    """Per-facet per-label data probabilities, (m, L) in [beta, 1/3].

    For each vertex, nu(v, l) is the fraction of cameras seeing v whose mask
    for label l is set at the vertex projection (nearest pixel); the
    per-vertex term is max(beta, nu / 3). A facet combines its three vertex
    terms multiplicatively and renormalizes (geometric mean), which keeps the
    table inside [beta, 1/3]. Vertices visible nowhere contribute the uniform
    floor beta, so fully invisible facets get beta for every label.
    """
    config.validate()
    nl = mesh.label_count
    n = mesh.n_vertices
    if isinstance(visibility, np.ndarray):
        vis_mat = visibility
    else:
        vis_mat = np.zeros((len(cameras), n), dtype=bool)
        for v, cams in enumerate(visibility):
            for c in cams:
                vis_mat[c, v] = True

    mask_list = masks.masks if hasattr(masks, "masks") else masks
    hits = np.zeros((n, nl))
    seen = vis_mat.sum(axis=0).astype(np.float64)
    for ci, cam in enumerate(cameras):
        stack = mask_list[ci]
        if stack.shape[1:] != (cam.height, cam.width):
            raise DimensionMismatch(
                f"mask stack {ci} is {stack.shape[1:]}, camera expects "
                f"{(cam.height, cam.width)}"
            )
        vis = vis_mat[ci]
        if not vis.any():
            continue
        idx = np.flatnonzero(vis)
        pix, _ = cam.project_many(mesh.vertices[idx])
        px = np.clip(np.floor(pix[:, 0]).astype(np.int64), 0, cam.width - 1)
        py = np.clip(np.floor(pix[:, 1]).astype(np.int64), 0, cam.height - 1)
        hits[idx] += stack[:, py, px].T

    nu = np.zeros((n, nl))
    vis_any = seen > 0
    nu[vis_any] = hits[vis_any] / seen[vis_any, None]
    vterm = np.maximum(config.beta, nu / 3.0)
    vterm[~vis_any] = config.beta

    logs = np.log(vterm)
    table = np.exp(logs[mesh.facets].mean(axis=1))
    return table


def labeling_energy(mesh: LabeledMesh, adjacency: AdjacencyIndex, data: np.ndarray,
                    stats: ClassNormalStats, labels: np.ndarray,
                    config: LabelingConfig) -> float:
    """Negative log of the labeling probability product (lower = better).

    Sum over facets of -log(P_data) - log(P_norm) plus, for each adjacent
    facet pair counted once, -log(smooth_same or smooth_diff).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (mesh.n_facets,):
        raise DataError("labels must have one entry per facet")
    unary = unary_energy_table(mesh, data, stats, config)
    e = float(unary[np.arange(mesh.n_facets), labels].sum())
    pairs = _facet_pairs(adjacency)
    if len(pairs):
        same = labels[pairs[:, 0]] == labels[pairs[:, 1]]
        e += float(
            np.where(same, -math.log(config.smooth_same), -math.log(config.smooth_diff)).sum()
        )
    return e


def unary_energy_table(mesh: LabeledMesh, data: np.ndarray, stats: ClassNormalStats,
                       config: LabelingConfig) -> np.ndarray:
    """(m, L) unary energies: -log(data) - log(normal prior)."""
    return -np.log(data) - np.log(norm_term_table(mesh, stats, config))


def _facet_pairs(adjacency: AdjacencyIndex) -> np.ndarray:
    """Unique adjacent facet pairs (each counted once) from the neighbor table."""
    m = adjacency.facet_neighbors.shape[0]
    src = np.repeat(np.arange(m, dtype=np.int64), 3)
    dst = adjacency.facet_neighbors.reshape(-1)
    keep = (dst >= 0) & (src < dst)
    return np.stack([src[keep], dst[keep]], axis=1)


def solve_icm(mesh: LabeledMesh, adjacency: AdjacencyIndex, data: np.ndarray,
              stats: ClassNormalStats, init_labels: np.ndarray | None,
              config: LabelingConfig, max_sweeps: int = 100) -> np.ndarray:
    """Iterated conditional modes in facet-index order until a fixed point.

    The result never has higher energy than the initial labeling and no
    single-facet change can decrease its energy further.
    """
    unary = unary_energy_table(mesh, data, stats, config)
    if init_labels is None:
        labels = np.argmin(unary, axis=1).astype(np.int64)
    else:
        labels = np.ascontiguousarray(init_labels, dtype=np.int64).copy()
        if labels.shape != (mesh.n_facets,):
            raise DataError("init_labels must have one entry per facet")
    if mesh.n_facets == 0:
        return labels
    _kernels.icm_sweeps(
        unary,
        adjacency.facet_neighbors,
        labels,
        -math.log(config.smooth_same),
        -math.log(config.smooth_diff),
        max_sweeps,
    )
    return labels


def solve_bruteforce(mesh: LabeledMesh, adjacency: AdjacencyIndex, data: np.ndarray,
                     stats: ClassNormalStats, config: LabelingConfig) -> np.ndarray:
    """Exact global optimum by exhaustive enumeration (test oracle).

    Raises InstanceTooLarge when label_count**n_facets exceeds 1e7. Ties are
    broken toward the lexicographically smallest labeling.
    """
    m = mesh.n_facets
    nl = mesh.label_count
    if m * math.log(max(nl, 1)) > math.log(BRUTEFORCE_LIMIT) + 1e-12:
        raise InstanceTooLarge(f"{nl}^{m} labelings exceed the bound {BRUTEFORCE_LIMIT:g}")
    unary = unary_energy_table(mesh, data, stats, config)
    pairs = _facet_pairs(adjacency)
    _, labels = _kernels.bruteforce_labeling(
        unary,
        pairs,
        -math.log(config.smooth_same),
        -math.log(config.smooth_diff),
    )
    return labels
