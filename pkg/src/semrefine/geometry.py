"""Triangle mesh with per-facet semantic labels, adjacency and subdivision.

The mesh is an indexed face set: a vertex array plus index triples. Adjacency
is a separate derived structure and must be rebuilt after any topology change
(subdivision). Facet winding is counter-clockwise seen from outside, so
`facet_normals` point outward by the right-hand rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateFacet, NonManifoldEdge

log = logging.getLogger(__name__)

# Below this squared area a facet is degenerate: its normal is undefined and
# it contributes nothing to normal-based terms.
DEGENERATE_AREA_SQ = 1e-12


@dataclass
class LabeledMesh:
    """Triangle mesh with one semantic label per facet.

    vertices:     (n, 3) float64 world positions
    facets:       (m, 3) int64 vertex indices, CCW from outside
    facet_labels: (m,)   int64 label per facet, each in [0, label_count)
    label_count:  number of semantic classes
    """

    vertices: np.ndarray
    facets: np.ndarray
    facet_labels: np.ndarray
    label_count: int

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.facets = np.ascontiguousarray(self.facets, dtype=np.int64)
        self.facet_labels = np.ascontiguousarray(self.facet_labels, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.facets.ndim != 2 or self.facets.shape[1] != 3:
            raise DataError(f"facets must be (m, 3), got {self.facets.shape}")
        if self.facet_labels.shape != (len(self.facets),):
            raise DataError("facet_labels must have exactly one entry per facet")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    def validate(self):
        """Check index ranges, label ranges and facet non-degeneracy."""
        if self.n_facets and (self.facets.min() < 0 or self.facets.max() >= self.n_vertices):
            raise DataError("facet index out of range")
        same = (
            (self.facets[:, 0] == self.facets[:, 1])
            | (self.facets[:, 1] == self.facets[:, 2])
            | (self.facets[:, 0] == self.facets[:, 2])
        )
        if same.any():
            raise DataError(f"degenerate facet (repeated vertex index) at {np.flatnonzero(same)[:8]}")
        if self.n_facets and (self.facet_labels.min() < 0 or self.facet_labels.max() >= self.label_count):
            raise DataError("facet label out of range")

    def copy(self) -> "LabeledMesh":
        return LabeledMesh(
            self.vertices.copy(), self.facets.copy(), self.facet_labels.copy(), self.label_count
        )

    def bounding_box_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


@dataclass
class AdjacencyIndex:
    """Derived neighborhood structure of a LabeledMesh.

    facet_neighbors:  (m, 3) int64, -1 where absent; slot k holds the facet
                      across the edge (facets[f, k], facets[f, (k+1) % 3])
    vertex_offsets/vertex_neighbors: CSR of the vertex 1-ring
    vertex_facet_offsets/vertex_facets: CSR of vertex->facet incidence
    edges: (E, 2) int64 unique undirected edges (sorted pairs)
    """

    facet_neighbors: np.ndarray
    vertex_offsets: np.ndarray
    vertex_neighbors: np.ndarray
    vertex_facet_offsets: np.ndarray
    vertex_facets: np.ndarray
    edges: np.ndarray
    mean_edge_length: float = field(default=0.0)

    def vertex_ring(self, v: int) -> np.ndarray:
        return self.vertex_neighbors[self.vertex_offsets[v] : self.vertex_offsets[v + 1]]

    def facets_of_vertex(self, v: int) -> np.ndarray:
        return self.vertex_facets[self.vertex_facet_offsets[v] : self.vertex_facet_offsets[v + 1]]

    def facet_ring(self, f: int) -> np.ndarray:
        nb = self.facet_neighbors[f]
        return nb[nb >= 0]


def build_adjacency(mesh: LabeledMesh) -> AdjacencyIndex:
    """Build facet/vertex adjacency; raises NonManifoldEdge for >2 facets per edge."""
    mesh.validate()
    m = mesh.n_facets
    n = mesh.n_vertices
    tris = mesh.facets

    # Undirected edges, one row per facet side, keyed by sorted vertex pair.
    raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=0)
    raw_sorted = np.sort(raw, axis=1)
    owner = np.concatenate([np.arange(m)] * 3)
    keys = raw_sorted[:, 0] * np.int64(n) + raw_sorted[:, 1]
    order = np.argsort(keys, kind="stable")
    keys_o = keys[order]
    uniq, start, counts = np.unique(keys_o, return_index=True, return_counts=True)
    if counts.size and counts.max() > 2:
        bad = np.argmax(counts > 2)
        key = uniq[bad]
        raise NonManifoldEdge((int(key // n), int(key % n)), counts[bad])

    # Slot s of facet f is the edge (facets[f, s], facets[f, (s+1) % 3]);
    # raw row r belongs to facet r % m, slot r // m.
    facet_neighbors = np.full((m, 3), -1, dtype=np.int64)
    owner_o = owner[order]
    slot_o = (order // m).astype(np.int64)
    shared = np.flatnonzero(counts == 2)
    for s in shared:
        r0 = start[s]
        a, sa = owner_o[r0], slot_o[r0]
        b, sb = owner_o[r0 + 1], slot_o[r0 + 1]
        facet_neighbors[a, sa] = b
        facet_neighbors[b, sb] = a

    edges = np.stack([uniq // n, uniq % n], axis=1).astype(np.int64)

    # Vertex 1-ring via the unique edge list (symmetric by construction).
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    vorder = np.argsort(both[:, 0], kind="stable")
    vsrc = both[vorder, 0]
    vdst = both[vorder, 1]
    vertex_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(vertex_offsets, vsrc + 1, 1)
    np.cumsum(vertex_offsets, out=vertex_offsets)

    # Vertex -> facet incidence.
    fsrc = tris.reshape(-1)
    ffac = np.repeat(np.arange(m, dtype=np.int64), 3)
    forder = np.argsort(fsrc, kind="stable")
    vertex_facet_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(vertex_facet_offsets, fsrc[forder] + 1, 1)
    np.cumsum(vertex_facet_offsets, out=vertex_facet_offsets)

    if len(edges):
        evec = mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]
        mean_edge = float(np.linalg.norm(evec, axis=1).mean())
    else:
        mean_edge = 0.0

    return AdjacencyIndex(
        facet_neighbors=facet_neighbors,
        vertex_offsets=vertex_offsets,
        vertex_neighbors=vdst.copy(),
        vertex_facet_offsets=vertex_facet_offsets,
        vertex_facets=ffac[forder].copy(),
        edges=edges,
        mean_edge_length=mean_edge,
    )


def facet_normals(mesh: LabeledMesh) -> np.ndarray:
    """Unit outward normals, (m, 3). Degenerate facets get a zero normal."""
    v = mesh.vertices
    f = mesh.facets
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm2 = np.einsum("ij,ij->i", cross, cross)
    # |cross| = 2 * area, so squared area = norm2 / 4
    ok = norm2 / 4.0 >= DEGENERATE_AREA_SQ
    out = np.zeros_like(cross)
    out[ok] = cross[ok] / np.sqrt(norm2[ok])[:, None]
    return out


def facet_normal(mesh: LabeledMesh, facet: int) -> np.ndarray:
    """Unit normal of one facet; raises DegenerateFacet below the area epsilon."""
    a, b, c = mesh.vertices[mesh.facets[facet]]
    cross = np.cross(b - a, c - a)
    norm2 = float(cross @ cross)
    sq_area = norm2 / 4.0
    if sq_area < DEGENERATE_AREA_SQ:
        raise DegenerateFacet(facet, sq_area)
    return cross / np.sqrt(norm2)


def facet_areas(mesh: LabeledMesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.facets
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.sqrt(np.einsum("ij,ij->i", cross, cross))


def vertex_normals(mesh: LabeledMesh) -> np.ndarray:
    """Area-weighted average of incident facet normals, unit length (zero if undefined)."""
    v = mesh.vertices
    f = mesh.facets
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2*area*normal
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, f[:, k], cross)
    norms = np.linalg.norm(out, axis=1)
    ok = norms > 1e-15
    out[ok] /= norms[ok, None]
    out[~ok] = 0.0
    return out


def umbrella_gradient(mesh: LabeledMesh, adjacency: AdjacencyIndex) -> np.ndarray:
    """(mean of 1-ring neighbors) - vertex, per vertex; zero for isolated vertices.

    Descending this field with step 1 places each vertex exactly at the mean
    of its neighbors (uniform/combinatorial umbrella operator).
    """
    n = mesh.n_vertices
    counts = np.diff(adjacency.vertex_offsets)
    sums = np.zeros((n, 3))
    np.add.at(sums, _neighbor_sources(adjacency), mesh.vertices[adjacency.vertex_neighbors])
    out = np.zeros((n, 3))
    ok = counts > 0
    out[ok] = sums[ok] / counts[ok, None] - mesh.vertices[ok]
    n_isolated = int((~ok).sum())
    if n_isolated:
        log.info("umbrella_gradient: %d isolated vertices get a zero vector", n_isolated)
    return out


def _neighbor_sources(adjacency: AdjacencyIndex) -> np.ndarray:
    counts = np.diff(adjacency.vertex_offsets)
    return np.repeat(np.arange(len(counts)), counts)


def smoothness_energy_gradient(mesh: LabeledMesh, adjacency: AdjacencyIndex):
    """Edge-based smoothness: E = 1/2 * sum over edges |a - b|^2.

    Returns (energy, gradient). The per-vertex gradient is
    degree * (vertex - neighbor mean), i.e. the umbrella direction scaled by
    the vertex degree, which makes the pair exactly finite-difference
    consistent (the plain umbrella field is not the gradient of any energy
    on irregular meshes).
    """
    e = adjacency.edges
    diff = mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]]
    energy = 0.5 * float(np.einsum("ij,ij->", diff, diff))
    grad = np.zeros_like(mesh.vertices)
    np.add.at(grad, e[:, 0], diff)
    np.add.at(grad, e[:, 1], -diff)
    return energy, grad


def subdivide(mesh: LabeledMesh) -> LabeledMesh:
    """Global 1->4 midpoint subdivision; children inherit the parent label.

    Edge midpoints are shared across adjacent facets (no duplicate vertices).
    """
    mesh.validate()
    v = mesh.vertices
    f = mesh.facets
    n = mesh.n_vertices

    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    keys = pairs[:, 0] * np.int64(n) + pairs[:, 1]
    uniq_keys, inverse = np.unique(keys, return_inverse=True)
    mid_index = n + np.arange(len(uniq_keys))
    ua = uniq_keys // n
    ub = uniq_keys % n
    midpoints = 0.5 * (v[ua] + v[ub])

    m01 = mid_index[inverse[: len(f)]]
    m12 = mid_index[inverse[len(f) : 2 * len(f)]]
    m20 = mid_index[inverse[2 * len(f) :]]

    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    children = np.empty((4 * len(f), 3), dtype=np.int64)
    children[0::4] = np.stack([a, m01, m20], axis=1)
    children[1::4] = np.stack([m01, b, m12], axis=1)
    children[2::4] = np.stack([m20, m12, c], axis=1)
    children[3::4] = np.stack([m01, m12, m20], axis=1)

    labels = np.repeat(mesh.facet_labels, 4)
    return LabeledMesh(
        np.concatenate([v, midpoints], axis=0), children, labels, mesh.label_count
    )
