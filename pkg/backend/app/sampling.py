"""
Mesh sampling hierarchy: quadric edge-collapse decimation with barycentric upsampling.
"""
import heapq
import logging
import math
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp
import trimesh
from pydantic import BaseModel, model_validator
from scipy.spatial import cKDTree

from app.mesh_core import Mesh

logger = logging.getLogger(__name__)

MIN_VERTICES = 4
HIERARCHY_DEPTH = 5
BOUNDARY_PENALTY = 1e3


class SamplingHierarchy(BaseModel):
    """
    Chain of decimated resolutions of one template mesh.

    Level 0 is the full mesh. down[k] maps level k to level k+1 (N_{k+1}×N_k),
    up[k] maps level k+1 back to level k (N_k×N_{k+1}).
    """
    level_vertices: List[np.ndarray]
    level_faces: List[np.ndarray]
    kept_indices: List[np.ndarray]
    down: List[sp.csr_matrix]
    up: List[sp.csr_matrix]
    factors: List[float]

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode='after')
    def _chain_shapes(self) -> 'SamplingHierarchy':
        if len(self.down) != HIERARCHY_DEPTH or len(self.up) != HIERARCHY_DEPTH:
            raise ValueError(f"hierarchy must have {HIERARCHY_DEPTH} down/up matrices")
        if len(self.level_vertices) != HIERARCHY_DEPTH + 1:
            raise ValueError(f"hierarchy must have {HIERARCHY_DEPTH + 1} levels")
        sizes = self.level_sizes
        for k in range(HIERARCHY_DEPTH):
            if self.down[k].shape != (sizes[k + 1], sizes[k]):
                raise ValueError(f"down[{k}] has shape {self.down[k].shape}, expected {(sizes[k + 1], sizes[k])}")
            if self.up[k].shape != (sizes[k], sizes[k + 1]):
                raise ValueError(f"up[{k}] has shape {self.up[k].shape}, expected {(sizes[k], sizes[k + 1])}")
        return self

    @property
    def level_sizes(self) -> List[int]:
        return [int(v.shape[0]) for v in self.level_vertices]

    def downsample(self, values: np.ndarray, to_level: int) -> np.ndarray:
        """Carry per-vertex values from level 0 down to to_level."""
        for k in range(to_level):
            values = self.down[k] @ values
        return values

    def upsample(self, values: np.ndarray, from_level: int) -> np.ndarray:
        """Carry per-vertex values from from_level up to level 0."""
        for k in reversed(range(from_level)):
            values = self.up[k] @ values
        return values


def _face_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Fundamental error quadric of every vertex from its incident face planes."""
    quadrics = np.zeros((len(vertices), 4, 4))
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    valid = lengths > 1e-15
    normals[valid] /= lengths[valid, None]
    planes = np.concatenate([normals, -(normals * tri[:, 0]).sum(1, keepdims=True)], axis=1)
    planes[~valid] = 0.0
    kp = planes[:, :, None] * planes[:, None, :]
    for corner in range(3):
        np.add.at(quadrics, faces[:, corner], kp)

    # boundary edges get a perpendicular constraint plane so borders hold their shape
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    face_of_edge = np.tile(np.arange(len(faces)), 3)
    unique, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    for edge_id in np.flatnonzero(counts == 1):
        a, b = unique[edge_id]
        face = face_of_edge[np.flatnonzero(inverse.reshape(-1) == edge_id)[0]]
        direction = vertices[b] - vertices[a]
        normal = np.cross(direction, normals[face])
        norm = np.linalg.norm(normal)
        if norm < 1e-15:
            continue
        normal /= norm
        plane = np.append(normal, -normal @ vertices[a])
        kp = BOUNDARY_PENALTY * np.outer(plane, plane)
        quadrics[a] += kp
        quadrics[b] += kp
    return quadrics


class _EdgeCollapser:
    """Greedy quadric edge collapse onto one of the two endpoints."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = vertices
        self.faces = faces.copy()
        self.face_alive = np.ones(len(faces), dtype=bool)
        self.alive = np.ones(len(vertices), dtype=bool)
        self.version = np.zeros(len(vertices), dtype=np.int64)
        self.quadrics = _face_quadrics(vertices, faces)
        self.vertex_faces: List[Set[int]] = [set() for _ in range(len(vertices))]
        for f, face in enumerate(faces):
            for v in face:
                self.vertex_faces[int(v)].add(f)
        self.heap: List[Tuple[float, int, int, int, int, int]] = []

    def neighbors(self, v: int) -> Set[int]:
        result: Set[int] = set()
        for f in self.vertex_faces[v]:
            result.update(int(x) for x in self.faces[f])
        result.discard(v)
        return result

    def _edge_face_count(self, a: int, b: int) -> int:
        return len(self.vertex_faces[a] & self.vertex_faces[b])

    def is_boundary(self, v: int) -> bool:
        return any(self._edge_face_count(v, n) == 1 for n in self.neighbors(v))

    def _cost(self, q: np.ndarray, v: int) -> float:
        h = np.append(self.vertices[v], 1.0)
        return float(h @ q @ h)

    def push(self, a: int, b: int) -> None:
        if a > b:
            a, b = b, a
        q = self.quadrics[a] + self.quadrics[b]
        cost_a, cost_b = self._cost(q, a), self._cost(q, b)
        # keep the endpoint with the lower error; ties keep the smaller index
        keep, remove, cost = (a, b, cost_a) if cost_a <= cost_b else (b, a, cost_b)
        heapq.heappush(self.heap, (cost, keep, remove, a, int(self.version[a]), int(self.version[b])))

    def push_all(self) -> None:
        self.heap = []
        for v in np.flatnonzero(self.alive):
            for n in self.neighbors(int(v)):
                if n > v:
                    self.push(int(v), n)

    def _legal(self, keep: int, remove: int) -> bool:
        shared_faces = self.vertex_faces[keep] & self.vertex_faces[remove]
        if not shared_faces:
            return False
        opposite = set()
        for f in shared_faces:
            opposite.update(int(x) for x in self.faces[f])
        opposite -= {keep, remove}
        # link condition keeps the surface a 2-manifold
        if (self.neighbors(keep) & self.neighbors(remove)) != opposite:
            return False
        if self.is_boundary(remove) and not (
            self.is_boundary(keep) and self._edge_face_count(keep, remove) == 1
        ):
            return False

        existing = {frozenset(int(x) for x in self.faces[f]) for f in self.vertex_faces[keep]}
        for f in self.vertex_faces[remove] - shared_faces:
            old = self.faces[f]
            new = np.where(old == remove, keep, old)
            if frozenset(int(x) for x in new) in existing:
                return False
            p_old = self.vertices[old]
            p_new = self.vertices[new]
            n_old = np.cross(p_old[1] - p_old[0], p_old[2] - p_old[0])
            n_new = np.cross(p_new[1] - p_new[0], p_new[2] - p_new[0])
            if np.linalg.norm(n_new) < 1e-12 or n_old @ n_new <= 0:
                return False
        return True

    def collapse(self, keep: int, remove: int) -> None:
        for f in list(self.vertex_faces[remove]):
            if keep in self.faces[f]:
                self.face_alive[f] = False
                for v in self.faces[f]:
                    self.vertex_faces[int(v)].discard(f)
            else:
                self.faces[f][self.faces[f] == remove] = keep
                self.vertex_faces[keep].add(f)
        self.vertex_faces[remove] = set()
        self.alive[remove] = False
        self.quadrics[keep] += self.quadrics[remove]
        self.version[keep] += 1
        self.version[remove] += 1
        for n in self.neighbors(keep):
            self.push(keep, n)

    def run(self, target: int) -> None:
        self.push_all()
        stalled = False
        while int(self.alive.sum()) > target:
            if not self.heap:
                if stalled:
                    break
                # legality of skipped pairs may have changed since they were popped
                stalled = True
                self.push_all()
                continue
            _, keep, remove, a, va, vb = heapq.heappop(self.heap)
            b = remove if a == keep else keep
            if not (self.alive[keep] and self.alive[remove]):
                continue
            if self.version[a] != va or self.version[b] != vb:
                continue
            if not self._legal(keep, remove):
                continue
            self.collapse(keep, remove)
            stalled = False


def decimate(vertices: np.ndarray, faces: np.ndarray, target_vertices: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quadric edge-collapse decimation keeping a subset of the original vertices.

    Args:
        vertices: N×3 positions
        faces: F×3 triangles
        target_vertices: Desired vertex count

    Returns:
        Tuple of (kept vertex indices in ascending order, faces re-indexed to the kept set)
    """
    if target_vertices >= len(vertices):
        return np.arange(len(vertices)), faces.copy()

    collapser = _EdgeCollapser(vertices, faces)
    collapser.run(target_vertices)

    kept = np.flatnonzero(collapser.alive)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    new_faces = remap[collapser.faces[collapser.face_alive]]
    if len(kept) > target_vertices:
        logger.warning(f"Decimation stopped at {len(kept)} vertices (target {target_vertices})")
    return kept, new_faces


def _barycentric_upsample(
    fine: np.ndarray,
    coarse: np.ndarray,
    coarse_faces: np.ndarray,
    kept: np.ndarray,
    candidates: int = 8,
) -> sp.csr_matrix:
    """
    Express each fine vertex in barycentric weights of its closest coarse triangle.

    Kept vertices map to themselves with weight 1; vertices with no candidate
    triangle fall back to their nearest coarse vertex.
    """
    n_fine, n_coarse = len(fine), len(coarse)
    rows, cols, vals = [], [], []

    kept_position = {int(v): i for i, v in enumerate(kept)}
    vertex_faces: List[List[int]] = [[] for _ in range(n_coarse)]
    for f, face in enumerate(coarse_faces):
        for v in face:
            vertex_faces[int(v)].append(f)

    tree = cKDTree(coarse)
    k = min(candidates, n_coarse)
    _, nearest = tree.query(fine, k=k)
    nearest = np.asarray(nearest).reshape(n_fine, k)

    for i in range(n_fine):
        if i in kept_position:
            rows.append(i)
            cols.append(kept_position[i])
            vals.append(1.0)
            continue

        face_ids = sorted({f for v in nearest[i] for f in vertex_faces[int(v)]})
        if not face_ids:
            rows.append(i)
            cols.append(int(nearest[i, 0]))
            vals.append(1.0)
            continue

        triangles = coarse[coarse_faces[face_ids]]
        points = np.repeat(fine[i][None], len(face_ids), axis=0)
        closest = trimesh.triangles.closest_point(triangles, points)
        best = int(np.argmin(np.linalg.norm(closest - points, axis=1)))
        weights = trimesh.triangles.points_to_barycentric(triangles[best][None], closest[best][None])[0]
        weights = np.clip(weights, 0.0, None)
        total = weights.sum()
        if not np.isfinite(total) or total <= 0:
            rows.append(i)
            cols.append(int(nearest[i, 0]))
            vals.append(1.0)
            continue
        weights = weights / total
        for corner, w in zip(coarse_faces[face_ids[best]], weights):
            if w > 0:
                rows.append(i)
                cols.append(int(corner))
                vals.append(float(w))

    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n_fine, n_coarse)).tocsr()
    matrix.sum_duplicates()
    return matrix


def build_sampling_hierarchy(
    template: Mesh,
    factors: Sequence[float],
    strict: bool = False,
) -> SamplingHierarchy:
    """
    Build the 5-level decimation/upsampling chain of a template mesh.

    Each level keeps ceil(N_k * factor) vertices, never fewer than 4, so level
    sizes are non-increasing. A factor of 1.0 yields identity matrices.

    Args:
        template: Level-0 mesh (typically the neutral template)
        factors: Five reduction ratios in (0, 1]
        strict: Raise instead of clamping when a level would drop below 4 vertices

    Returns:
        SamplingHierarchy with down/up matrices and per-level geometry

    Raises:
        ValueError: If factors are invalid or the mesh is too small to decimate
    """
    factors = [float(f) for f in factors]
    if len(factors) != HIERARCHY_DEPTH:
        raise ValueError(f"expected {HIERARCHY_DEPTH} reduction factors, got {len(factors)}")
    if any(not (0.0 < f <= 1.0) for f in factors):
        raise ValueError(f"reduction factors must lie in (0, 1], got {factors}")
    if template.vertex_count < MIN_VERTICES:
        raise ValueError(
            f"cannot decimate below {MIN_VERTICES} vertices: template has {template.vertex_count}"
        )

    level_vertices = [template.vertices]
    level_faces = [template.faces]
    kept_indices, down, up = [], [], []

    for k, factor in enumerate(factors):
        vertices, faces = level_vertices[-1], level_faces[-1]
        n = len(vertices)
        requested = int(math.ceil(n * factor))
        if requested < MIN_VERTICES and factor < 1.0:
            if strict:
                raise ValueError(
                    f"level {k + 1} would keep {requested} vertices, below the minimum of {MIN_VERTICES}"
                )
            requested = min(n, MIN_VERTICES)

        if factor == 1.0 or requested >= n:
            kept, coarse_faces = np.arange(n), faces.copy()
        else:
            kept, coarse_faces = decimate(vertices, faces, requested)

        coarse = vertices[kept]
        down.append(sp.csr_matrix(
            (np.ones(len(kept)), (np.arange(len(kept)), kept)), shape=(len(kept), n)
        ))
        if len(kept) == n:
            up.append(sp.identity(n, format='csr'))
        else:
            up.append(_barycentric_upsample(vertices, coarse, coarse_faces, kept))
        kept_indices.append(kept)
        level_vertices.append(coarse)
        level_faces.append(coarse_faces)
        logger.info(f"Hierarchy level {k + 1}: {n} -> {len(kept)} vertices")

    return SamplingHierarchy(
        level_vertices=level_vertices,
        level_faces=level_faces,
        kept_indices=kept_indices,
        down=down,
        up=up,
        factors=factors,
    )
