"""
Spiral neighbor orderings for spiral mesh convolutions.
"""
import logging
from typing import TYPE_CHECKING, Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, field_validator

if TYPE_CHECKING:
    from app.sampling import SamplingHierarchy

logger = logging.getLogger(__name__)

SENTINEL = -1
ANGLE_TOLERANCE = 1e-9


class SpiralIndexTable(BaseModel):
    """One (N_k × S_k) spiral table per resolution level, finest first."""
    levels: List[np.ndarray]
    dilation: int = 1

    class Config:
        arbitrary_types_allowed = True

    @field_validator('levels', mode='before')
    @classmethod
    def _as_int_tables(cls, value):
        tables = [np.asarray(t, dtype=np.int64) for t in value]
        for k, table in enumerate(tables):
            if table.ndim != 2 or table.shape[1] < 1:
                raise ValueError(f"spiral table {k} must be N×S with S >= 1")
            if table.shape[0] and not np.array_equal(table[:, 0], np.arange(table.shape[0])):
                raise ValueError(f"spiral table {k} does not start every spiral at its center")
            if table.size and (table.min() < SENTINEL or table.max() >= table.shape[0]):
                raise ValueError(f"spiral table {k} holds invalid vertex indices")
        return tables

    def level(self, k: int) -> np.ndarray:
        return self.levels[k]

    @property
    def spiral_lengths(self) -> List[int]:
        return [int(t.shape[1]) for t in self.levels]


def ordered_one_rings(faces: np.ndarray, vertex_count: int) -> List[List[int]]:
    """
    Rotationally ordered one-ring of every vertex.

    The orientation follows face winding: in a face (v, a, b) the neighbor b
    comes right after a. Each ring starts at its smallest neighbor index and
    continues cyclically, so open fans at the boundary wrap across the gap.
    """
    successors: List[Dict[int, int]] = [dict() for _ in range(vertex_count)]
    neighbors: List[set] = [set() for _ in range(vertex_count)]
    for face in np.asarray(faces, dtype=np.int64):
        a, b, c = (int(x) for x in face)
        for v, n1, n2 in ((a, b, c), (b, c, a), (c, a, b)):
            successors[v].setdefault(n1, n2)
            neighbors[v].update((n1, n2))

    rings: List[List[int]] = []
    for v in range(vertex_count):
        succ = successors[v]
        nodes = sorted(neighbors[v])
        if not nodes:
            rings.append([])
            continue
        has_pred = set(succ.values())
        order: List[int] = []
        seen = set()
        # open fans first (chain heads), then closed cycles
        heads = [n for n in nodes if n not in has_pred]
        for start in heads + nodes:
            node = start
            while node is not None and node not in seen:
                seen.add(node)
                order.append(node)
                node = succ.get(node)
        pivot = order.index(min(order))
        rings.append(order[pivot:] + order[:pivot])
    return rings


def _tangent_frame(vertices: np.ndarray, faces_at: np.ndarray, center: int, anchor: int):
    """
    Orthonormal (e1, e2) in the tangent plane of center, e1 toward anchor.

    The normal is the area-weighted sum of incident face normals, so e1 → e2
    turns in the face-winding direction. Returns None for degenerate stars.
    """
    tri = vertices[faces_at]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]).sum(axis=0)
    length = np.linalg.norm(normal)
    if length < 1e-12:
        return None
    normal = normal / length
    toward = vertices[anchor] - vertices[center]
    e1 = toward - np.dot(toward, normal) * normal
    e1_length = np.linalg.norm(e1)
    if e1_length < 1e-12:
        return None
    e1 = e1 / e1_length
    return e1, np.cross(normal, e1)


def angular_order(vertices: np.ndarray, center: int, ring: Sequence[int], frame) -> List[int]:
    """Ring sorted by counterclockwise angle from e1 in [0, 2π); ties by index."""
    e1, e2 = frame
    offsets = vertices[np.asarray(ring, dtype=np.int64)] - vertices[center]
    angles = np.mod(np.arctan2(offsets @ e2, offsets @ e1), 2.0 * np.pi)
    angles[angles > 2.0 * np.pi - ANGLE_TOLERANCE] = 0.0
    order = np.lexsort((np.asarray(ring), angles))
    return [int(ring[i]) for i in order]


def compute_spirals(
    faces: np.ndarray,
    vertices: np.ndarray,
    spiral_length: int,
    dilation: int = 1,
) -> SpiralIndexTable:
    """
    Build a spiral ordering for every vertex of one resolution level.

    The spiral lists the center, then its one-ring in face-winding order
    starting at the smallest neighbor index, then each further hop ring as one
    counterclockwise sweep in the center's tangent plane that starts at the
    direction of that first neighbor. Rings are collected until
    (spiral_length - 1) * dilation + 1 entries exist; every dilation-th entry
    is kept and missing entries are padded with -1.

    Args:
        faces: F×3 triangle indices of the level
        vertices: N×3 vertex positions of the level
        spiral_length: Entries per spiral (>= 1)
        dilation: Sampling step along the spiral (>= 1)

    Returns:
        SpiralIndexTable with a single level
    """
    if spiral_length < 1:
        raise ValueError(f"spiral_length must be >= 1, got {spiral_length}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")

    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    vertex_count = vertices.shape[0]
    rings = ordered_one_rings(faces, vertex_count)
    incident: List[List[int]] = [[] for _ in range(vertex_count)]
    for f, face in enumerate(faces):
        for v in face:
            incident[int(v)].append(f)

    needed = (spiral_length - 1) * dilation + 1
    table = np.full((vertex_count, spiral_length), SENTINEL, dtype=np.int64)
    unframed = 0

    for v in range(vertex_count):
        sequence = [v] + rings[v]
        visited = set(sequence)
        frontier = rings[v]
        frame = None
        if len(sequence) < needed and rings[v]:
            frame = _tangent_frame(vertices, faces[incident[v]], v, rings[v][0])
            unframed += frame is None
        while len(sequence) < needed and frontier:
            next_ring = []
            for u in frontier:
                for w in rings[u]:
                    if w not in visited:
                        visited.add(w)
                        next_ring.append(w)
            if next_ring and frame is not None:
                next_ring = angular_order(vertices, v, next_ring, frame)
            sequence.extend(next_ring)
            frontier = next_ring
        sampled = sequence[:needed][::dilation]
        table[v, :len(sampled)] = sampled

    isolated = sum(1 for r in rings if not r)
    if isolated:
        logger.warning(f"{isolated} isolated vertices get center-only spirals")
    if unframed:
        logger.warning(f"{unframed} vertices have a degenerate star; outer rings keep discovery order")
    return SpiralIndexTable(levels=[table], dilation=dilation)


def compute_hierarchy_spirals(
    hierarchy: 'SamplingHierarchy',
    spiral_lengths: Sequence[int],
    dilation: int = 1,
) -> SpiralIndexTable:
    """Spiral tables for every level of a sampling hierarchy."""
    level_faces = hierarchy.level_faces
    level_vertices = hierarchy.level_vertices
    level_sizes = hierarchy.level_sizes
    if len(spiral_lengths) != len(level_sizes):
        raise ValueError(
            f"need one spiral length per level ({len(level_sizes)}), got {len(spiral_lengths)}"
        )
    tables = [
        compute_spirals(faces, vertices, length, dilation).level(0)
        for faces, vertices, length in zip(level_faces, level_vertices, spiral_lengths)
    ]
    logger.info(f"Computed spirals for {len(tables)} levels, lengths {list(spiral_lengths)}")
    return SpiralIndexTable(levels=tables, dilation=dilation)
