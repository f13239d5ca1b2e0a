"""
Unit tests for spiral orderings, checked against a ring-by-ring angular oracle.
"""
from collections import deque

import numpy as np
import pytest
import trimesh

from app.spirals import SENTINEL, SpiralIndexTable, compute_spirals, ordered_one_rings


def graph_distances(faces, vertex_count, source):
    """Hop distance from source to every vertex."""
    adjacency = [set() for _ in range(vertex_count)]
    for a, b, c in faces:
        adjacency[a] |= {b, c}
        adjacency[b] |= {a, c}
        adjacency[c] |= {a, b}
    distance = np.full(vertex_count, -1)
    distance[source] = 0
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for w in adjacency[v]:
            if distance[w] < 0:
                distance[w] = distance[v] + 1
                queue.append(w)
    return distance


def reference_spiral(faces, vertices, v, needed):
    """
    Brute-force spiral: hop rings by BFS, each ring sorted by counterclockwise
    angle around the star normal, measured from the smallest-index neighbor.
    """
    distance = graph_distances(faces, len(vertices), v)
    star = faces[np.any(faces == v, axis=1)]
    if len(star) == 0:
        return [v]
    normal = np.zeros(3)
    for a, b, c in star:
        normal += np.cross(vertices[b] - vertices[a], vertices[c] - vertices[a])
    normal /= np.linalg.norm(normal)

    anchor = int(np.flatnonzero(distance == 1).min())
    axis = vertices[anchor] - vertices[v]
    axis -= normal * axis.dot(normal)
    axis /= np.linalg.norm(axis)
    side = np.cross(normal, axis)

    spiral = [v]
    hop = 1
    while len(spiral) < needed and np.any(distance == hop):
        ring = np.flatnonzero(distance == hop)
        keyed = []
        for w in ring:
            offset = vertices[w] - vertices[v]
            angle = np.arctan2(offset.dot(side), offset.dot(axis)) % (2 * np.pi)
            if angle > 2 * np.pi - 1e-9:
                angle = 0.0
            keyed.append((angle, int(w)))
        spiral.extend(w for _, w in sorted(keyed))
        hop += 1
    spiral = spiral[:needed]
    return spiral + [SENTINEL] * (needed - len(spiral))


def icosphere(subdivisions):
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions)
    return np.asarray(mesh.faces), np.asarray(mesh.vertices)


@pytest.fixture
def sphere():
    return icosphere(1)


def grid_patch(size=10):
    """size×size planar vertex grid, two consistently wound triangles per cell."""
    faces = []
    for r in range(size - 1):
        for c in range(size - 1):
            v = r * size + c
            faces.append([v, v + 1, v + size + 1])
            faces.append([v, v + size + 1, v + size])
    rows, cols = np.divmod(np.arange(size * size), size)
    vertices = np.stack([cols, rows, np.zeros_like(rows)], axis=1).astype(np.float64)
    return np.array(faces), vertices


MESHES = {
    "icosphere": lambda: icosphere(2),
    "grid": grid_patch,
}


class TestOneRings:
    """Tests for rotationally ordered one-rings."""

    def test_rings_follow_face_winding(self, sphere):
        faces, vertices = sphere
        n = len(vertices)
        rings = ordered_one_rings(faces, n)
        oriented = set()
        for a, b, c in faces:
            oriented |= {(a, b, c), (b, c, a), (c, a, b)}

        for v, ring in enumerate(rings):
            assert ring[0] == min(ring)
            for i in range(len(ring)):
                assert (v, ring[i], ring[(i + 1) % len(ring)]) in oriented

    def test_open_fan_at_boundary(self):
        # center 0 with three triangles fanned around it, open between 1 and 4
        faces = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4]])

        rings = ordered_one_rings(faces, 5)

        assert rings[0] == [1, 2, 3, 4]
        assert sorted(rings[2]) == [0, 1, 3]


class TestComputeSpirals:
    """Tests for spiral index tables."""

    @pytest.mark.parametrize("mesh_name", sorted(MESHES))
    @pytest.mark.parametrize("length", [1, 7, 12])
    @pytest.mark.parametrize("dilation", [1, 2])
    def test_spirals_match_angular_oracle(self, mesh_name, length, dilation):
        faces, vertices = MESHES[mesh_name]()
        n = len(vertices)
        needed = (length - 1) * dilation + 1

        table = compute_spirals(faces, vertices, length, dilation).level(0)

        assert table.shape == (n, length)
        np.testing.assert_array_equal(table[:, 0], np.arange(n))
        for v in range(n):
            expected = reference_spiral(faces, vertices, v, needed)[::dilation]
            assert table[v].tolist() == expected, f"vertex {v}"

    def test_icosphere_has_162_vertices(self):
        _, vertices = MESHES["icosphere"]()

        assert len(vertices) == 162

    def test_interior_grid_vertex(self):
        faces, vertices = grid_patch(10)

        table = compute_spirals(faces, vertices, 12).level(0)

        # one-ring in winding order from 33, then the second ring swept from the same direction
        assert table[44].tolist() == [44, 33, 34, 45, 55, 54, 43, 22, 23, 24, 35, 46]

    def test_second_ring_is_a_full_sweep(self):
        faces, vertices = grid_patch(10)

        table = compute_spirals(faces, vertices, 19).level(0)

        assert table[44, 7:].tolist() == [22, 23, 24, 35, 46, 56, 66, 65, 64, 53, 42, 32]

    def test_boundary_vertex_with_three_neighbors(self):
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])

        table = compute_spirals(faces, vertices, 7).level(0)

        assert table[0].tolist() == [0, 1, 2, 3, SENTINEL, SENTINEL, SENTINEL]

    def test_isolated_vertex_gets_center_only(self):
        faces = np.array([[0, 1, 2]])
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]])

        table = compute_spirals(faces, vertices, 4).level(0)

        assert table[3].tolist() == [3, SENTINEL, SENTINEL, SENTINEL]

    def test_spiral_length_one_is_the_center(self, sphere):
        faces, vertices = sphere

        table = compute_spirals(faces, vertices, 1).level(0)

        np.testing.assert_array_equal(table[:, 0], np.arange(len(vertices)))
        assert table.shape[1] == 1

    def test_second_entry_starts_the_ordered_ring(self, sphere):
        faces, vertices = sphere
        rings = ordered_one_rings(faces, len(vertices))

        table = compute_spirals(faces, vertices, 7).level(0)

        for v in range(len(vertices)):
            assert table[v, 1:1 + len(rings[v])].tolist() == rings[v][:6]

    def test_deterministic(self, sphere):
        faces, vertices = sphere

        first = compute_spirals(faces, vertices, 12, 2).level(0)
        second = compute_spirals(faces, vertices, 12, 2).level(0)

        np.testing.assert_array_equal(first, second)

    def test_short_meshes_are_padded(self):
        faces = np.array([[0, 1, 2]])
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

        table = compute_spirals(faces, vertices, 9).level(0)

        assert table.shape == (3, 9)
        assert np.all(table[:, 3:] == SENTINEL)
        assert sorted(table[0, :3].tolist()) == [0, 1, 2]

    def test_dilation_samples_every_nth_entry(self, sphere):
        faces, vertices = sphere
        length, dilation = 5, 2
        long_table = compute_spirals(faces, vertices, (length - 1) * dilation + 1).level(0)

        dilated = compute_spirals(faces, vertices, length, dilation)

        np.testing.assert_array_equal(dilated.level(0), long_table[:, ::dilation])
        assert dilated.dilation == dilation

    @pytest.mark.parametrize("length,dilation", [(0, 1), (9, 0)])
    def test_invalid_parameters(self, sphere, length, dilation):
        faces, vertices = sphere
        with pytest.raises(ValueError):
            compute_spirals(faces, vertices, length, dilation)

    def test_table_must_start_at_center(self):
        with pytest.raises(ValueError, match="center"):
            SpiralIndexTable(levels=[np.array([[1, 0], [0, 1]])])
