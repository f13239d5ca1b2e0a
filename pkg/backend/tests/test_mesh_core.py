"""
Unit tests for meshes, topologies, landmarks and proximity weights.
"""
import numpy as np
import pytest

import app.mesh_core as mesh_core
from app.mesh_core import (
    WEIGHT_CACHE_SIZE,
    Mesh,
    Topology,
    compute_landmark_weights,
    extract_landmarks,
    load_landmark_regions,
    make_toy_topology,
)


class TestMeshValidation:
    """Tests for Mesh and Topology construction."""

    def test_face_index_out_of_range(self):
        with pytest.raises(ValueError, match="face indices"):
            Mesh(vertices=np.zeros((3, 3)), faces=[[0, 1, 3]])

    def test_non_finite_vertices(self):
        with pytest.raises(ValueError):
            Mesh(vertices=[[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], faces=[[0, 1, 2]])

    def test_duplicate_landmarks_rejected(self, tetrahedron):
        with pytest.raises(ValueError, match="distinct"):
            Topology.from_mesh(tetrahedron, landmark_indices=[0, 1, 1])

    def test_lip_subset_must_index_landmarks(self, tetrahedron):
        with pytest.raises(ValueError, match="lip_indices"):
            Topology.from_mesh(tetrahedron, landmark_indices=[0, 1], lip_indices=[2])

    def test_ibug_defaults_for_68_landmarks(self, unit_sphere):
        topo = Topology.from_mesh(unit_sphere, landmark_indices=list(range(68)))

        assert topo.lip_indices.tolist() == list(range(48, 68))
        assert topo.mouth_jaw_indices.tolist() == list(range(17)) + list(range(48, 68))
        np.testing.assert_array_equal(topo.dense_lip_indices, np.arange(48, 68))


class TestLandmarks:
    """Tests for landmark extraction and region files."""

    def test_extract_in_index_order(self, tetrahedron):
        topo = Topology.from_mesh(tetrahedron, landmark_indices=[3, 1])

        landmarks = extract_landmarks(tetrahedron, topo)

        np.testing.assert_allclose(landmarks, [[0, 0, 1], [1, 0, 0]])

    def test_extract_rejects_other_vertex_count(self, tetrahedron, unit_sphere):
        topo = Topology.from_mesh(tetrahedron, landmark_indices=[0, 1])

        with pytest.raises(ValueError, match="topology expects 4"):
            extract_landmarks(unit_sphere, topo)

    def test_default_regions(self):
        regions = load_landmark_regions()

        assert regions["jaw"] == list(range(17))
        assert regions["lips"] == list(range(48, 68))
        assert sorted(set(sum(regions.values(), []))) == list(range(68))

    def test_toy_topology(self, toy_mesh):
        topo = make_toy_topology(toy_mesh, n_landmarks=12)

        assert topo.landmark_count == 12
        assert len(set(topo.landmark_indices.tolist())) == 12
        assert set(topo.lip_indices.tolist()) <= set(topo.mouth_jaw_indices.tolist())
        # mouth landmarks sit on the lower front of the head
        mouth = toy_mesh.vertices[topo.landmark_indices[topo.lip_indices]]
        assert mouth[:, 2].mean() > 0
        assert mouth[:, 1].mean() < 0

    def test_toy_topology_needs_four_landmarks(self, toy_mesh):
        with pytest.raises(ValueError):
            make_toy_topology(toy_mesh, n_landmarks=3)


class TestLandmarkWeights:
    """Tests for inverse-distance vertex weights."""

    def test_matches_brute_force(self, unit_sphere):
        topo = Topology.from_mesh(unit_sphere, landmark_indices=[0, 5, 17, 40])
        eps = 1e-3

        weights = compute_landmark_weights(unit_sphere, topo, eps).weights

        landmarks = unit_sphere.vertices[topo.landmark_indices]
        nearest = np.linalg.norm(unit_sphere.vertices[:, None] - landmarks[None], axis=-1).min(axis=1)
        np.testing.assert_allclose(weights, 1.0 / np.maximum(eps, nearest))
        np.testing.assert_allclose(weights[topo.landmark_indices], 1.0 / eps)

    def test_weights_are_cached(self, unit_sphere):
        topo = Topology.from_mesh(unit_sphere, landmark_indices=[1, 2, 3])

        first = compute_landmark_weights(unit_sphere, topo, 1e-2)
        second = compute_landmark_weights(unit_sphere, topo, 1e-2)

        assert first is second

    def test_non_positive_eps(self, unit_sphere):
        topo = Topology.from_mesh(unit_sphere, landmark_indices=[1, 2, 3])

        with pytest.raises(ValueError, match="eps"):
            compute_landmark_weights(unit_sphere, topo, 0.0)

    def test_clamp_and_inverse_distance(self):
        mesh = Mesh(vertices=np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                    faces=np.array([[0, 1, 2]]))
        topo = Topology.from_mesh(mesh, landmark_indices=[0])

        weights = compute_landmark_weights(mesh, topo, eps=1e-3).weights

        np.testing.assert_allclose(weights, [1000.0, 0.5, 1.0])

    def test_cache_stays_bounded(self, unit_sphere):
        topo = Topology.from_mesh(unit_sphere, landmark_indices=[1, 2, 3])

        for k in range(WEIGHT_CACHE_SIZE + 4):
            shifted = unit_sphere.with_vertices(unit_sphere.vertices + k)
            compute_landmark_weights(shifted, topo, 1e-2)

        assert mesh_core._landmark_weights.cache_info().currsize <= WEIGHT_CACHE_SIZE
