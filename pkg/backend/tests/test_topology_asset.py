"""
Unit tests for building, saving and loading topology assets.
"""
import json

import numpy as np
import pytest

from app.models import HierarchyConfig
from app.topology_asset import build_topology_asset, load_topology_asset, save_topology_asset


class TestTopologyAsset:
    """Tests for the single-file topology asset."""

    def test_asset_contents(self, toy_asset, toy_topology, hierarchy_config):
        assert toy_asset.hierarchy.level_sizes[0] == toy_topology.vertex_count
        assert toy_asset.spirals.spiral_lengths == hierarchy_config.spiral_lengths
        for size, table in zip(toy_asset.hierarchy.level_sizes, toy_asset.spirals.levels):
            assert table.shape[0] == size
        assert len(toy_asset.content_hash) == 64

    def test_saved_asset_loads_identically(self, tmp_path, toy_asset):
        path = tmp_path / "topology.json"
        stored = save_topology_asset(path, toy_asset.topology, toy_asset.hierarchy, toy_asset.spirals)

        loaded = load_topology_asset(path)

        assert stored == toy_asset.content_hash == loaded.content_hash
        assert loaded.hierarchy.level_sizes == toy_asset.hierarchy.level_sizes
        np.testing.assert_array_equal(loaded.topology.landmark_indices, toy_asset.topology.landmark_indices)
        for a, b in zip(loaded.spirals.levels, toy_asset.spirals.levels):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.hierarchy.up, toy_asset.hierarchy.up):
            np.testing.assert_allclose(a.toarray(), b.toarray())

    def test_rebuilding_is_deterministic(self, toy_mesh, toy_topology, hierarchy_config, toy_asset):
        rebuilt = build_topology_asset(toy_mesh, toy_topology, hierarchy_config)

        assert rebuilt.content_hash == toy_asset.content_hash

    def test_other_hierarchy_changes_the_hash(self, toy_mesh, toy_topology, toy_asset):
        other = build_topology_asset(toy_mesh, toy_topology, HierarchyConfig(factors=[0.5] * 5, spiral_lengths=[7] * 6))

        assert other.content_hash != toy_asset.content_hash

    def test_tampered_asset_is_rejected(self, tmp_path, toy_asset):
        path = tmp_path / "topology.json"
        save_topology_asset(path, toy_asset.topology, toy_asset.hierarchy, toy_asset.spirals)
        data = json.loads(path.read_text())
        data["topology"]["landmark_indices"][0] = data["topology"]["landmark_indices"][1]
        path.write_text(json.dumps(data))

        with pytest.raises(ValueError, match="does not match its stored hash"):
            load_topology_asset(path)

    def test_missing_asset(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_topology_asset(tmp_path / "absent.json")

    def test_coarse_landmark_vertices(self, toy_asset):
        nearest = toy_asset.coarse_landmark_vertices()

        assert nearest.shape == (toy_asset.topology.landmark_count,)
        assert nearest.max() < toy_asset.hierarchy.level_sizes[-1]
