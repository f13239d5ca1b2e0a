"""
Topology asset: landmark indices, sampling hierarchy and spirals in one JSON file.

The asset is generated once per template mesh and referenced by its content
hash, so checkpoints refuse to load against a different topology.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel
from scipy.spatial import cKDTree

from app.mesh_core import Mesh, Topology
from app.models import HierarchyConfig
from app.sampling import SamplingHierarchy, build_sampling_hierarchy
from app.spirals import SpiralIndexTable, compute_hierarchy_spirals

logger = logging.getLogger(__name__)

ASSET_VERSION = 1


class TopologyAsset(BaseModel):
    """Everything S2D needs about the shared mesh connectivity."""
    topology: Topology
    hierarchy: SamplingHierarchy
    spirals: SpiralIndexTable
    content_hash: str

    class Config:
        arbitrary_types_allowed = True

    @property
    def template(self) -> Mesh:
        return Mesh(vertices=self.hierarchy.level_vertices[0], faces=self.topology.faces)

    def coarse_landmark_vertices(self) -> np.ndarray:
        """Index of the coarsest-level vertex closest to each landmark."""
        landmarks = self.hierarchy.level_vertices[0][self.topology.landmark_indices]
        _, nearest = cKDTree(self.hierarchy.level_vertices[-1]).query(landmarks)
        return np.asarray(nearest, dtype=np.int64)


def _matrix_to_triplets(matrix: sp.csr_matrix) -> Dict[str, Any]:
    coo = matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return {
        "shape": [int(s) for s in coo.shape],
        "row": coo.row[order].astype(int).tolist(),
        "col": coo.col[order].astype(int).tolist(),
        "value": coo.data[order].astype(float).tolist(),
    }


def _triplets_to_matrix(data: Dict[str, Any]) -> sp.csr_matrix:
    return sp.csr_matrix(
        (np.asarray(data["value"], dtype=np.float64),
         (np.asarray(data["row"], dtype=np.int64), np.asarray(data["col"], dtype=np.int64))),
        shape=tuple(data["shape"]),
    )


def _asset_content(topo: Topology, hierarchy: SamplingHierarchy, spirals: SpiralIndexTable) -> Dict[str, Any]:
    return {
        "version": ASSET_VERSION,
        "topology": {
            "vertex_count": topo.vertex_count,
            "faces": topo.faces.tolist(),
            "landmark_indices": topo.landmark_indices.tolist(),
            "lip_indices": topo.lip_indices.tolist(),
            "mouth_jaw_indices": topo.mouth_jaw_indices.tolist(),
            "lip_vertex_indices": None if topo.lip_vertex_indices is None else topo.lip_vertex_indices.tolist(),
        },
        "hierarchy": {
            "factors": list(hierarchy.factors),
            "level_vertices": [v.astype(float).tolist() for v in hierarchy.level_vertices],
            "level_faces": [f.astype(int).tolist() for f in hierarchy.level_faces],
            "kept_indices": [k.astype(int).tolist() for k in hierarchy.kept_indices],
            "down": [_matrix_to_triplets(m) for m in hierarchy.down],
            "up": [_matrix_to_triplets(m) for m in hierarchy.up],
        },
        "spirals": {
            "dilation": spirals.dilation,
            "levels": [t.tolist() for t in spirals.levels],
        },
    }


def _hash_content(content: Dict[str, Any]) -> str:
    canonical = json.dumps(content, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def topology_hash(topo: Topology, hierarchy: SamplingHierarchy, spirals: SpiralIndexTable) -> str:
    """SHA-256 over the canonical JSON content of an asset."""
    return _hash_content(_asset_content(topo, hierarchy, spirals))


def build_topology_asset(template: Mesh, topo: Topology, config: HierarchyConfig) -> TopologyAsset:
    """
    Decimate the template, compute per-level spirals and hash the result.

    Args:
        template: Neutral template mesh (level 0)
        topo: Topology sharing the template's vertex layout
        config: Reduction factors, spiral lengths and dilation

    Returns:
        TopologyAsset ready to be saved
    """
    if template.vertex_count != topo.vertex_count:
        raise ValueError(
            f"Template has {template.vertex_count} vertices, topology expects {topo.vertex_count}"
        )
    hierarchy = build_sampling_hierarchy(template, config.factors)
    spirals = compute_hierarchy_spirals(hierarchy, config.spiral_lengths, config.dilation)
    content_hash = topology_hash(topo, hierarchy, spirals)
    logger.info(f"Built topology asset {content_hash[:12]} with levels {hierarchy.level_sizes}")
    return TopologyAsset(topology=topo, hierarchy=hierarchy, spirals=spirals, content_hash=content_hash)


def save_topology_asset(
    file_path: Union[str, Path],
    topo: Topology,
    hierarchy: SamplingHierarchy,
    spirals: SpiralIndexTable,
) -> str:
    """
    Write a topology asset as one JSON document.

    Returns:
        The content hash stored alongside the asset
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    content = _asset_content(topo, hierarchy, spirals)
    content_hash = _hash_content(content)
    with open(file_path, 'w') as f:
        json.dump({**content, "content_hash": content_hash}, f)
    logger.info(f"Saved topology asset to {file_path} ({content_hash[:12]})")
    return content_hash


def load_topology_asset(file_path: Union[str, Path]) -> TopologyAsset:
    """
    Load a topology asset and verify its content hash.

    Raises:
        ValueError: If the file is missing, malformed or its hash does not match
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise ValueError(f"Topology asset not found: {file_path}")

    try:
        with open(file_path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"Topology asset {file_path} is not valid JSON: {e}") from e

    stored_hash = data.pop("content_hash", None)
    if data.get("version") != ASSET_VERSION:
        raise ValueError(f"Unsupported topology asset version: {data.get('version')}")
    if stored_hash != _hash_content(data):
        raise ValueError(f"Topology asset {file_path} content does not match its stored hash")

    t = data["topology"]
    topo = Topology(
        faces=np.asarray(t["faces"], dtype=np.int64).reshape(-1, 3),
        vertex_count=t["vertex_count"],
        landmark_indices=t["landmark_indices"],
        lip_indices=t["lip_indices"],
        mouth_jaw_indices=t["mouth_jaw_indices"],
        lip_vertex_indices=t.get("lip_vertex_indices"),
    )
    h = data["hierarchy"]
    hierarchy = SamplingHierarchy(
        level_vertices=[np.asarray(v, dtype=np.float64).reshape(-1, 3) for v in h["level_vertices"]],
        level_faces=[np.asarray(f, dtype=np.int64).reshape(-1, 3) for f in h["level_faces"]],
        kept_indices=[np.asarray(k, dtype=np.int64) for k in h["kept_indices"]],
        down=[_triplets_to_matrix(m) for m in h["down"]],
        up=[_triplets_to_matrix(m) for m in h["up"]],
        factors=h["factors"],
    )
    spirals = SpiralIndexTable(levels=data["spirals"]["levels"], dilation=data["spirals"]["dilation"])

    logger.info(f"Loaded topology asset {file_path} ({stored_hash[:12]})")
    return TopologyAsset(topology=topo, hierarchy=hierarchy, spirals=spirals, content_hash=stored_hash)
