"""
Fixed-topology face meshes, landmark indexing and landmark-proximity weights.
"""
import hashlib
import json
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DEFAULT_REGIONS_FILE = Path(__file__).resolve().parent.parent / "data" / "ibug68_regions.json"

IBUG_LANDMARK_COUNT = 68


class Mesh(BaseModel):
    """Triangle mesh with vertices in millimeters."""
    vertices: np.ndarray
    faces: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @field_validator('vertices', mode='before')
    @classmethod
    def _as_vertex_array(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2 or value.shape[1] != 3:
            raise ValueError(f"vertices must be M×3, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("vertices contain NaN or Inf coordinates")
        return value

    @field_validator('faces', mode='before')
    @classmethod
    def _as_face_array(cls, value):
        value = np.asarray(value, dtype=np.int64)
        if value.size == 0:
            value = value.reshape(0, 3)
        if value.ndim != 2 or value.shape[1] != 3:
            raise ValueError(f"faces must be F×3 triangles, got shape {value.shape}")
        return value

    @model_validator(mode='after')
    def _faces_in_range(self) -> 'Mesh':
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(
                f"face indices must lie in [0, {len(self.vertices)}), "
                f"found range [{self.faces.min()}, {self.faces.max()}]"
            )
        return self

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def face_count(self) -> int:
        return int(self.faces.shape[0])

    def with_vertices(self, vertices: np.ndarray) -> 'Mesh':
        """Same connectivity, new vertex positions."""
        return Mesh(vertices=vertices, faces=self.faces)


class Topology(BaseModel):
    """Shared connectivity plus the designated landmark vertices."""
    faces: np.ndarray
    vertex_count: int
    landmark_indices: np.ndarray
    lip_indices: np.ndarray
    mouth_jaw_indices: np.ndarray
    lip_vertex_indices: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True

    @field_validator('faces', 'landmark_indices', 'lip_indices', 'mouth_jaw_indices', mode='before')
    @classmethod
    def _as_index_array(cls, value):
        return np.asarray(value, dtype=np.int64)

    @field_validator('lip_vertex_indices', mode='before')
    @classmethod
    def _as_optional_index_array(cls, value):
        return None if value is None else np.asarray(value, dtype=np.int64)

    @model_validator(mode='after')
    def _check_indices(self) -> 'Topology':
        n_landmarks = len(self.landmark_indices)
        if n_landmarks == 0:
            raise ValueError("landmark_indices must not be empty")
        if len(np.unique(self.landmark_indices)) != n_landmarks:
            raise ValueError("landmark_indices must be distinct")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= self.vertex_count:
            raise ValueError(f"landmark_indices must lie in [0, {self.vertex_count})")
        if len(self.lip_indices) == 0:
            raise ValueError("lip_indices must not be empty")
        for name in ('lip_indices', 'mouth_jaw_indices'):
            subset = getattr(self, name)
            if len(subset) and (subset.min() < 0 or subset.max() >= n_landmarks):
                raise ValueError(f"{name} must index into the {n_landmarks} landmarks")
        if self.lip_vertex_indices is not None and len(self.lip_vertex_indices):
            if self.lip_vertex_indices.min() < 0 or self.lip_vertex_indices.max() >= self.vertex_count:
                raise ValueError(f"lip_vertex_indices must lie in [0, {self.vertex_count})")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.vertex_count):
            raise ValueError("topology faces reference vertices out of range")
        return self

    @property
    def landmark_count(self) -> int:
        return int(len(self.landmark_indices))

    @property
    def dense_lip_indices(self) -> np.ndarray:
        """Mesh vertices used for the dense lips error."""
        if self.lip_vertex_indices is not None and len(self.lip_vertex_indices):
            return self.lip_vertex_indices
        return self.landmark_indices[self.lip_indices]

    @classmethod
    def from_mesh(
        cls,
        mesh: Mesh,
        landmark_indices,
        lip_indices=None,
        mouth_jaw_indices=None,
        lip_vertex_indices=None,
    ) -> 'Topology':
        """
        Build a topology from a template mesh and landmark vertex indices.

        Defaults follow the iBUG 68-point convention when 68 landmarks are given.
        """
        n_landmarks = len(landmark_indices)
        if n_landmarks == IBUG_LANDMARK_COUNT and (lip_indices is None or mouth_jaw_indices is None):
            regions = load_landmark_regions()
            # jaw contour + mouth for the mouth loss, lips for LE
            lip_indices = regions["lips"] if lip_indices is None else lip_indices
            mouth_jaw_indices = regions["jaw"] + regions["mouth"] if mouth_jaw_indices is None else mouth_jaw_indices
        if lip_indices is None:
            lip_indices = list(range(n_landmarks))
        if mouth_jaw_indices is None:
            mouth_jaw_indices = list(range(n_landmarks))
        return cls(
            faces=mesh.faces,
            vertex_count=mesh.vertex_count,
            landmark_indices=landmark_indices,
            lip_indices=lip_indices,
            mouth_jaw_indices=mouth_jaw_indices,
            lip_vertex_indices=lip_vertex_indices,
        )


class VertexWeights(BaseModel):
    """Per-vertex weights for the landmark-proximity loss."""
    weights: np.ndarray
    eps: float

    class Config:
        arbitrary_types_allowed = True

    @field_validator('weights', mode='before')
    @classmethod
    def _positive_finite(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 1:
            raise ValueError("weights must be a vector")
        if not np.all(np.isfinite(value)) or np.any(value <= 0):
            raise ValueError("weights must be positive and finite")
        return value


def extract_landmarks(mesh: Mesh, topo: Topology) -> np.ndarray:
    """
    Gather landmark positions from a mesh.

    Args:
        mesh: Mesh sharing the topology's vertex layout
        topo: Topology holding landmark_indices

    Returns:
        L×3 array in landmark index order

    Raises:
        ValueError: If the vertex count does not match the topology
    """
    if mesh.vertex_count != topo.vertex_count:
        raise ValueError(
            f"Mesh has {mesh.vertex_count} vertices, topology expects {topo.vertex_count}"
        )
    return mesh.vertices[topo.landmark_indices].copy()


WEIGHT_CACHE_SIZE = 8


class _WeightKey:
    """Hashable (geometry, landmarks, eps) triple compared by content digest."""

    def __init__(self, vertices: np.ndarray, landmark_indices: np.ndarray, eps: float):
        self.vertices = vertices
        self.landmark_indices = landmark_indices
        self.eps = eps
        digest = hashlib.sha1()
        digest.update(np.ascontiguousarray(vertices).tobytes())
        digest.update(np.ascontiguousarray(landmark_indices).tobytes())
        digest.update(repr(float(eps)).encode())
        self.digest = digest.hexdigest()

    def __hash__(self) -> int:
        return hash(self.digest)

    def __eq__(self, other) -> bool:
        return isinstance(other, _WeightKey) and other.digest == self.digest


@lru_cache(maxsize=WEIGHT_CACHE_SIZE)
def _landmark_weights(key: _WeightKey) -> VertexWeights:
    landmarks = key.vertices[key.landmark_indices]
    distances, _ = cKDTree(landmarks).query(key.vertices)
    weights = VertexWeights(weights=1.0 / np.maximum(key.eps, distances), eps=key.eps)
    logger.info(
        f"Computed landmark weights for {key.vertices.shape[0]} vertices "
        f"(range {weights.weights.min():.4f}..{weights.weights.max():.4f})"
    )
    return weights


def compute_landmark_weights(neutral: Mesh, topo: Topology, eps: float = 1e-3) -> VertexWeights:
    """
    Inverse distance from every vertex to its closest landmark.

    The distance is clamped from below by eps, so vertices lying on a landmark
    get weight 1/eps. The most recent WEIGHT_CACHE_SIZE results are kept per
    (geometry, landmarks, eps).

    Args:
        neutral: Neutral (template) mesh
        topo: Topology with landmark_indices
        eps: Distance floor in millimeters

    Returns:
        VertexWeights with one positive weight per vertex
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if neutral.vertex_count != topo.vertex_count:
        raise ValueError(
            f"Mesh has {neutral.vertex_count} vertices, topology expects {topo.vertex_count}"
        )
    indices = np.asarray(topo.landmark_indices, dtype=np.int64)
    return _landmark_weights(_WeightKey(neutral.vertices, indices, float(eps)))


def load_landmark_regions(file_path: Union[str, Path] = DEFAULT_REGIONS_FILE) -> Dict[str, List[int]]:
    """
    Load named landmark regions (jaw, brows, nose, eyes, mouth, lips).

    Args:
        file_path: Path to the regions JSON file

    Returns:
        Mapping of region name to landmark positions
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise ValueError(f"Landmark region file not found: {file_path}")
    with open(file_path, 'r') as f:
        data = json.load(f)
    regions = {name: [int(i) for i in indices] for name, indices in data.get('regions', {}).items()}
    logger.info(f"Loaded {len(regions)} landmark regions from {file_path}")
    return regions


def _direction(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Unit vector facing +z, azimuth around +y, elevation towards +y."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])


def make_toy_topology(mesh: Mesh, n_landmarks: int = 20) -> Topology:
    """
    Designate face-like landmarks on a sphere-like toy mesh centered at the origin.

    The layout mimics the 68-point convention at small scale: a jaw arc first,
    then brows/eyes/nose, then a mouth ring. Each target direction snaps to the
    nearest unused vertex, so indices stay distinct on coarse meshes.

    Args:
        mesh: Toy mesh (e.g. an icosphere)
        n_landmarks: Total number of landmarks (>= 4)

    Returns:
        Topology whose mouth/jaw subset is jaw + mouth and lip subset is the mouth
    """
    if n_landmarks < 4:
        raise ValueError(f"toy topology needs at least 4 landmarks, got {n_landmarks}")
    if n_landmarks > mesh.vertex_count:
        raise ValueError(f"cannot place {n_landmarks} landmarks on {mesh.vertex_count} vertices")

    n_jaw = max(1, round(0.35 * n_landmarks))
    n_mouth = max(2, round(0.4 * n_landmarks))
    n_upper = n_landmarks - n_jaw - n_mouth
    if n_upper < 0:
        n_mouth += n_upper
        n_upper = 0

    targets = []
    for k in range(n_jaw):
        t = -1.0 + 2.0 * k / max(1, n_jaw - 1)
        targets.append(_direction(60.0 * t, -50.0 + 15.0 * t * t))
    for k in range(n_upper):
        t = -1.0 + 2.0 * k / max(1, n_upper - 1)
        targets.append(_direction(35.0 * t, 25.0 - 20.0 * (1.0 - abs(t))))
    for k in range(n_mouth):
        angle = 2.0 * math.pi * k / n_mouth
        targets.append(_direction(22.0 * math.cos(angle), -22.0 + 9.0 * math.sin(angle)))

    center = mesh.vertices.mean(axis=0)
    directions = mesh.vertices - center
    directions /= np.linalg.norm(directions, axis=1, keepdims=True).clip(min=1e-12)

    chosen: List[int] = []
    for target in targets:
        order = np.argsort(-(directions @ target), kind='stable')
        chosen.append(int(next(i for i in order if i not in chosen)))

    jaw = list(range(n_jaw))
    mouth = list(range(n_jaw + n_upper, n_landmarks))
    return Topology.from_mesh(
        mesh,
        landmark_indices=chosen,
        lip_indices=mouth,
        mouth_jaw_indices=jaw + mouth,
    )
