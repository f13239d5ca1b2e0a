"""
Shared fixtures: a small toy head, its topology asset and talking sequences.
"""
import numpy as np
import pytest
import soundfile as sf
import trimesh

from app.audio_frontend import SpectrogramEncoder
from app.data_pipeline import generate_toy_dataset, make_toy_mesh
from app.mesh_core import Mesh, make_toy_topology
from app.models import HierarchyConfig, ToyDatasetConfig
from app.topology_asset import build_topology_asset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture(scope="session")
def toy_config():
    """162-vertex icosphere head, three subjects, half a second each."""
    return ToyDatasetConfig(n_subjects=3, n_sentences=1, duration=0.5, subdivisions=2, n_landmarks=12, seed=0)


@pytest.fixture(scope="session")
def toy_mesh(toy_config):
    return make_toy_mesh(toy_config)


@pytest.fixture(scope="session")
def toy_topology(toy_mesh, toy_config):
    return make_toy_topology(toy_mesh, toy_config.n_landmarks)


@pytest.fixture(scope="session")
def hierarchy_config():
    return HierarchyConfig(factors=[0.5] * 5, spiral_lengths=[9] * 6, dilation=1)


@pytest.fixture(scope="session")
def toy_asset(toy_mesh, toy_topology, hierarchy_config):
    return build_topology_asset(toy_mesh, toy_topology, hierarchy_config)


@pytest.fixture(scope="session")
def toy_sequences(toy_config, toy_mesh, toy_topology):
    return generate_toy_dataset(toy_config, toy_mesh, toy_topology)


@pytest.fixture(scope="session")
def small_encoder():
    return SpectrogramEncoder(n_mels=16, fps=60.0)


@pytest.fixture
def unit_sphere():
    sphere = trimesh.creation.icosphere(subdivisions=2, radius=1.0)
    return Mesh(vertices=sphere.vertices, faces=sphere.faces)


@pytest.fixture
def tetrahedron():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(vertices=vertices, faces=faces)


@pytest.fixture
def write_wav(tmp_path):
    """Write a mono waveform to a WAV file and return its path."""
    def _write(waveform, sample_rate=16000, name="speech.wav"):
        path = tmp_path / name
        sf.write(str(path), np.asarray(waveform, dtype=np.float32), sample_rate, subtype='PCM_16')
        return path
    return _write
