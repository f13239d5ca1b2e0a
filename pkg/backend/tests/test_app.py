"""
Tests for the LipField HTTP service.
"""
import io

import numpy as np
import pytest
import soundfile as sf
import torch
from fastapi.testclient import TestClient

import app.main as service
from app.container import decode_container
from app.models import S2DConfig, S2LConfig
from app.pipeline import AnimationPipeline
from app.s2d_model import Sparse2Dense
from app.s2l_model import Speech2Landmarks


def wav_bytes(seconds=0.5, sample_rate=16000):
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    buffer = io.BytesIO()
    sf.write(buffer, (0.2 * np.sin(2 * np.pi * 180.0 * t)).astype(np.float32), sample_rate,
             format='WAV', subtype='PCM_16')
    return buffer.getvalue()


@pytest.fixture
def client():
    # no context manager: the lifespan would reload the pipeline from settings
    return TestClient(service.app)


@pytest.fixture
def loaded(monkeypatch, toy_asset, small_encoder):
    """Untrained but fully wired pipeline on the toy topology."""
    torch.manual_seed(0)
    landmarks = toy_asset.topology.landmark_count
    s2l_cfg = S2LConfig(input_channels=small_encoder.channels, landmark_count=landmarks, hidden_size=8,
                        lstm_layers=1)
    s2d_cfg = S2DConfig(landmark_count=landmarks, layer_channels=[4, 4, 4, 4, 4])
    pipeline = AnimationPipeline(
        toy_asset,
        Speech2Landmarks(s2l_cfg).eval(), s2l_cfg,
        Sparse2Dense(s2d_cfg, toy_asset).eval(), s2d_cfg,
        small_encoder,
        fps=60.0,
    )
    monkeypatch.setattr(service, "pipeline", pipeline)
    monkeypatch.setattr(service, "neutral_mesh", None)
    return pipeline


class TestServiceStatus:
    """Root, health and topology endpoints."""

    def test_root(self, client):
        response = client.get("/")

        assert response.status_code == 200
        assert response.json()["service"] == "LipField API"

    def test_health_without_pipeline(self, client, monkeypatch):
        monkeypatch.setattr(service, "pipeline", None)

        body = client.get("/health").json()

        assert body["status"] == "healthy"
        assert body["pipeline_loaded"] is False

    def test_topology_unavailable(self, client, monkeypatch):
        monkeypatch.setattr(service, "pipeline", None)

        assert client.get("/api/topology").status_code == 503

    def test_topology(self, client, loaded, toy_asset):
        body = client.get("/api/topology").json()

        assert body["content_hash"] == toy_asset.content_hash
        assert body["vertex_count"] == 162
        assert body["level_sizes"][0] == 162
        assert body["encoder"] == "spectrogram"

    def test_service_stays_down_without_settings(self, monkeypatch):
        monkeypatch.setattr(service.settings, "topology_path", None)

        assert service.load_service_pipeline() is None


class TestAnimateEndpoint:
    """POST /api/animate with a WAV body."""

    def test_animate_returns_container(self, client, loaded):
        response = client.post("/api/animate", content=wav_bytes(0.5))

        assert response.status_code == 200
        assert response.headers["content-type"] == "application/octet-stream"
        motion = decode_container(response.content)
        assert motion.frame_count == 30
        assert motion.point_count == 162
        assert response.headers["X-Frame-Count"] == "30"
        assert np.all(np.isfinite(motion.frames))

    def test_frame_rate_query(self, client, loaded):
        response = client.post("/api/animate?fps=30", content=wav_bytes(1.0))

        assert response.status_code == 200
        assert decode_container(response.content).frame_count == 30
        assert response.headers["X-Frame-Rate"] == "30"

    def test_rejects_non_positive_fps(self, client, loaded):
        assert client.post("/api/animate?fps=0", content=wav_bytes()).status_code == 422

    def test_rejects_garbage_audio(self, client, loaded):
        response = client.post("/api/animate", content=b"definitely not a wav file")

        assert response.status_code == 400
        assert "decode" in response.json()["detail"]

    def test_rejects_empty_body(self, client, loaded):
        assert client.post("/api/animate", content=b"").status_code == 400

    def test_unavailable_without_pipeline(self, client, monkeypatch):
        monkeypatch.setattr(service, "pipeline", None)

        assert client.post("/api/animate", content=wav_bytes()).status_code == 503
