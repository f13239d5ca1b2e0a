"""
Audio → landmark motion → dense motion → animated mesh sequence.
"""
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from app.audio_frontend import SpeechEncoder, build_encoder, encode_for_frames
from app.checkpoint import load_checkpoint
from app.config import settings
from app.container import MotionSequence
from app.mesh_core import Mesh
from app.models import S2DConfig, S2LConfig
from app.s2d_model import Sparse2Dense, predict_dense_sequence
from app.s2l_model import Speech2Landmarks, s2l_forward
from app.topology_asset import TopologyAsset

logger = logging.getLogger(__name__)


def load_s2l_model(
    file_path: Union[str, Path],
    topology_hash: Optional[str] = None,
) -> Tuple[Speech2Landmarks, S2LConfig, dict]:
    """Rebuild a Speech2Landmarks model from its checkpoint."""
    payload = load_checkpoint(file_path, kind="s2l", topology_hash=topology_hash)
    cfg = S2LConfig(**payload["config"])
    model = Speech2Landmarks(cfg)
    model.load_state_dict(payload["state_dict"])
    model.to(torch.device(settings.device)).eval()
    return model, cfg, payload.get("extra", {})


def load_s2d_model(file_path: Union[str, Path], asset: TopologyAsset) -> Tuple[Sparse2Dense, S2DConfig]:
    """
    Rebuild a Sparse2Dense model against a topology asset.

    Raises:
        TopologyMismatchError: If the checkpoint was trained on another asset
    """
    payload = load_checkpoint(file_path, kind="s2d", topology_hash=asset.content_hash)
    cfg = S2DConfig(**payload["config"])
    model = Sparse2Dense(cfg, asset)
    model.load_state_dict(payload["state_dict"])
    model.to(torch.device(settings.device)).eval()
    return model, cfg


class AnimationPipeline:
    """Frozen S2L and S2D models with the encoder they were trained on."""

    def __init__(
        self,
        asset: TopologyAsset,
        s2l_model: Speech2Landmarks,
        s2l_cfg: S2LConfig,
        s2d_model: Sparse2Dense,
        s2d_cfg: S2DConfig,
        encoder: SpeechEncoder,
        fps: float = 60.0,
    ):
        if encoder.channels != s2l_cfg.input_channels:
            raise ValueError(
                f"Encoder '{encoder.name}' produces {encoder.channels} channels, "
                f"S2L expects {s2l_cfg.input_channels}"
            )
        if s2l_cfg.landmark_count != s2d_cfg.landmark_count:
            raise ValueError(
                f"S2L predicts {s2l_cfg.landmark_count} landmarks, S2D consumes {s2d_cfg.landmark_count}"
            )
        self.asset = asset
        self.s2l_model = s2l_model
        self.s2l_cfg = s2l_cfg
        self.s2d_model = s2d_model
        self.s2d_cfg = s2d_cfg
        self.encoder = encoder
        self.fps = fps

    @classmethod
    def from_checkpoints(
        cls,
        s2l_checkpoint: Union[str, Path],
        s2d_checkpoint: Union[str, Path],
        asset: TopologyAsset,
        encoder: Optional[SpeechEncoder] = None,
        fps: Optional[float] = None,
    ) -> 'AnimationPipeline':
        """
        Load both models and check them against the asset's topology hash.

        The encoder defaults to the one recorded in the S2L checkpoint.
        """
        s2l_model, s2l_cfg, extra = load_s2l_model(s2l_checkpoint, asset.content_hash)
        s2d_model, s2d_cfg = load_s2d_model(s2d_checkpoint, asset)
        if encoder is None:
            encoder = build_encoder(extra.get("encoder"), fps=extra.get("encoder_fps"))
        logger.info(f"Pipeline ready: encoder={encoder.name}, topology={asset.content_hash[:12]}")
        return cls(asset, s2l_model, s2l_cfg, s2d_model, s2d_cfg, encoder, fps or settings.target_fps)

    def frame_count(self, n_samples: int, sample_rate: int, fps: Optional[float] = None) -> int:
        """K = round(duration × fps), at least one frame."""
        fps = fps or self.fps
        return max(1, int(round(n_samples / float(sample_rate) * fps)))

    def predict_displacements(
        self,
        waveform: np.ndarray,
        sample_rate: int,
        fps: Optional[float] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            Tuple of (K×L×3 landmark displacements, K×M×3 dense displacements)
        """
        fps = fps or self.fps
        n_frames = self.frame_count(len(waveform), sample_rate, fps)
        features = encode_for_frames(waveform, sample_rate, self.encoder, n_frames, fps=fps)
        landmarks = s2l_forward(features, self.s2l_cfg, self.s2l_model).values
        dense = predict_dense_sequence(self.s2d_model, landmarks)
        return landmarks, dense

    def animate(
        self,
        waveform: np.ndarray,
        sample_rate: int,
        neutral: Optional[Mesh] = None,
        fps: Optional[float] = None,
    ) -> MotionSequence:
        """
        Animate a neutral face (the template when omitted) from raw audio.

        Returns:
            MotionSequence of K×M×3 vertex positions
        """
        fps = fps or self.fps
        neutral = neutral or self.asset.template
        if neutral.vertex_count != self.asset.topology.vertex_count:
            raise ValueError(
                f"Neutral mesh has {neutral.vertex_count} vertices, topology expects "
                f"{self.asset.topology.vertex_count}"
            )
        _, dense = self.predict_displacements(waveform, sample_rate, fps)
        frames = neutral.vertices[None] + dense
        logger.info(f"Animated {len(frames)} frames at {fps} fps")
        return MotionSequence(frames=frames, fps=fps)
