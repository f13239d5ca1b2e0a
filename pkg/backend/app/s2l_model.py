"""
Speech2Landmarks: Bi-LSTM regression from audio features to landmark displacements.
"""
import logging
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, field_validator

from app.audio_frontend import FeatureSequence
from app.models import S2LConfig

logger = logging.getLogger(__name__)

SequenceBatch = Union[torch.Tensor, Sequence[torch.Tensor]]


class LandmarkDisplacementSequence(BaseModel):
    """Predicted K×L×3 landmark displacements in millimeters."""
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @field_validator('values', mode='before')
    @classmethod
    def _finite_frames(cls, value):
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 3 or value.shape[2] != 3:
            raise ValueError(f"landmark displacements must be K×L×3, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("landmark displacements contain NaN or Inf")
        return value


class Speech2Landmarks(nn.Module):
    """Multilayer (bi)directional LSTM followed by a per-frame linear head."""

    def __init__(self, cfg: S2LConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(
            input_size=cfg.input_channels,
            hidden_size=cfg.hidden_size,
            num_layers=cfg.lstm_layers,
            batch_first=True,
            bidirectional=cfg.bidirectional,
        )
        directions = 2 if cfg.bidirectional else 1
        self.head = nn.Linear(directions * cfg.hidden_size, 3 * cfg.landmark_count)
        nn.init.normal_(self.head.weight, std=cfg.head_init_std)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """
        Args:
            features: (B, T, C) or (T, C) feature tensor

        Returns:
            (B, T, L, 3) or (T, L, 3) landmark displacements
        """
        unbatched = features.dim() == 2
        if unbatched:
            features = features.unsqueeze(0)
        if features.shape[-1] != self.cfg.input_channels:
            raise ValueError(
                f"Feature width {features.shape[-1]} does not match input_channels={self.cfg.input_channels}"
            )
        hidden, _ = self.lstm(features)
        out = self.head(hidden)
        out = out.reshape(out.shape[0], out.shape[1], self.cfg.landmark_count, 3)
        return out[0] if unbatched else out


def s2l_forward(features: FeatureSequence, cfg: S2LConfig, model: Speech2Landmarks) -> LandmarkDisplacementSequence:
    """Run a trained model on one feature sequence (no gradients)."""
    if features.channels != cfg.input_channels:
        raise ValueError(
            f"Feature width {features.channels} does not match input_channels={cfg.input_channels}"
        )
    device = next(model.parameters()).device
    x = torch.from_numpy(features.features).to(device=device, dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        out = model(x)
    return LandmarkDisplacementSequence(values=out.cpu().numpy())


def _as_sequences(d_gt: SequenceBatch, d_hat: SequenceBatch) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Pair up ground truth and prediction sequences (T_n×L×3 each)."""
    if isinstance(d_gt, torch.Tensor) and d_gt.dim() == 4:
        d_gt = list(d_gt.unbind(0))
    if isinstance(d_hat, torch.Tensor) and d_hat.dim() == 4:
        d_hat = list(d_hat.unbind(0))
    if isinstance(d_gt, torch.Tensor):
        d_gt = [d_gt]
    if isinstance(d_hat, torch.Tensor):
        d_hat = [d_hat]
    if len(d_gt) != len(d_hat) or not d_gt:
        raise ValueError(f"Expected matching non-empty batches, got {len(d_gt)} and {len(d_hat)} sequences")
    pairs = []
    for n, (gt, hat) in enumerate(zip(d_gt, d_hat)):
        if gt.shape != hat.shape:
            raise ValueError(f"Sequence {n}: shape mismatch {tuple(gt.shape)} vs {tuple(hat.shape)}")
        pairs.append((gt, hat))
    return pairs


def _frame_norms(diff: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of every L×3 frame."""
    return torch.linalg.vector_norm(diff, dim=(-2, -1))


def loss_rec(d_gt: SequenceBatch, d_hat: SequenceBatch) -> torch.Tensor:
    """Mean over sequences of the mean per-frame Frobenius error."""
    pairs = _as_sequences(d_gt, d_hat)
    return torch.stack([_frame_norms(gt - hat).mean() for gt, hat in pairs]).mean()


def loss_mouth(m_gt: SequenceBatch, m_hat: SequenceBatch, mouth_jaw_indices) -> torch.Tensor:
    """loss_rec restricted to the mouth and jaw landmarks."""
    pairs = _as_sequences(m_gt, m_hat)
    index = torch.as_tensor(np.asarray(mouth_jaw_indices), dtype=torch.long)
    if index.numel() == 0:
        raise ValueError("mouth_jaw_indices must not be empty")
    n_landmarks = pairs[0][0].shape[-2]
    if index.min() < 0 or index.max() >= n_landmarks:
        raise ValueError(f"mouth_jaw_indices must lie in [0, {n_landmarks})")
    index = index.to(pairs[0][0].device)
    return loss_rec(
        [gt.index_select(-2, index) for gt, _ in pairs],
        [hat.index_select(-2, index) for _, hat in pairs],
    )


def cosine_distance(gt: torch.Tensor, hat: torch.Tensor, eps: float, dim) -> torch.Tensor:
    """1 - cos(gt, hat) along dim with both norms clamped from below by eps."""
    dot = (gt * hat).sum(dim=dim)
    norm_gt = torch.linalg.vector_norm(gt, dim=dim).clamp_min(eps)
    norm_hat = torch.linalg.vector_norm(hat, dim=dim).clamp_min(eps)
    return 1.0 - dot / (norm_gt * norm_hat)


def loss_cos(d_gt: SequenceBatch, d_hat: SequenceBatch, eps: float = 1e-8, mode: str = 'flattened') -> torch.Tensor:
    """
    Mean cosine distance between frame displacement vectors.

    'flattened' compares each frame as one 3L vector; 'per_landmark' averages
    the cosine distance of individual landmarks within each frame.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    pairs = _as_sequences(d_gt, d_hat)
    per_sequence = []
    for gt, hat in pairs:
        if mode == 'flattened':
            frames = cosine_distance(gt.flatten(-2), hat.flatten(-2), eps, dim=-1)
        elif mode == 'per_landmark':
            frames = cosine_distance(gt, hat, eps, dim=-1).mean(dim=-1)
        else:
            raise ValueError(f"Unknown cosine mode: {mode}")
        per_sequence.append(frames.mean())
    return torch.stack(per_sequence).mean()


def loss_vel(d_gt: SequenceBatch, d_hat: SequenceBatch) -> torch.Tensor:
    """
    Frame-difference mismatch: sum over t >= 2 of the Frobenius error between
    consecutive differences, divided by T_n, averaged over sequences.
    Single-frame sequences contribute 0.
    """
    pairs = _as_sequences(d_gt, d_hat)
    per_sequence = []
    for gt, hat in pairs:
        T = gt.shape[0]
        if T < 2:
            per_sequence.append(gt.new_zeros(()))
            continue
        diff = (gt[1:] - gt[:-1]) - (hat[1:] - hat[:-1])
        per_sequence.append(_frame_norms(diff).sum() / T)
    return torch.stack(per_sequence).mean()


def weighted_sum(terms: Dict[str, torch.Tensor], weights: Dict[str, float]) -> torch.Tensor:
    total = None
    for name, value in terms.items():
        contribution = weights[name] * value
        total = contribution if total is None else total + contribution
    return total


def loss_s2l_total(
    d_gt: SequenceBatch,
    d_hat: SequenceBatch,
    cfg: S2LConfig,
    mouth_jaw_indices,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    lambda1·rec + lambda2·mouth + lambda3·cos + lambda4·vel.

    Returns:
        Tuple of (total loss, per-term values before weighting)
    """
    terms = {
        "rec": loss_rec(d_gt, d_hat),
        "mouth": loss_mouth(d_gt, d_hat, mouth_jaw_indices),
        "cos": loss_cos(d_gt, d_hat, cfg.cos_eps, cfg.cos_mode),
        "vel": loss_vel(d_gt, d_hat),
    }
    weights = {"rec": cfg.lambda1, "mouth": cfg.lambda2, "cos": cfg.lambda3, "vel": cfg.lambda4}
    return weighted_sum(terms, weights), terms
