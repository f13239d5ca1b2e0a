"""
Sparse2Dense: spiral convolution decoder from landmark to dense vertex displacements.
"""
import logging
from typing import Dict, Tuple, Union

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, field_validator

from app.mesh_core import Mesh, VertexWeights
from app.models import S2DConfig
from app.s2l_model import cosine_distance, weighted_sum
from app.spirals import SENTINEL
from app.topology_asset import TopologyAsset

logger = logging.getLogger(__name__)


class DenseDisplacement(BaseModel):
    """Per-vertex M×3 displacement in millimeters."""
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @field_validator('values', mode='before')
    @classmethod
    def _finite_field(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2 or value.shape[1] != 3:
            raise ValueError(f"dense displacement must be M×3, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("dense displacement contains NaN or Inf")
        return value


def _sparse_tensor(matrix: sp.csr_matrix) -> torch.Tensor:
    coo = matrix.tocoo()
    indices = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    values = torch.from_numpy(coo.data.astype(np.float32))
    return torch.sparse_coo_tensor(indices, values, size=coo.shape).coalesce()


class SpiralConv(nn.Module):
    """Linear map over the concatenated features of each vertex's spiral."""

    def __init__(self, in_channels: int, out_channels: int, spirals: np.ndarray):
        super().__init__()
        spirals = np.asarray(spirals, dtype=np.int64)
        self.vertex_count, self.spiral_length = spirals.shape
        # sentinel entries point at an appended all-zero row
        index = np.where(spirals == SENTINEL, self.vertex_count, spirals)
        self.register_buffer('index', torch.from_numpy(index.reshape(-1)), persistent=False)
        self.in_channels = in_channels
        self.linear = nn.Linear(self.spiral_length * in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, n, channels = x.shape
        if n != self.vertex_count or channels != self.in_channels:
            raise ValueError(
                f"SpiralConv expects (B, {self.vertex_count}, {self.in_channels}), got {tuple(x.shape)}"
            )
        padded = torch.cat([x, x.new_zeros(batch, 1, channels)], dim=1)
        gathered = padded.index_select(1, self.index)
        return self.linear(gathered.reshape(batch, n, self.spiral_length * channels))


class Sparse2Dense(nn.Module):
    """
    Five spiral convolutions, coarsest level first, each followed by ELU and
    a sparse barycentric upsample; a last spiral convolution at full resolution
    projects to 3 output channels without activation.
    """

    def __init__(self, cfg: S2DConfig, asset: TopologyAsset):
        super().__init__()
        self.cfg = cfg
        hierarchy, spirals = asset.hierarchy, asset.spirals
        if cfg.landmark_count != asset.topology.landmark_count:
            raise ValueError(
                f"S2D config expects {cfg.landmark_count} landmarks, topology has {asset.topology.landmark_count}"
            )
        if list(cfg.spiral_lengths) != spirals.spiral_lengths:
            raise ValueError(
                f"S2D spiral lengths {cfg.spiral_lengths} do not match the topology asset's {spirals.spiral_lengths}"
            )

        self.level_sizes = hierarchy.level_sizes
        self.coarse_count = self.level_sizes[-1]
        channels = cfg.layer_channels

        if cfg.lifting == 'linear':
            self.lift = nn.Linear(3 * cfg.landmark_count, self.coarse_count * channels[0])
        else:
            self.register_buffer(
                'coarse_landmarks',
                torch.from_numpy(asset.coarse_landmark_vertices()),
                persistent=False,
            )
            self.lift = nn.Linear(3, channels[0])

        self.convs = nn.ModuleList()
        for i, out_channels in enumerate(channels):
            level = len(channels) - i
            in_channels = channels[0] if i == 0 else channels[i - 1]
            self.convs.append(SpiralConv(in_channels, out_channels, spirals.level(level)))
            self.register_buffer(f'up_{i}', _sparse_tensor(hierarchy.up[level - 1]), persistent=False)
        self.output = SpiralConv(channels[-1], 3, spirals.level(0))

    def _lift(self, landmarks: torch.Tensor) -> torch.Tensor:
        batch = landmarks.shape[0]
        if self.cfg.lifting == 'linear':
            return self.lift(landmarks.reshape(batch, -1)).reshape(batch, self.coarse_count, -1)
        scattered = landmarks.new_zeros(batch, self.coarse_count, 3)
        scattered = scattered.index_add(1, self.coarse_landmarks, landmarks)
        return self.lift(scattered)

    @staticmethod
    def _upsample(up: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        batch, n_coarse, channels = x.shape
        flat = x.transpose(0, 1).reshape(n_coarse, batch * channels)
        fine = torch.sparse.mm(up.to(dtype=x.dtype), flat)
        return fine.reshape(-1, batch, channels).transpose(0, 1)

    def forward(self, landmark_disp: torch.Tensor) -> torch.Tensor:
        """
        Args:
            landmark_disp: (B, L, 3) or (L, 3) landmark displacements

        Returns:
            (B, M, 3) or (M, 3) dense displacements
        """
        unbatched = landmark_disp.dim() == 2
        if unbatched:
            landmark_disp = landmark_disp.unsqueeze(0)
        if landmark_disp.shape[1:] != (self.cfg.landmark_count, 3):
            raise ValueError(
                f"Expected landmark input (B, {self.cfg.landmark_count}, 3), got {tuple(landmark_disp.shape)}"
            )
        x = self._lift(landmark_disp)
        for i, conv in enumerate(self.convs):
            x = F.elu(conv(x))
            x = self._upsample(getattr(self, f'up_{i}'), x)
        out = self.output(x)
        return out[0] if unbatched else out


def s2d_forward(landmark_disp: np.ndarray, cfg: S2DConfig, model: Sparse2Dense) -> DenseDisplacement:
    """Decode one frame of landmark displacements (no gradients)."""
    landmark_disp = np.asarray(landmark_disp, dtype=np.float32)
    if landmark_disp.shape != (cfg.landmark_count, 3):
        raise ValueError(f"Expected {cfg.landmark_count}×3 landmark displacements, got {landmark_disp.shape}")
    device = next(model.parameters()).device
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(landmark_disp).to(device))
    return DenseDisplacement(values=out.cpu().numpy())


def predict_dense_sequence(model: Sparse2Dense, landmark_sequence: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Decode a K×L×3 landmark sequence frame by frame into K×M×3 displacements."""
    landmark_sequence = np.asarray(landmark_sequence, dtype=np.float32)
    device = next(model.parameters()).device
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(landmark_sequence), batch_size):
            batch = torch.from_numpy(landmark_sequence[start:start + batch_size]).to(device)
            chunks.append(model(batch).cpu().numpy())
    return np.concatenate(chunks, axis=0).astype(np.float64)


def reconstruct_mesh(dense: DenseDisplacement, neutral: Mesh) -> Mesh:
    """Add a dense displacement to the neutral mesh; faces are unchanged."""
    if dense.values.shape[0] != neutral.vertex_count:
        raise ValueError(
            f"Displacement has {dense.values.shape[0]} vertices, neutral mesh has {neutral.vertex_count}"
        )
    return neutral.with_vertices(neutral.vertices + dense.values)


def _batched(D_gt: torch.Tensor, D_hat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if D_gt.shape != D_hat.shape:
        raise ValueError(f"Shape mismatch {tuple(D_gt.shape)} vs {tuple(D_hat.shape)}")
    if D_gt.dim() == 2:
        return D_gt.unsqueeze(0), D_hat.unsqueeze(0)
    return D_gt, D_hat


def loss_dense_rec(D_gt: torch.Tensor, D_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample Frobenius error over M×3."""
    D_gt, D_hat = _batched(D_gt, D_hat)
    return torch.linalg.vector_norm(D_gt - D_hat, dim=(-2, -1)).mean()


def loss_dense_cos(D_gt: torch.Tensor, D_hat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Batch mean cosine distance between flattened 3M displacement vectors."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    D_gt, D_hat = _batched(D_gt, D_hat)
    return cosine_distance(D_gt.flatten(-2), D_hat.flatten(-2), eps, dim=-1).mean()


def loss_weighted(
    M_gt: torch.Tensor,
    M_hat: torch.Tensor,
    weights: Union[VertexWeights, np.ndarray, torch.Tensor],
) -> torch.Tensor:
    """Batch mean of the weighted sum over vertices of per-vertex Euclidean error."""
    M_gt, M_hat = _batched(M_gt, M_hat)
    if isinstance(weights, VertexWeights):
        weights = weights.weights
    weights = torch.as_tensor(weights, dtype=M_gt.dtype, device=M_gt.device)
    if weights.shape != (M_gt.shape[1],):
        raise ValueError(f"Got {tuple(weights.shape)} weights for {M_gt.shape[1]} vertices")
    per_vertex = torch.linalg.vector_norm(M_gt - M_hat, dim=-1)
    return (per_vertex * weights).sum(dim=-1).mean()


def loss_s2d_total(
    D_gt: torch.Tensor,
    D_hat: torch.Tensor,
    weights: Union[VertexWeights, np.ndarray, torch.Tensor],
    cfg: S2DConfig,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    lambda5·rec + lambda6·cos + lambda7·weighted.

    The weighted term compares reconstructed positions; the neutral cancels,
    so it is evaluated on displacements directly.
    """
    terms = {
        "rec": loss_dense_rec(D_gt, D_hat),
        "cos": loss_dense_cos(D_gt, D_hat, cfg.cos_eps),
        "weighted": loss_weighted(D_gt, D_hat, weights),
    }
    weights_by_term = {"rec": cfg.lambda5, "cos": cfg.lambda6, "weighted": cfg.lambda7}
    return weighted_sum(terms, weights_by_term), terms
