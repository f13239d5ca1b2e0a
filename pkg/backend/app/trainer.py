"""
Independent training loops for Speech2Landmarks and Sparse2Dense.
"""
import logging
import math
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel

from app.checkpoint import load_checkpoint, restore_rng_state, save_checkpoint
from app.config import settings
from app.data_pipeline import S2DSample, S2LSample, bucket_by_length
from app.errors import TrainingDivergedError
from app.evaluation import displacement_error
from app.mesh_core import compute_landmark_weights
from app.models import S2DConfig, S2LConfig, TrainConfig
from app.s2d_model import Sparse2Dense, loss_s2d_total
from app.s2l_model import Speech2Landmarks, loss_s2l_total
from app.topology_asset import TopologyAsset

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.pt"
LAST_CHECKPOINT = "last.pt"
HISTORY_FILE = "history.csv"


class TrainingResult(BaseModel):
    """Outcome of a training run."""
    model: Any
    history: Any
    best_checkpoint: Path
    last_checkpoint: Path
    history_path: Path
    best_score: float
    steps: int

    class Config:
        arbitrary_types_allowed = True


class ModelTrainer(ABC):
    """
    Shared epoch loop: seeded init, Adam, per-epoch shuffling, divergence
    checks, best/last checkpoints and a CSV history.
    """

    kind: str = "model"
    term_names: Tuple[str, ...] = ()

    def __init__(
        self,
        cfg: TrainConfig,
        model_cfg: BaseModel,
        topology_hash: Optional[str] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.topology_hash = topology_hash
        self.metadata = metadata or {}
        self.device = torch.device(settings.device)
        self.checkpoint_dir = Path(cfg.checkpoint_dir)

    @abstractmethod
    def build_model(self) -> torch.nn.Module:
        ...

    @abstractmethod
    def batches(self, samples: Sequence[Any], epoch: int) -> List[List[int]]:
        """Sample index batches for one epoch."""

    @abstractmethod
    def compute_loss(self, samples: Sequence[Any], batch: List[int]) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        ...

    @abstractmethod
    def validation_de(self, samples: Sequence[Any]) -> float:
        """Mean displacement error of the current model on a sample set."""

    def _check_finite(self, total: torch.Tensor, terms: Dict[str, torch.Tensor], epoch: int, batch_index: int) -> None:
        for name, value in list(terms.items()) + [("total", total)]:
            v = float(value.detach())
            if not math.isfinite(v):
                logger.error(f"{self.kind} diverged: term {name}={v} at epoch {epoch}, batch {batch_index}")
                raise TrainingDivergedError(term=name, epoch=epoch, batch_index=batch_index, value=v)

    def _resume(self, optimizer: torch.optim.Optimizer) -> Tuple[int, int, float, List[Dict[str, Any]]]:
        last_path = self.checkpoint_dir / LAST_CHECKPOINT
        if not (self.cfg.resume and last_path.exists()):
            if self.cfg.resume:
                logger.warning(f"Resume requested but {last_path} does not exist; starting fresh")
            return 0, 0, math.inf, []
        payload = load_checkpoint(last_path, kind=self.kind, topology_hash=self.topology_hash,
                                  map_location=self.device)
        self.model.load_state_dict(payload["state_dict"])
        if payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
        restore_rng_state(payload["rng_state"])
        extra = payload.get("extra", {})
        logger.info(f"Resumed {self.kind} from {last_path} at epoch {payload['epoch']}, step {payload['step']}")
        return payload["epoch"], payload["step"], extra.get("best_score", math.inf), extra.get("history", [])

    def _save(self, name: str, optimizer, epoch: int, step: int, best_score: float, history) -> Path:
        return save_checkpoint(
            self.checkpoint_dir / name,
            kind=self.kind,
            config=self.model_cfg.model_dump(),
            model=self.model,
            optimizer=optimizer,
            epoch=epoch,
            step=step,
            topology_hash=self.topology_hash,
            extra={
                **self.metadata,
                "best_score": best_score,
                "history": history,
                "train_config": self.cfg.model_dump(mode='json'),
            },
        )

    def run(self, train_set: Sequence[Any], val_set: Sequence[Any]) -> TrainingResult:
        if not train_set:
            raise ValueError(f"{self.kind} training set is empty")

        torch.manual_seed(self.cfg.seed)
        self.model = self.build_model().to(self.device)
        optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=self.cfg.learning_rate,
            betas=tuple(self.cfg.betas),
            eps=self.cfg.adam_eps,
        )
        start_epoch, step, best_score, history = self._resume(optimizer)
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        best_path = self.checkpoint_dir / BEST_CHECKPOINT
        last_path = self.checkpoint_dir / LAST_CHECKPOINT

        logger.info(
            f"Training {self.kind}: {len(train_set)} train / {len(val_set)} val samples, "
            f"epochs={self.cfg.epochs}, lr={self.cfg.learning_rate}, batch_size={self.cfg.batch_size}"
        )

        for epoch in range(start_epoch + 1, self.cfg.epochs + 1):
            self.model.train()
            sums = {name: 0.0 for name in self.term_names + ("total",)}
            n_batches = 0
            for batch_index, batch in enumerate(self.batches(train_set, epoch)):
                optimizer.zero_grad()
                total, terms = self.compute_loss(train_set, batch)
                self._check_finite(total, terms, epoch, batch_index)
                total.backward()
                if self.cfg.grad_clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip_norm)
                optimizer.step()
                step += 1
                n_batches += 1
                for name, value in terms.items():
                    sums[name] += float(value.detach())
                sums["total"] += float(total.detach())
                if self.cfg.max_steps is not None and step >= self.cfg.max_steps:
                    break

            row = {"epoch": epoch, "step": step}
            row.update({name: sums[name] / max(1, n_batches) for name in sums})

            stopping = self.cfg.max_steps is not None and step >= self.cfg.max_steps
            validate = epoch % self.cfg.validation_interval == 0 or epoch == self.cfg.epochs or stopping
            row["val_de"] = self.validation_de(val_set) if (validate and val_set) else float('nan')
            history.append(row)

            breakdown = " ".join(f"{name}={row[name]:.6f}" for name in self.term_names)
            logger.info(
                f"{self.kind} epoch {epoch}/{self.cfg.epochs} step {step}: total={row['total']:.6f} "
                f"{breakdown} val_de={row['val_de']:.6f}"
            )

            # without a validation split the training total selects the model
            score = row["val_de"] if val_set else row["total"]
            if math.isfinite(score) and score < best_score:
                best_score = score
                self._save(BEST_CHECKPOINT, optimizer, epoch, step, best_score, history)
            self._save(LAST_CHECKPOINT, optimizer, epoch, step, best_score, history)

            if stopping:
                logger.info(f"{self.kind} reached max_steps={self.cfg.max_steps} at epoch {epoch}")
                break

        if not best_path.exists():
            self._save(BEST_CHECKPOINT, optimizer, start_epoch, step, best_score, history)
        if not last_path.exists():
            self._save(LAST_CHECKPOINT, optimizer, start_epoch, step, best_score, history)

        frame = pd.DataFrame(history, columns=["epoch", "step", *self.term_names, "total", "val_de"])
        history_path = self.checkpoint_dir / HISTORY_FILE
        frame.to_csv(history_path, index=False)
        logger.info(f"{self.kind} history written to {history_path}")

        return TrainingResult(
            model=self.model,
            history=frame,
            best_checkpoint=best_path,
            last_checkpoint=last_path,
            history_path=history_path,
            best_score=best_score,
            steps=step,
        )


class S2LTrainer(ModelTrainer):
    kind = "s2l"
    term_names = ("rec", "mouth", "cos", "vel")

    def __init__(
        self,
        cfg: TrainConfig,
        model_cfg: S2LConfig,
        mouth_jaw_indices,
        topology_hash: Optional[str] = None,
        encoder_name: Optional[str] = None,
        encoder_fps: Optional[float] = None,
    ):
        super().__init__(
            cfg, model_cfg, topology_hash,
            metadata={"encoder": encoder_name, "encoder_fps": encoder_fps},
        )
        self.mouth_jaw_indices = np.asarray(mouth_jaw_indices, dtype=np.int64)

    def build_model(self) -> torch.nn.Module:
        return Speech2Landmarks(self.model_cfg)

    def batches(self, samples: Sequence[S2LSample], epoch: int) -> List[List[int]]:
        # whole sequences, grouped by length so no padding enters the losses
        rng = np.random.default_rng([self.cfg.seed, epoch])
        return bucket_by_length([s.frame_count for s in samples], self.cfg.batch_size, rng)

    def _stack(self, samples: Sequence[S2LSample], batch: List[int]) -> Tuple[torch.Tensor, torch.Tensor]:
        features = torch.from_numpy(np.stack([samples[i].features.features for i in batch])).float()
        targets = torch.from_numpy(np.stack([samples[i].displacements_gt for i in batch])).float()
        return features.to(self.device), targets.to(self.device)

    def compute_loss(self, samples, batch):
        features, targets = self._stack(samples, batch)
        predictions = self.model(features)
        return loss_s2l_total(targets, predictions, self.model_cfg, self.mouth_jaw_indices)

    def validation_de(self, samples: Sequence[S2LSample]) -> float:
        self.model.eval()
        errors = []
        with torch.no_grad():
            for i in range(len(samples)):
                features, targets = self._stack(samples, [i])
                errors.append(displacement_error(self.model(features)[0].cpu().numpy(), targets[0].cpu().numpy()))
        self.model.train()
        return float(np.mean(errors))


class S2DTrainer(ModelTrainer):
    kind = "s2d"
    term_names = ("rec", "cos", "weighted")

    def __init__(self, cfg: TrainConfig, model_cfg: S2DConfig, asset: TopologyAsset, weight_eps: float = 1e-3):
        super().__init__(cfg, model_cfg, asset.content_hash)
        self.asset = asset
        weights = compute_landmark_weights(asset.template, asset.topology, weight_eps)
        self.weights = torch.from_numpy(weights.weights).float().to(self.device)

    def build_model(self) -> torch.nn.Module:
        return Sparse2Dense(self.model_cfg, self.asset)

    def batches(self, samples: Sequence[S2DSample], epoch: int) -> List[List[int]]:
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(samples))
        size = self.cfg.batch_size
        return [order[i:i + size].tolist() for i in range(0, len(order), size)]

    def _stack(self, samples: Sequence[S2DSample], batch: List[int]) -> Tuple[torch.Tensor, torch.Tensor]:
        sparse = torch.from_numpy(np.stack([samples[i].landmark_displacement for i in batch])).float()
        dense = torch.from_numpy(np.stack([samples[i].dense_displacement for i in batch])).float()
        return sparse.to(self.device), dense.to(self.device)

    def compute_loss(self, samples, batch):
        sparse, dense = self._stack(samples, batch)
        return loss_s2d_total(dense, self.model(sparse), self.weights, self.model_cfg)

    def validation_de(self, samples: Sequence[S2DSample]) -> float:
        self.model.eval()
        errors = []
        with torch.no_grad():
            for start in range(0, len(samples), self.cfg.batch_size):
                batch = list(range(start, min(len(samples), start + self.cfg.batch_size)))
                sparse, dense = self._stack(samples, batch)
                predicted = self.model(sparse).cpu().numpy()
                for pred, gt in zip(predicted, dense.cpu().numpy()):
                    errors.append(displacement_error(pred[None], gt[None]))
        self.model.train()
        return float(np.mean(errors))


def train_s2l(
    dataset: Sequence[S2LSample],
    val_set: Sequence[S2LSample],
    cfg: TrainConfig,
    model_cfg: S2LConfig,
    mouth_jaw_indices,
    topology_hash: Optional[str] = None,
    encoder_name: Optional[str] = None,
    encoder_fps: Optional[float] = None,
) -> TrainingResult:
    """
    Train Speech2Landmarks with Adam on whole sequences.

    Raises:
        TrainingDivergedError: If any loss term becomes NaN or infinite
    """
    if cfg.model != "s2l":
        raise ValueError(f"train_s2l got a config for '{cfg.model}'")
    trainer = S2LTrainer(cfg, model_cfg, mouth_jaw_indices, topology_hash, encoder_name, encoder_fps)
    return trainer.run(dataset, val_set)


def train_s2d(
    dataset: Sequence[S2DSample],
    val_set: Sequence[S2DSample],
    cfg: TrainConfig,
    model_cfg: S2DConfig,
    asset: TopologyAsset,
    weight_eps: float = 1e-3,
) -> TrainingResult:
    """
    Train Sparse2Dense with Adam on shuffled per-frame samples.

    Raises:
        TrainingDivergedError: If any loss term becomes NaN or infinite
    """
    if cfg.model != "s2d":
        raise ValueError(f"train_s2d got a config for '{cfg.model}'")
    return S2DTrainer(cfg, model_cfg, asset, weight_eps).run(dataset, val_set)
