"""
Configuration and report models for LipField.
"""
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class S2LConfig(BaseModel):
    """Speech2Landmarks architecture and loss weights."""
    lstm_layers: int = Field(ge=1, default=3)
    hidden_size: int = Field(ge=1, default=64)
    bidirectional: bool = True
    input_channels: int = Field(ge=1)
    landmark_count: int = Field(ge=1, default=68)
    lambda1: float = Field(ge=0.0, default=0.1)
    lambda2: float = Field(ge=0.0, default=1.0)
    lambda3: float = Field(ge=0.0, default=1e-4)
    lambda4: float = Field(ge=0.0, default=10.0)
    cos_eps: float = Field(gt=0.0, default=1e-8)
    cos_mode: Literal['flattened', 'per_landmark'] = 'flattened'
    head_init_std: float = Field(ge=0.0, default=1e-3)

    class Config:
        json_schema_extra = {
            "example": {
                "lstm_layers": 3,
                "hidden_size": 64,
                "bidirectional": True,
                "input_channels": 768,
                "landmark_count": 68,
                "lambda1": 0.1,
                "lambda2": 1.0,
                "lambda3": 0.0001,
                "lambda4": 10.0
            }
        }


class S2DConfig(BaseModel):
    """Sparse2Dense decoder architecture and loss weights."""
    layer_channels: List[int] = Field(default_factory=lambda: [64, 64, 32, 32, 16])
    spiral_lengths: List[int] = Field(default_factory=lambda: [9, 9, 9, 9, 9, 9])
    dilation: int = Field(ge=1, default=1)
    landmark_count: int = Field(ge=1, default=68)
    lifting: Literal['linear', 'scatter'] = 'linear'
    lambda5: float = Field(ge=0.0, default=0.1)
    lambda6: float = Field(ge=0.0, default=1e-4)
    lambda7: float = Field(ge=0.0, default=1.0)
    cos_eps: float = Field(gt=0.0, default=1e-8)

    @field_validator('layer_channels')
    @classmethod
    def _five_layers(cls, value: List[int]) -> List[int]:
        if len(value) != 5 or any(c < 1 for c in value):
            raise ValueError("layer_channels must hold 5 positive widths")
        return value

    @field_validator('spiral_lengths')
    @classmethod
    def _six_levels(cls, value: List[int]) -> List[int]:
        # one length per resolution level, finest first
        if len(value) != 6 or any(s < 1 for s in value):
            raise ValueError("spiral_lengths must hold 6 positive lengths (levels 0..5)")
        return value


class HierarchyConfig(BaseModel):
    """How a topology asset builds its sampling hierarchy and spirals."""
    factors: List[float] = Field(default_factory=lambda: [0.25] * 5)
    spiral_lengths: List[int] = Field(default_factory=lambda: [9] * 6)
    dilation: int = Field(ge=1, default=1)
    weight_eps: float = Field(gt=0.0, default=1e-3)

    @field_validator('factors')
    @classmethod
    def _factor_range(cls, value: List[float]) -> List[float]:
        if len(value) != 5 or any(not (0.0 < f <= 1.0) for f in value):
            raise ValueError("factors must hold 5 reduction ratios in (0, 1]")
        return value


class TrainConfig(BaseModel):
    """A single training run for either model."""
    model: Literal['s2l', 's2d']
    epochs: int = Field(ge=1, default=300)
    learning_rate: Optional[float] = Field(ge=0.0, default=None)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = Field(gt=0.0, default=1e-8)
    batch_size: int = Field(ge=1, default=8)
    seed: int = 0
    checkpoint_dir: Path = Path("checkpoints")
    validation_interval: int = Field(ge=1, default=1)
    max_steps: Optional[int] = Field(ge=1, default=None)
    grad_clip_norm: Optional[float] = Field(gt=0.0, default=None)
    resume: bool = False

    @model_validator(mode='after')
    def _default_learning_rate(self) -> 'TrainConfig':
        if self.learning_rate is None:
            self.learning_rate = 1e-4 if self.model == 's2l' else 1e-3
        return self

    class Config:
        json_schema_extra = {
            "example": {
                "model": "s2d",
                "epochs": 300,
                "learning_rate": 0.001,
                "batch_size": 16,
                "seed": 0,
                "checkpoint_dir": "checkpoints/s2d",
                "validation_interval": 5
            }
        }


class ToyDatasetConfig(BaseModel):
    """Synthetic talking-sequence generation parameters."""
    n_subjects: int = Field(ge=1, default=3)
    n_sentences: int = Field(ge=1, default=1)
    fps: float = Field(gt=0.0, default=60.0)
    duration: float = Field(gt=0.0, default=0.5)
    sample_rate: int = Field(ge=1, default=16000)
    amplitude: float = Field(ge=0.0, default=1.0)
    seed: int = 0
    subdivisions: int = Field(ge=0, default=3)
    radius: float = Field(gt=0.0, default=80.0)
    n_landmarks: int = Field(ge=4, default=20)
    max_jaw_open: float = Field(ge=0.0, default=4.0)
    max_lip_round: float = Field(ge=0.0, default=1.5)
    identity_scale: float = Field(ge=0.0, default=0.05)


class SplitConfig(BaseModel):
    """Subject-disjoint split sizes."""
    train_n: int = Field(ge=0, default=8)
    val_n: int = Field(ge=0, default=2)
    test_n: int = Field(ge=0, default=2)


class EvalConfig(BaseModel):
    """Evaluation protocol options."""
    dae_eps: float = Field(gt=0.0, default=1e-8)
    fps_policy: Literal['decimate', 'error'] = 'decimate'
    neutral_baseline: bool = True
    dense_landmarks: bool = True


class RunConfig(BaseModel):
    """Everything a CLI run needs; loaded from a JSON config file."""
    seed: int = 0
    fps: float = Field(gt=0.0, default=60.0)
    encoder: Literal['spectrogram', 'pretrained'] = 'spectrogram'
    workspace: Path = Path("work")
    topology: Optional[Path] = None
    dataset: Optional[Path] = None
    hierarchy: HierarchyConfig = Field(default_factory=HierarchyConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    toy: ToyDatasetConfig = Field(default_factory=ToyDatasetConfig)
    s2l: Dict[str, Any] = Field(default_factory=dict)
    s2d: Dict[str, Any] = Field(default_factory=dict)
    train_s2l: Dict[str, Any] = Field(default_factory=dict)
    train_s2d: Dict[str, Any] = Field(default_factory=dict)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @property
    def topology_path(self) -> Path:
        return self.topology or self.workspace / "topology.json"

    @property
    def dataset_path(self) -> Path:
        return self.dataset or self.workspace / "dataset"


class MetricBlock(BaseModel):
    """LE / DE / DAE for one output kind (landmarks or dense)."""
    le_mm: float = Field(ge=0.0)
    de_mm: float = Field(ge=0.0)
    dae_rad: float = Field(ge=0.0, le=math.pi + 1e-9)
    le_global_mm: float = Field(ge=0.0)
    dae_global_rad: float = Field(ge=0.0, le=math.pi + 1e-9)


class SequenceMetrics(BaseModel):
    """Metrics of one test sequence for one block."""
    sequence_id: str
    subject_id: str
    block: str
    frames: int
    metrics: MetricBlock


class EvalReport(BaseModel):
    """Aggregated evaluation over a split."""
    split: str
    fps: float
    blocks: Dict[str, MetricBlock]
    per_sequence: List[SequenceMetrics] = Field(default_factory=list)
    baseline: Dict[str, MetricBlock] = Field(default_factory=dict)
