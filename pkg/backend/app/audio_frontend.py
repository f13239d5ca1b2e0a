"""
Audio frontend: waveform loading, frozen speech encoders and frame alignment.
"""
import io
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
import torch
from pydantic import BaseModel, field_validator

from app.config import settings

logger = logging.getLogger(__name__)

ENCODER_SAMPLE_RATE = 16000


class FeatureSequence(BaseModel):
    """Per-frame audio features (T×C)."""
    features: np.ndarray
    source_sample_rate: int
    target_fps: float

    class Config:
        arbitrary_types_allowed = True

    @field_validator('features', mode='before')
    @classmethod
    def _as_feature_matrix(cls, value):
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 2 or value.shape[0] < 1:
            raise ValueError(f"features must be T×C with T >= 1, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("features contain NaN or Inf")
        return value

    @property
    def frame_count(self) -> int:
        return int(self.features.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


class SpeechEncoder(ABC):
    """Frozen waveform → feature encoder working on 16 kHz mono audio."""

    name: str = "encoder"

    @property
    @abstractmethod
    def channels(self) -> int:
        ...

    @property
    @abstractmethod
    def native_fps(self) -> float:
        ...

    @abstractmethod
    def encode(self, waveform: np.ndarray) -> np.ndarray:
        """Encode a 16 kHz waveform into T_native×C features."""


class SpectrogramEncoder(SpeechEncoder):
    """
    Deterministic log-mel spectrogram encoder with no learned weights.

    The hop length is round(16000 / fps) samples, so one second of audio
    yields fps frames (60 at the default hop of 267 samples).
    """

    name = "spectrogram"

    def __init__(self, n_mels: int = 80, fps: float = 60.0, n_fft: int = 512):
        self.n_mels = n_mels
        self.fps = fps
        self.n_fft = n_fft
        self.hop_length = int(round(ENCODER_SAMPLE_RATE / fps))

    @property
    def channels(self) -> int:
        return self.n_mels

    @property
    def native_fps(self) -> float:
        return ENCODER_SAMPLE_RATE / self.hop_length

    def encode(self, waveform: np.ndarray) -> np.ndarray:
        mel = librosa.feature.melspectrogram(
            y=waveform,
            sr=ENCODER_SAMPLE_RATE,
            n_fft=self.n_fft,
            hop_length=self.hop_length,
            n_mels=self.n_mels,
            center=True,
        )
        db = librosa.power_to_db(mel, ref=1.0, amin=1e-10, top_db=None)
        # roughly unit scale: silence sits at -1.5, speech between -0.5 and 1
        return ((db + 40.0) / 40.0).T.astype(np.float32)


class PretrainedSpeechEncoder(SpeechEncoder):
    """
    Self-supervised speech model loaded from a published checkpoint.

    Weights are frozen; the encoder is only ever run under torch.no_grad.
    Output runs at the model's 20 ms frame stride (50 fps).
    """

    name = "pretrained"

    def __init__(
        self,
        checkpoint: Optional[str] = None,
        layer: Optional[int] = None,
        cache_dir: Optional[Path] = None,
        device: Optional[str] = None,
    ):
        from transformers import Wav2Vec2FeatureExtractor, Wav2Vec2Model

        self.checkpoint = checkpoint or settings.pretrained_checkpoint
        self.layer = settings.encoder_layer if layer is None else layer
        self.device = torch.device(device or settings.device)
        cache_dir = Path(cache_dir or settings.cache)

        logger.info(f"Loading pretrained speech encoder {self.checkpoint} (cache {cache_dir})")
        self.extractor = Wav2Vec2FeatureExtractor.from_pretrained(self.checkpoint, cache_dir=str(cache_dir))
        self.model = Wav2Vec2Model.from_pretrained(self.checkpoint, cache_dir=str(cache_dir))
        self.model.eval()
        self.model.requires_grad_(False)
        self.model.to(self.device)

    @property
    def channels(self) -> int:
        return int(self.model.config.hidden_size)

    @property
    def native_fps(self) -> float:
        return 50.0

    def encode(self, waveform: np.ndarray) -> np.ndarray:
        inputs = self.extractor(waveform, sampling_rate=ENCODER_SAMPLE_RATE, return_tensors="pt")
        with torch.no_grad():
            outputs = self.model(
                inputs.input_values.to(self.device),
                output_hidden_states=True,
            )
        hidden = outputs.hidden_states[self.layer][0]
        return hidden.cpu().numpy().astype(np.float32)


def build_encoder(name: Optional[str] = None, fps: Optional[float] = None, **kwargs) -> SpeechEncoder:
    """
    Create a speech encoder by name.

    Args:
        name: 'spectrogram' or 'pretrained' (defaults to settings.encoder)
        fps: Frame rate of the spectrogram encoder
        **kwargs: Forwarded to the encoder constructor

    Returns:
        SpeechEncoder instance
    """
    name = name or settings.encoder
    if name == "spectrogram":
        return SpectrogramEncoder(fps=fps or settings.target_fps, **kwargs)
    if name == "pretrained":
        return PretrainedSpeechEncoder(**kwargs)
    raise ValueError(f"Unknown encoder: {name}. Use 'spectrogram' or 'pretrained'.")


def load_wav(file_path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """
    Read a WAV file as a mono float32 waveform.

    Returns:
        Tuple of (waveform, sample_rate)
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise ValueError(f"Audio file not found: {file_path}")
    waveform, sample_rate = sf.read(str(file_path), dtype='float32', always_2d=True)
    return waveform.mean(axis=1).astype(np.float32), int(sample_rate)


def decode_wav(data: bytes) -> Tuple[np.ndarray, int]:
    """Decode in-memory WAV bytes as a mono float32 waveform."""
    if not data:
        raise ValueError("Audio payload is empty")
    try:
        waveform, sample_rate = sf.read(io.BytesIO(data), dtype='float32', always_2d=True)
    except RuntimeError as e:
        raise ValueError(f"Could not decode audio: {e}") from e
    return waveform.mean(axis=1).astype(np.float32), int(sample_rate)


def encode_audio(waveform: np.ndarray, sample_rate: int, encoder: SpeechEncoder) -> FeatureSequence:
    """
    Encode a mono waveform at the encoder's native frame rate.

    Args:
        waveform: 1-D float waveform
        sample_rate: Sample rate of the waveform (resampled to 16 kHz if needed)
        encoder: Frozen speech encoder

    Returns:
        FeatureSequence with T_native frames

    Raises:
        ValueError: If the waveform is empty or not mono
    """
    waveform = np.asarray(waveform, dtype=np.float32)
    if waveform.ndim != 1:
        raise ValueError(f"waveform must be mono (1-D), got shape {waveform.shape}")
    if waveform.size == 0:
        raise ValueError("waveform is empty")

    if sample_rate != ENCODER_SAMPLE_RATE:
        waveform = librosa.resample(waveform, orig_sr=sample_rate, target_sr=ENCODER_SAMPLE_RATE)
        logger.debug(f"Resampled audio {sample_rate} Hz -> {ENCODER_SAMPLE_RATE} Hz")

    features = encoder.encode(waveform)
    return FeatureSequence(
        features=features,
        source_sample_rate=sample_rate,
        target_fps=encoder.native_fps,
    )


def resample_features(fs: FeatureSequence, target_T: int, target_fps: Optional[float] = None) -> FeatureSequence:
    """
    Linearly interpolate features along time to exactly target_T frames.

    The first and last output frames equal the first and last input frames;
    constant features stay constant.
    """
    if target_T < 1:
        raise ValueError(f"target_T must be >= 1, got {target_T}")

    x = fs.features.astype(np.float64)
    T = x.shape[0]
    if T == target_T:
        out = fs.features.copy()
    elif T == 1:
        out = np.repeat(fs.features, target_T, axis=0)
    else:
        positions = np.linspace(0.0, T - 1, target_T) if target_T > 1 else np.zeros(1)
        i0 = np.floor(positions).astype(np.int64)
        i0 = np.minimum(i0, T - 2)
        frac = (positions - i0)[:, None]
        out = (x[i0] * (1.0 - frac) + x[i0 + 1] * frac).astype(np.float32)
        out[0] = fs.features[0]
        if target_T > 1:
            out[-1] = fs.features[-1]

    return FeatureSequence(
        features=out,
        source_sample_rate=fs.source_sample_rate,
        target_fps=target_fps if target_fps is not None else fs.target_fps * target_T / T,
    )


def encode_for_frames(
    waveform: np.ndarray,
    sample_rate: int,
    encoder: SpeechEncoder,
    n_frames: int,
    fps: Optional[float] = None,
) -> FeatureSequence:
    """Encode audio and align the features to exactly n_frames motion frames."""
    native = encode_audio(waveform, sample_rate, encoder)
    return resample_features(native, n_frames, target_fps=fps)
