"""
Displacement datasets for both models, synthetic toy data and subject splits.
"""
import json
import logging
import math
import pickle
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
import trimesh
from pydantic import BaseModel, field_validator
from scipy import signal

from app.audio_frontend import FeatureSequence, SpeechEncoder, encode_audio, load_wav, resample_features
from app.container import MotionSequence, read_container, write_container
from app.mesh_core import Mesh, Topology
from app.mesh_io import load_mesh, save_mesh
from app.models import ToyDatasetConfig

logger = logging.getLogger(__name__)


class TalkingSequence(BaseModel):
    """A spoken sentence with its registered mesh frames."""
    audio: np.ndarray
    sample_rate: int = 16000
    frames: np.ndarray
    fps: float = 60.0
    subject_id: str
    sentence_id: str
    neutral: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True

    @field_validator('audio', mode='before')
    @classmethod
    def _as_waveform(cls, value):
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 1:
            raise ValueError(f"audio must be a mono waveform, got shape {value.shape}")
        return value

    @field_validator('frames', mode='before')
    @classmethod
    def _as_frames(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 3 or value.shape[0] < 1 or value.shape[2] != 3:
            raise ValueError(f"frames must be K×M×3 with K >= 1, got shape {value.shape}")
        return value

    @field_validator('neutral', mode='before')
    @classmethod
    def _as_neutral(cls, value):
        return None if value is None else np.asarray(value, dtype=np.float64)

    @property
    def sequence_id(self) -> str:
        return f"{self.subject_id}__{self.sentence_id}"

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration(self) -> float:
        return len(self.audio) / float(self.sample_rate)


class S2LSample(BaseModel):
    """Aligned audio features and landmark displacements of one sequence."""
    sequence_id: str
    subject_id: str
    features: FeatureSequence
    displacements_gt: np.ndarray
    neutral_landmarks: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @property
    def frame_count(self) -> int:
        return int(self.displacements_gt.shape[0])


class S2DSample(BaseModel):
    """One frame's dense displacement and its landmark gather."""
    sequence_id: str
    frame_index: int
    dense_displacement: np.ndarray
    landmark_displacement: np.ndarray

    class Config:
        arbitrary_types_allowed = True


def resolve_neutrals(sequences: Sequence[TalkingSequence]) -> Dict[str, np.ndarray]:
    """
    Neutral vertex positions per subject.

    A provided neutral scan wins; otherwise the first frame of the subject's
    first sequence (by sentence_id) is used.
    """
    by_subject: Dict[str, List[TalkingSequence]] = {}
    for seq in sequences:
        by_subject.setdefault(seq.subject_id, []).append(seq)

    neutrals = {}
    for subject, items in by_subject.items():
        items = sorted(items, key=lambda s: s.sentence_id)
        provided = next((s.neutral for s in items if s.neutral is not None), None)
        if provided is None:
            logger.debug(f"Subject {subject}: no neutral scan, using first frame of {items[0].sequence_id}")
            neutrals[subject] = items[0].frames[0].copy()
        else:
            neutrals[subject] = provided
    return neutrals


def _check_vertex_count(seq: TalkingSequence, topo: Topology) -> None:
    if seq.frames.shape[1] != topo.vertex_count:
        raise ValueError(
            f"Sequence {seq.sequence_id} has {seq.frames.shape[1]} vertices, topology expects {topo.vertex_count}"
        )


def _build_s2l_sample(
    seq: TalkingSequence,
    neutral: np.ndarray,
    topo: Topology,
    encoder: SpeechEncoder,
) -> S2LSample:
    _check_vertex_count(seq, topo)
    K = seq.frame_count
    expected = int(round(seq.duration * seq.fps))
    if abs(K - expected) > 1:
        raise ValueError(
            f"Sequence {seq.sequence_id}: {K} frames but audio lasts {seq.duration:.3f} s "
            f"({expected} frames at {seq.fps} fps)"
        )

    neutral_landmarks = neutral[topo.landmark_indices]
    landmarks = seq.frames[:, topo.landmark_indices]
    native = encode_audio(seq.audio, seq.sample_rate, encoder)
    features = resample_features(native, K, target_fps=seq.fps)
    return S2LSample(
        sequence_id=seq.sequence_id,
        subject_id=seq.subject_id,
        features=features,
        displacements_gt=landmarks - neutral_landmarks[None],
        neutral_landmarks=neutral_landmarks.copy(),
    )


def build_s2l_dataset(
    sequences: Sequence[TalkingSequence],
    topo: Topology,
    encoder: SpeechEncoder,
    max_workers: int = 1,
    neutrals: Optional[Dict[str, np.ndarray]] = None,
) -> List[S2LSample]:
    """
    Turn talking sequences into (features, landmark displacement) samples.

    Args:
        sequences: Non-empty list of sequences
        topo: Topology with landmark indices
        encoder: Frozen speech encoder
        max_workers: Thread pool size for per-sequence encoding
        neutrals: Neutral vertices per subject (resolved from the sequences if omitted)

    Returns:
        One S2LSample per sequence, features aligned to the frame count

    Raises:
        ValueError: If no sequences are given or frames and audio disagree by more than one frame
    """
    if not sequences:
        raise ValueError("build_s2l_dataset needs at least one sequence")
    neutrals = neutrals or resolve_neutrals(sequences)

    def build(seq: TalkingSequence) -> S2LSample:
        return _build_s2l_sample(seq, neutrals[seq.subject_id], topo, encoder)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            samples = list(pool.map(build, sequences))
    else:
        samples = [build(seq) for seq in sequences]

    logger.info(f"Built S2L dataset: {len(samples)} sequences, {sum(s.frame_count for s in samples)} frames")
    return samples


def build_s2d_dataset(
    sequences: Sequence[TalkingSequence],
    topo: Topology,
    neutrals: Optional[Dict[str, np.ndarray]] = None,
) -> List[S2DSample]:
    """Every frame of every sequence becomes one (dense, landmark) displacement pair."""
    if not sequences:
        raise ValueError("build_s2d_dataset needs at least one sequence")
    neutrals = neutrals or resolve_neutrals(sequences)

    samples = []
    for seq in sequences:
        _check_vertex_count(seq, topo)
        dense = seq.frames - neutrals[seq.subject_id][None]
        for k in range(seq.frame_count):
            samples.append(S2DSample(
                sequence_id=seq.sequence_id,
                frame_index=k,
                dense_displacement=dense[k],
                landmark_displacement=dense[k][topo.landmark_indices],
            ))

    logger.info(f"Built S2D dataset: {len(samples)} frames from {len(sequences)} sequences")
    return samples


def split_by_subject(
    sequences: Sequence[TalkingSequence],
    train_n: int = 8,
    val_n: int = 2,
    test_n: int = 2,
    seed: int = 0,
) -> Tuple[List[TalkingSequence], List[TalkingSequence], List[TalkingSequence]]:
    """
    Subject-disjoint train/validation/test split.

    Raises:
        ValueError: If there are fewer distinct subjects than requested
    """
    subjects = sorted({seq.subject_id for seq in sequences})
    needed = train_n + val_n + test_n
    if len(subjects) < needed:
        raise ValueError(
            f"Split {train_n}/{val_n}/{test_n} needs {needed} subjects, dataset has {len(subjects)}"
        )

    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    groups = (
        set(shuffled[:train_n]),
        set(shuffled[train_n:train_n + val_n]),
        set(shuffled[train_n + val_n:needed]),
    )
    splits = tuple([seq for seq in sequences if seq.subject_id in group] for group in groups)
    logger.info(
        f"Split {len(subjects)} subjects: train={sorted(groups[0])} val={sorted(groups[1])} test={sorted(groups[2])}"
    )
    return splits


def bucket_by_length(
    lengths: Sequence[int],
    batch_size: int,
    generator: Optional[np.random.Generator] = None,
) -> List[List[int]]:
    """
    Group sample indices into batches of equal sequence length.

    Buckets are shuffled internally and the batch order is shuffled when a
    generator is given; otherwise order is ascending by length, then index.
    """
    buckets: Dict[int, List[int]] = {}
    for index, length in enumerate(lengths):
        buckets.setdefault(int(length), []).append(index)

    batches = []
    for length in sorted(buckets):
        indices = buckets[length]
        if generator is not None:
            indices = [indices[i] for i in generator.permutation(len(indices))]
        for start in range(0, len(indices), batch_size):
            batches.append(indices[start:start + batch_size])

    if generator is not None:
        batches = [batches[i] for i in generator.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------------------
# Synthetic toy data
# ---------------------------------------------------------------------------

def make_toy_mesh(config: ToyDatasetConfig) -> Mesh:
    """Icosphere template (subdivision 2 → 162 vertices, 3 → 642)."""
    sphere = trimesh.creation.icosphere(subdivisions=config.subdivisions, radius=config.radius)
    return Mesh(vertices=sphere.vertices, faces=sphere.faces)


def _subject_neutral(template: Mesh, config: ToyDatasetConfig, subject_index: int) -> np.ndarray:
    """Smooth per-subject identity perturbation of the template."""
    rng = np.random.default_rng([config.seed, subject_index, 0])
    center = template.vertices.mean(axis=0)
    offsets = template.vertices - center
    radii = np.linalg.norm(offsets, axis=1, keepdims=True).clip(min=1e-12)
    d = offsets / radii
    coeffs = rng.uniform(-1.0, 1.0, size=6)
    bump = (
        coeffs[0] * d[:, 0] + coeffs[1] * d[:, 1] + coeffs[2] * d[:, 2]
        + coeffs[3] * d[:, 0] * d[:, 1] + coeffs[4] * (d[:, 1] ** 2 - d[:, 2] ** 2)
        + coeffs[5] * d[:, 2] * d[:, 0]
    )
    scale = 1.0 + config.identity_scale * bump[:, None] / 3.0
    return center + offsets * scale


def _motion_fields(neutral: np.ndarray, topo: Topology, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """Unit jaw-opening and lip-rounding displacement fields around the mouth."""
    mouth = neutral[topo.landmark_indices[topo.lip_indices]]
    center = mouth.mean(axis=0)
    rel = neutral - center
    dist2 = (rel ** 2).sum(axis=1)

    wide = np.exp(-dist2 / (2.0 * (0.4 * radius) ** 2))
    below = 1.0 / (1.0 + np.exp(rel[:, 1] / (0.05 * radius)))
    jaw = np.zeros_like(neutral)
    jaw[:, 1] = wide * (-below + 0.3 * (1.0 - below))
    jaw[:, 2] = 0.1 * wide * below

    narrow = np.exp(-dist2 / (2.0 * (0.2 * radius) ** 2))
    lips = np.zeros_like(neutral)
    lips[:, 0] = -narrow * rel[:, 0] / radius
    lips[:, 2] = narrow
    return jaw, lips


def _synthetic_speech(config: ToyDatasetConfig, rng: np.random.Generator) -> np.ndarray:
    """Voiced syllables on a harmonic carrier plus noisy fricative bursts."""
    n = int(round(config.duration * config.sample_rate))
    t = np.arange(n) / config.sample_rate

    def bumps(count: int, width_range: Tuple[float, float]) -> np.ndarray:
        env = np.zeros(n)
        for _ in range(count):
            center = rng.uniform(0.0, config.duration)
            width = rng.uniform(*width_range)
            env += np.exp(-0.5 * ((t - center) / width) ** 2)
        return np.clip(env, 0.0, 1.0)

    syllables = max(1, int(round(config.duration * 4)))
    voiced = bumps(syllables, (0.03, 0.07))
    fricative = bumps(max(1, syllables // 2), (0.01, 0.03))

    f0 = rng.uniform(110.0, 220.0)
    carrier = sum(np.sin(2 * np.pi * h * f0 * t) / h for h in range(1, 6))
    noise = rng.standard_normal(n)
    audio = 0.35 * voiced * carrier + 0.25 * fricative * noise
    return (config.amplitude * audio).astype(np.float32)


def _band_energy(audio: np.ndarray, sample_rate: int, band: Tuple[float, float], n_frames: int, fps: float) -> np.ndarray:
    """RMS of the band-passed signal in a window around each frame time."""
    sos = signal.butter(4, band, btype='bandpass', fs=sample_rate, output='sos')
    filtered = signal.sosfilt(sos, audio.astype(np.float64))
    half = max(1, int(round(sample_rate / fps)))
    energy = np.zeros(n_frames)
    for k in range(n_frames):
        center = int(round(k * sample_rate / fps))
        window = filtered[max(0, center - half):center + half]
        energy[k] = math.sqrt(float(np.mean(window ** 2))) if window.size else 0.0
    return energy


def generate_toy_dataset(config: ToyDatasetConfig, mesh: Mesh, topo: Topology) -> List[TalkingSequence]:
    """
    Synthesize talking sequences whose mouth motion follows the audio.

    Jaw opening tracks the 80–1000 Hz band energy of the synthetic audio and
    lip rounding tracks the 1500–4000 Hz energy, both through a saturating
    tanh. Silent audio therefore leaves every frame at the neutral.

    Args:
        config: Toy generation parameters
        mesh: Template mesh
        topo: Toy topology on the template

    Returns:
        n_subjects × n_sentences sequences with round(duration × fps) frames each
    """
    if mesh.vertex_count != topo.vertex_count:
        raise ValueError(f"Toy mesh has {mesh.vertex_count} vertices, topology expects {topo.vertex_count}")

    n_frames = max(1, int(round(config.duration * config.fps)))
    sequences = []
    for s in range(config.n_subjects):
        neutral = _subject_neutral(mesh, config, s)
        jaw_field, lip_field = _motion_fields(neutral, topo, config.radius)
        for j in range(config.n_sentences):
            rng = np.random.default_rng([config.seed, s, j + 1])
            audio = _synthetic_speech(config, rng)
            low = _band_energy(audio, config.sample_rate, (80.0, 1000.0), n_frames, config.fps)
            high = _band_energy(audio, config.sample_rate, (1500.0, 4000.0), n_frames, config.fps)
            jaw = config.max_jaw_open * np.tanh(low / 0.1)
            rounding = config.max_lip_round * np.tanh(high / 0.05)
            frames = neutral[None] + jaw[:, None, None] * jaw_field[None] + rounding[:, None, None] * lip_field[None]
            sequences.append(TalkingSequence(
                audio=audio,
                sample_rate=config.sample_rate,
                frames=frames,
                fps=config.fps,
                subject_id=f"toy{s:02d}",
                sentence_id=f"sentence{j + 1:02d}",
                neutral=neutral,
            ))

    logger.info(
        f"Generated toy dataset: {config.n_subjects} subjects × {config.n_sentences} sentences, "
        f"{n_frames} frames each"
    )
    return sequences


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def save_sequence_dir(seq: TalkingSequence, directory: Union[str, Path]) -> Path:
    """Write audio.wav (PCM16), frames.lms and meta.json for one sequence."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sf.write(str(directory / "audio.wav"), seq.audio, seq.sample_rate, subtype='PCM_16')
    write_container(MotionSequence(frames=seq.frames, fps=seq.fps), directory / "frames.lms")
    meta = {
        "subject_id": seq.subject_id,
        "sentence_id": seq.sentence_id,
        "fps": seq.fps,
        "sample_rate": seq.sample_rate,
        "frame_count": seq.frame_count,
    }
    with open(directory / "meta.json", 'w') as f:
        json.dump(meta, f, indent=2)
    return directory


def load_sequence_dir(directory: Union[str, Path], neutral: Optional[np.ndarray] = None) -> TalkingSequence:
    """
    Read one sequence directory.

    Frames come from frames.lms or, when absent, from frames/*.ply in name order.
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ValueError(f"Sequence metadata not found: {meta_path}")
    with open(meta_path, 'r') as f:
        meta = json.load(f)

    audio, sample_rate = load_wav(directory / "audio.wav")
    container_path = directory / "frames.lms"
    if container_path.exists():
        motion = read_container(container_path)
        frames, fps = motion.frames, meta.get("fps", motion.fps)
    else:
        ply_files = sorted((directory / "frames").glob("*.ply"))
        if not ply_files:
            raise ValueError(f"Sequence {directory} has neither frames.lms nor frames/*.ply")
        frames = np.stack([load_mesh(p).vertices for p in ply_files])
        fps = meta.get("fps", 60.0)

    return TalkingSequence(
        audio=audio,
        sample_rate=sample_rate,
        frames=frames,
        fps=fps,
        subject_id=meta["subject_id"],
        sentence_id=meta["sentence_id"],
        neutral=neutral,
    )


def save_dataset(sequences: Sequence[TalkingSequence], root: Union[str, Path], faces: np.ndarray) -> Path:
    """Write sequences under root/sequences and provided neutrals under root/neutrals."""
    root = Path(root)
    written_neutrals = set()
    for seq in sequences:
        save_sequence_dir(seq, root / "sequences" / seq.sequence_id)
        if seq.neutral is not None and seq.subject_id not in written_neutrals:
            save_mesh(Mesh(vertices=seq.neutral, faces=faces), root / "neutrals" / f"{seq.subject_id}.ply")
            written_neutrals.add(seq.subject_id)
    logger.info(f"Saved {len(sequences)} sequences to {root}")
    return root


def load_dataset_root(root: Union[str, Path]) -> List[TalkingSequence]:
    """
    Load every sequence directory under root/sequences.

    Raises:
        ValueError: If the dataset root or its sequences directory is missing
    """
    root = Path(root)
    sequence_root = root / "sequences"
    if not sequence_root.is_dir():
        raise ValueError(f"Dataset not found: {sequence_root}")

    neutrals: Dict[str, np.ndarray] = {}
    neutral_root = root / "neutrals"
    if neutral_root.is_dir():
        for path in sorted(neutral_root.glob("*.ply")):
            neutrals[path.stem] = load_mesh(path).vertices

    sequences = []
    for directory in sorted(p for p in sequence_root.iterdir() if p.is_dir()):
        try:
            seq = load_sequence_dir(directory)
        except ValueError as e:
            logger.warning(f"Skipping sequence {directory.name}: {e}")
            continue
        if seq.subject_id in neutrals:
            seq.neutral = neutrals[seq.subject_id]
        sequences.append(seq)

    if not sequences:
        raise ValueError(f"No readable sequences under {sequence_root}")
    logger.info(f"Loaded {len(sequences)} sequences from {root}")
    return sequences


def load_vocaset(root: Union[str, Path], fps: float = 60.0) -> List[TalkingSequence]:
    """
    Read the processed VOCAset layout.

    Expects wav/<subject>_<sentence>.wav, vertices_npy/<subject>_<sentence>.npy
    (K × 3M, meters) and templates.pkl (subject → M×3 neutral, meters).
    Positions are converted to millimeters.

    Raises:
        ValueError: If the layout is absent
    """
    root = Path(root)
    wav_dir, vert_dir, template_path = root / "wav", root / "vertices_npy", root / "templates.pkl"
    for required in (wav_dir, vert_dir, template_path):
        if not required.exists():
            raise ValueError(f"VOCAset not found: missing {required}")

    with open(template_path, 'rb') as f:
        templates = pickle.load(f, encoding='latin1')

    sequences = []
    for wav_path in sorted(wav_dir.glob("*.wav")):
        vert_path = vert_dir / f"{wav_path.stem}.npy"
        if not vert_path.exists():
            logger.warning(f"Skipping {wav_path.name}: no vertex file")
            continue
        subject, _, sentence = wav_path.stem.rpartition('_')
        if subject not in templates:
            logger.warning(f"Skipping {wav_path.name}: subject {subject} has no template")
            continue
        audio, sample_rate = load_wav(wav_path)
        vertices = np.load(vert_path).reshape(-1, np.asarray(templates[subject]).shape[0], 3)
        sequences.append(TalkingSequence(
            audio=audio,
            sample_rate=sample_rate,
            frames=vertices * 1000.0,
            fps=fps,
            subject_id=subject,
            sentence_id=sentence,
            neutral=np.asarray(templates[subject], dtype=np.float64) * 1000.0,
        ))

    logger.info(f"Loaded {len(sequences)} VOCAset sequences from {root}")
    return sequences
