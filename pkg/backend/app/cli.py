"""
Command-line entry point: python -m app <command> [options].
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from app.audio_frontend import build_encoder, load_wav
from app.config import settings
from app.container import MotionSequence, read_container, write_container
from app.data_pipeline import (
    build_s2d_dataset,
    build_s2l_dataset,
    generate_toy_dataset,
    load_dataset_root,
    load_vocaset,
    make_toy_mesh,
    resolve_neutrals,
    save_dataset,
    split_by_subject,
)
from app.errors import LipFieldError
from app.evaluation import (
    SequenceOutputs,
    evaluate_pipeline,
    evaluate_sequences,
    format_report_table,
    ground_truth_outputs,
    write_report_csv,
)
from app.mesh_core import Mesh, Topology, make_toy_topology
from app.mesh_io import load_mesh, save_mesh
from app.models import RunConfig, S2DConfig, S2LConfig, TrainConfig
from app.pipeline import AnimationPipeline
from app.renderer import render_frames
from app.topology_asset import build_topology_asset, load_topology_asset, save_topology_asset
from app.trainer import train_s2d, train_s2l

logger = logging.getLogger(__name__)


def load_run_config(file_path: Optional[str]) -> RunConfig:
    """Read a JSON run config; an absent path gives the defaults."""
    if file_path is None:
        return RunConfig()
    file_path = Path(file_path)
    if not file_path.exists():
        raise ValueError(f"Config file not found: {file_path}")
    with open(file_path, 'r') as f:
        data = json.load(f)
    return RunConfig(**data)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags win over config file values."""
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.fps is not None:
        updates["fps"] = args.fps
    if args.encoder is not None:
        updates["encoder"] = args.encoder
    if args.topology is not None:
        updates["topology"] = Path(args.topology)
    return cfg.model_copy(update=updates)


def _split(cfg: RunConfig, sequences):
    return split_by_subject(sequences, cfg.split.train_n, cfg.split.val_n, cfg.split.test_n, seed=cfg.seed)


def _checkpoint_path(explicit: Optional[str], cfg: RunConfig, kind: str) -> Path:
    return Path(explicit) if explicit else cfg.workspace / "checkpoints" / kind / "best.pt"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else cfg.workspace
    topology_path = Path(args.topology) if args.topology else out / "topology.json"

    if args.toy:
        toy = cfg.toy.model_copy(update={"seed": cfg.seed, "fps": cfg.fps})
        template = make_toy_mesh(toy)
        topo = make_toy_topology(template, toy.n_landmarks)
    else:
        if not args.template or not args.landmarks:
            raise ValueError("prepare-data needs --toy or both --template and --landmarks")
        template = load_mesh(args.template)
        with open(args.landmarks, 'r') as f:
            indices = json.load(f)
        topo = Topology.from_mesh(
            template,
            landmark_indices=indices["landmark_indices"],
            lip_indices=indices.get("lip_indices"),
            mouth_jaw_indices=indices.get("mouth_jaw_indices"),
            lip_vertex_indices=indices.get("lip_vertex_indices"),
        )

    asset = build_topology_asset(template, topo, cfg.hierarchy)
    save_topology_asset(topology_path, asset.topology, asset.hierarchy, asset.spirals)
    save_mesh(template, out / "template.ply")

    dataset_root = out / "dataset"
    if args.toy:
        sequences = generate_toy_dataset(toy, template, topo)
        save_dataset(sequences, dataset_root, template.faces)
    elif args.vocaset:
        sequences = load_vocaset(args.vocaset, fps=cfg.fps)
        save_dataset(sequences, dataset_root, template.faces)
    else:
        sequences = []

    print(f"topology={topology_path} hash={asset.content_hash} sequences={len(sequences)}")
    return 0


def cmd_train_s2l(args: argparse.Namespace, cfg: RunConfig) -> int:
    asset = load_topology_asset(cfg.topology_path)
    sequences = load_dataset_root(cfg.dataset_path)
    neutrals = resolve_neutrals(sequences)
    train, val, _ = _split(cfg, sequences)

    encoder = build_encoder(cfg.encoder, fps=cfg.fps)
    train_set = build_s2l_dataset(train, asset.topology, encoder, neutrals=neutrals)
    val_set = build_s2l_dataset(val, asset.topology, encoder, neutrals=neutrals) if val else []

    model_cfg = S2LConfig(**{
        "input_channels": encoder.channels,
        "landmark_count": asset.topology.landmark_count,
        **cfg.s2l,
    })
    train_cfg = TrainConfig(**{
        "seed": cfg.seed,
        "checkpoint_dir": Path(args.out) if args.out else cfg.workspace / "checkpoints" / "s2l",
        **cfg.train_s2l,
        "model": "s2l",
    })
    result = train_s2l(
        train_set, val_set, train_cfg, model_cfg, asset.topology.mouth_jaw_indices,
        topology_hash=asset.content_hash, encoder_name=encoder.name, encoder_fps=cfg.fps,
    )
    print(f"checkpoint={result.best_checkpoint} history={result.history_path} steps={result.steps}")
    return 0


def cmd_train_s2d(args: argparse.Namespace, cfg: RunConfig) -> int:
    asset = load_topology_asset(cfg.topology_path)
    sequences = load_dataset_root(cfg.dataset_path)
    neutrals = resolve_neutrals(sequences)
    train, val, _ = _split(cfg, sequences)

    train_set = build_s2d_dataset(train, asset.topology, neutrals=neutrals)
    val_set = build_s2d_dataset(val, asset.topology, neutrals=neutrals) if val else []

    model_cfg = S2DConfig(**{
        "landmark_count": asset.topology.landmark_count,
        "spiral_lengths": asset.spirals.spiral_lengths,
        "dilation": asset.spirals.dilation,
        **cfg.s2d,
    })
    train_cfg = TrainConfig(**{
        "seed": cfg.seed,
        "checkpoint_dir": Path(args.out) if args.out else cfg.workspace / "checkpoints" / "s2d",
        **cfg.train_s2d,
        "model": "s2d",
    })
    result = train_s2d(train_set, val_set, train_cfg, model_cfg, asset, cfg.hierarchy.weight_eps)
    print(f"checkpoint={result.best_checkpoint} history={result.history_path} steps={result.steps}")
    return 0


def cmd_animate(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not args.audio:
        raise ValueError("animate needs --audio")
    asset = load_topology_asset(cfg.topology_path)
    neutral = load_mesh(args.neutral) if args.neutral else None
    encoder = build_encoder(args.encoder, fps=cfg.fps) if args.encoder else None
    pipeline = AnimationPipeline.from_checkpoints(
        _checkpoint_path(args.checkpoint_s2l, cfg, "s2l"),
        _checkpoint_path(args.checkpoint_s2d, cfg, "s2d"),
        asset,
        encoder=encoder,
        fps=cfg.fps,
    )
    waveform, sample_rate = load_wav(args.audio)
    sequence = pipeline.animate(waveform, sample_rate, neutral=neutral, fps=cfg.fps)

    out = Path(args.out) if args.out else cfg.workspace / "animation.lms"
    write_container(sequence, out)
    if args.ply_dir:
        faces = asset.topology.faces
        for k, vertices in enumerate(sequence.frames):
            save_mesh(Mesh(vertices=vertices, faces=faces), Path(args.ply_dir) / f"frame_{k:05d}.ply")
    print(f"container={out} frames={sequence.frame_count} fps={sequence.fps:g}")
    return 0


def _outputs_from_predictions(directory: Path, sequences, topo: Topology) -> List[SequenceOutputs]:
    """Read <sequence_id>.lms position containers as displacement predictions."""
    neutrals = resolve_neutrals(sequences)
    outputs = []
    for seq in sequences:
        path = directory / f"{seq.sequence_id}.lms"
        if not path.exists():
            raise ValueError(f"Prediction not found: {path}")
        motion = read_container(path)
        neutral = neutrals[seq.subject_id]
        frames = motion.frames.astype(np.float64)
        if motion.point_count == topo.vertex_count:
            outputs.append(SequenceOutputs(
                sequence_id=seq.sequence_id, subject_id=seq.subject_id, fps=motion.fps,
                dense=frames - neutral[None],
            ))
        elif motion.point_count == topo.landmark_count:
            outputs.append(SequenceOutputs(
                sequence_id=seq.sequence_id, subject_id=seq.subject_id, fps=motion.fps,
                landmarks=frames - neutral[topo.landmark_indices][None],
            ))
        else:
            raise ValueError(
                f"{path} holds {motion.point_count} points; expected {topo.vertex_count} or {topo.landmark_count}"
            )
    return outputs


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    asset = load_topology_asset(cfg.topology_path)
    sequences = load_dataset_root(cfg.dataset_path)
    selected = dict(zip(("train", "val", "test"), _split(cfg, sequences)))[args.split]
    if not selected:
        raise ValueError(f"Split '{args.split}' is empty")

    if args.predictions:
        report = evaluate_sequences(
            _outputs_from_predictions(Path(args.predictions), selected, asset.topology),
            ground_truth_outputs(selected, asset.topology),
            asset.topology,
            cfg.eval,
            split=args.split,
        )
    else:
        encoder = build_encoder(args.encoder, fps=cfg.fps) if args.encoder else None
        report = evaluate_pipeline(
            _checkpoint_path(args.checkpoint_s2l, cfg, "s2l"),
            _checkpoint_path(args.checkpoint_s2d, cfg, "s2d"),
            selected,
            asset,
            encoder=encoder,
            cfg=cfg.eval,
            fps=args.fps,
            split=args.split,
        )

    out = Path(args.out) if args.out else cfg.workspace / "eval" / f"{args.split}.csv"
    write_report_csv(report, out)
    print(format_report_table(report))
    return 0


def cmd_render_frames(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not args.input:
        raise ValueError("render-frames needs --input")
    asset = load_topology_asset(cfg.topology_path)
    sequence = read_container(args.input)
    if sequence.point_count != asset.topology.vertex_count:
        raise ValueError(
            f"{args.input} holds {sequence.point_count} points, topology has {asset.topology.vertex_count} vertices"
        )

    scalars = None
    if args.heatmap_against:
        reference = read_container(args.heatmap_against)
        if reference.frames.shape != sequence.frames.shape:
            raise ValueError(
                f"Heatmap reference shape {reference.frames.shape} differs from {sequence.frames.shape}"
            )
        scalars = np.linalg.norm(sequence.frames.astype(np.float64) - reference.frames, axis=-1)

    out = Path(args.out) if args.out else cfg.workspace / "frames"
    paths = render_frames(sequence, asset.topology.faces, out, scalars=scalars, video_path=args.video)
    print(f"frames={len(paths)} dir={out}")
    return 0


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-s2l": cmd_train_s2l,
    "train-s2d": cmd_train_s2d,
    "animate": cmd_animate,
    "evaluate": cmd_evaluate,
    "render-frames": cmd_render_frames,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--fps", type=float)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--topology", help="topology asset JSON")
    common.add_argument("--checkpoint-s2l", dest="checkpoint_s2l")
    common.add_argument("--checkpoint-s2d", dest="checkpoint_s2d")
    common.add_argument("--encoder", choices=["pretrained", "spectrogram"])

    parser = argparse.ArgumentParser(prog="lipfield", description="Speech-driven 3D talking heads")
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare-data", parents=[common], help="build topology asset and dataset")
    prepare.add_argument("--toy", action="store_true", help="synthesize a toy workspace")
    prepare.add_argument("--template", help="template mesh (OBJ/PLY)")
    prepare.add_argument("--landmarks", help="JSON with landmark_indices and optional subsets")
    prepare.add_argument("--vocaset", help="processed VOCAset root to convert")

    sub.add_parser("train-s2l", parents=[common], help="train Speech2Landmarks")
    sub.add_parser("train-s2d", parents=[common], help="train Sparse2Dense")

    animate = sub.add_parser("animate", parents=[common], help="animate a neutral mesh from audio")
    animate.add_argument("--audio", help="WAV file")
    animate.add_argument("--neutral", help="neutral mesh (defaults to the topology template)")
    animate.add_argument("--ply-dir", dest="ply_dir", help="also write per-frame PLYs here")

    evaluate = sub.add_parser("evaluate", parents=[common], help="LE/DE/DAE report")
    evaluate.add_argument("--split", choices=["train", "val", "test"], default="test")
    evaluate.add_argument("--predictions", help="directory of <sequence_id>.lms predictions")

    render = sub.add_parser("render-frames", parents=[common], help="rasterize a container to PNGs")
    render.add_argument("--input", help="container of vertex positions")
    render.add_argument("--heatmap-against", dest="heatmap_against", help="reference container for error colours")
    render.add_argument("--video", help="optional MP4 path (needs ffmpeg)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except (LipFieldError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
