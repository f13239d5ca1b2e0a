"""
Lip, displacement and angle errors for landmark and dense outputs.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.data_pipeline import resolve_neutrals
from app.mesh_core import Topology
from app.models import EvalConfig, EvalReport, MetricBlock, SequenceMetrics
from app.pipeline import AnimationPipeline

logger = logging.getLogger(__name__)

BLOCKS = ("landmarks", "dense", "dense_landmarks")

# Published numbers for comparison tables (mm, mm, rad), never recomputed here.
PUBLISHED_REFERENCE_ROWS = {
    "VOCA": {
        "landmarks": (0.87, 0.77, 0.29),
        "dense": (0.72, 0.62, 0.23),
    },
    "Faceformer": {
        "landmarks": (0.61, 0.56, 0.20),
        "dense": (0.51, 0.42, 0.17),
    },
}

# Full-scale VOCAset numbers for this architecture (mm, mm, rad).
TARGET_ROWS = {
    "landmarks": (0.50, 0.44, 0.13),
    "dense": (0.43, 0.34, 0.12),
}


def _as_frames(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[None] if values.ndim == 2 else values


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")


def _aggregate(per_frame: np.ndarray, aggregate: str) -> float:
    if per_frame.size == 0:
        return 0.0
    if aggregate == "frame_mean":
        return float(per_frame.mean())
    if aggregate == "global_max":
        return float(per_frame.max())
    raise ValueError(f"Unknown aggregation: {aggregate}")


def lips_error(pred_frames, gt_frames, lip_indices, aggregate: str = "frame_mean") -> float:
    """
    Per-frame maximum Euclidean error over lip points, averaged over frames
    ('frame_mean') or maximized over frames ('global_max').
    """
    pred, gt = _as_frames(pred_frames), _as_frames(gt_frames)
    _check_pair(pred, gt)
    lip_indices = np.asarray(lip_indices, dtype=np.int64)
    if lip_indices.size == 0:
        raise ValueError("lip_indices must not be empty")
    errors = np.linalg.norm(pred[:, lip_indices] - gt[:, lip_indices], axis=-1)
    return _aggregate(errors.max(axis=1), aggregate)


def displacement_error(pred_disp, gt_disp) -> float:
    """Mean per-point Euclidean displacement error over all frames and points."""
    pred, gt = _as_frames(pred_disp), _as_frames(gt_disp)
    _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def displacement_angle_error(pred_disp, gt_disp, eps: float = 1e-8, aggregate: str = "frame_mean") -> float:
    """
    Per-frame maximum angle between predicted and true displacements.

    Points where either displacement is shorter than eps are skipped; frames
    without any valid point do not contribute.
    """
    pred, gt = _as_frames(pred_disp), _as_frames(gt_disp)
    _check_pair(pred, gt)
    norm_pred = np.linalg.norm(pred, axis=-1)
    norm_gt = np.linalg.norm(gt, axis=-1)
    valid = (norm_pred >= eps) & (norm_gt >= eps)
    cosine = (pred * gt).sum(axis=-1) / np.where(valid, norm_pred * norm_gt, 1.0)
    angles = np.arccos(np.clip(cosine, -1.0, 1.0))
    angles = np.where(valid, angles, -np.inf)
    per_frame = angles.max(axis=1)
    return _aggregate(per_frame[np.isfinite(per_frame)], aggregate)


def per_vertex_error(pred, gt) -> np.ndarray:
    """Mean Euclidean error of every point over frames."""
    pred, gt = _as_frames(pred), _as_frames(gt)
    _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=0)


def metric_block(pred_disp, gt_disp, lip_indices, eps: float = 1e-8) -> MetricBlock:
    """LE, DE and DAE of one output kind; LE on displacements equals LE on positions."""
    return MetricBlock(
        le_mm=lips_error(pred_disp, gt_disp, lip_indices),
        de_mm=displacement_error(pred_disp, gt_disp),
        dae_rad=displacement_angle_error(pred_disp, gt_disp, eps),
        le_global_mm=lips_error(pred_disp, gt_disp, lip_indices, aggregate="global_max"),
        dae_global_rad=displacement_angle_error(pred_disp, gt_disp, eps, aggregate="global_max"),
    )


def match_frame_rate(gt_frames: np.ndarray, gt_fps: float, pred_fps: float, policy: str = "decimate") -> np.ndarray:
    """
    Bring ground truth to the prediction frame rate by keeping every n-th frame.

    Raises:
        ValueError: If the rates differ and policy is 'error', or the ratio is not an integer
    """
    if abs(gt_fps - pred_fps) < 1e-6:
        return gt_frames
    if policy == "error":
        raise ValueError(f"Prediction runs at {pred_fps} fps, ground truth at {gt_fps} fps")
    ratio = gt_fps / pred_fps
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-6:
        raise ValueError(f"Cannot decimate {gt_fps} fps ground truth to {pred_fps} fps (ratio {ratio:.3f})")
    return gt_frames[::step]


class SequenceOutputs(BaseModel):
    """Landmark and/or dense displacement frames of one sequence."""
    sequence_id: str
    subject_id: str
    fps: float
    landmarks: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True


def _block_pairs(pred: SequenceOutputs, gt: SequenceOutputs, topo: Topology, cfg: EvalConfig):
    """Yield (block, prediction, ground truth, lip indices) for every available block."""
    gt_landmarks = gt.landmarks
    if gt_landmarks is None and gt.dense is not None:
        gt_landmarks = gt.dense[:, topo.landmark_indices]

    if pred.landmarks is not None and gt_landmarks is not None:
        yield "landmarks", pred.landmarks, gt_landmarks, topo.lip_indices
    if pred.dense is not None and gt.dense is not None:
        yield "dense", pred.dense, gt.dense, topo.dense_lip_indices
        if cfg.dense_landmarks and gt_landmarks is not None:
            yield "dense_landmarks", pred.dense[:, topo.landmark_indices], gt_landmarks, topo.lip_indices


def _mean_block(blocks: Sequence[MetricBlock]) -> MetricBlock:
    fields = MetricBlock.model_fields.keys()
    return MetricBlock(**{f: float(np.mean([getattr(b, f) for b in blocks])) for f in fields})


def evaluate_sequences(
    predictions: Sequence[SequenceOutputs],
    ground_truth: Sequence[SequenceOutputs],
    topo: Topology,
    cfg: Optional[EvalConfig] = None,
    split: str = "test",
) -> EvalReport:
    """
    Score predictions against ground truth and average over sequences.

    Ground truth is decimated to the prediction frame rate; a remaining
    off-by-one in length is resolved by truncating the longer sequence.
    With neutral_baseline enabled, all-zero predictions are scored the same way.
    """
    cfg = cfg or EvalConfig()
    truth = {g.sequence_id: g for g in ground_truth}
    per_sequence: List[SequenceMetrics] = []
    baseline_sequences: Dict[str, List[MetricBlock]] = {}
    fps_used = None

    for pred in predictions:
        if pred.sequence_id not in truth:
            raise ValueError(f"No ground truth for sequence {pred.sequence_id}")
        gt = truth[pred.sequence_id]
        fps_used = pred.fps
        for block, p, g, lips in _block_pairs(pred, gt, topo, cfg):
            g = match_frame_rate(np.asarray(g), gt.fps, pred.fps, cfg.fps_policy)
            n = min(len(p), len(g))
            if abs(len(p) - len(g)) > 1:
                raise ValueError(
                    f"Sequence {pred.sequence_id} block {block}: {len(p)} predicted vs {len(g)} true frames"
                )
            p, g = np.asarray(p)[:n], g[:n]
            per_sequence.append(SequenceMetrics(
                sequence_id=pred.sequence_id,
                subject_id=pred.subject_id,
                block=block,
                frames=n,
                metrics=metric_block(p, g, lips, cfg.dae_eps),
            ))
            if cfg.neutral_baseline:
                baseline_sequences.setdefault(block, []).append(
                    metric_block(np.zeros_like(g), g, lips, cfg.dae_eps)
                )

    if not per_sequence:
        raise ValueError("Nothing to evaluate: no prediction/ground-truth block pairs")

    blocks = {}
    for block in BLOCKS:
        entries = [s.metrics for s in per_sequence if s.block == block]
        if entries:
            blocks[block] = _mean_block(entries)
    baseline = {block: _mean_block(entries) for block, entries in baseline_sequences.items()}

    report = EvalReport(split=split, fps=fps_used, blocks=blocks, per_sequence=per_sequence, baseline=baseline)
    for block, m in blocks.items():
        logger.info(f"{split} {block}: LE={m.le_mm:.4f} mm DE={m.de_mm:.4f} mm DAE={m.dae_rad:.4f} rad")
    return report


def ground_truth_outputs(sequences, topo: Topology) -> List[SequenceOutputs]:
    """Landmark and dense displacement ground truth of talking sequences."""
    neutrals = resolve_neutrals(sequences)
    outputs = []
    for seq in sequences:
        dense = seq.frames - neutrals[seq.subject_id][None]
        outputs.append(SequenceOutputs(
            sequence_id=seq.sequence_id,
            subject_id=seq.subject_id,
            fps=seq.fps,
            landmarks=dense[:, topo.landmark_indices],
            dense=dense,
        ))
    return outputs


def evaluate_pipeline(
    s2l_checkpoint: Union[str, Path],
    s2d_checkpoint: Union[str, Path],
    test_sequences,
    asset,
    encoder=None,
    cfg: Optional[EvalConfig] = None,
    fps: Optional[float] = None,
    split: str = "test",
) -> EvalReport:
    """
    Run audio → S2L → S2D on every test sequence and score both stages.

    Args:
        s2l_checkpoint: Speech2Landmarks checkpoint
        s2d_checkpoint: Sparse2Dense checkpoint
        test_sequences: TalkingSequence list
        asset: TopologyAsset both checkpoints were trained on
        encoder: Speech encoder (built from settings when omitted)
        cfg: Evaluation options
        fps: Prediction frame rate (each sequence's own rate when omitted)
        split: Split name stored in the report

    Raises:
        TopologyMismatchError: If a checkpoint was trained on another topology
    """
    pipeline = AnimationPipeline.from_checkpoints(s2l_checkpoint, s2d_checkpoint, asset, encoder=encoder)
    predictions = []
    for seq in test_sequences:
        out_fps = fps or seq.fps
        landmarks, dense = pipeline.predict_displacements(seq.audio, seq.sample_rate, fps=out_fps)
        predictions.append(SequenceOutputs(
            sequence_id=seq.sequence_id,
            subject_id=seq.subject_id,
            fps=out_fps,
            landmarks=landmarks,
            dense=dense,
        ))
    return evaluate_sequences(predictions, ground_truth_outputs(test_sequences, asset.topology), asset.topology, cfg, split)


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def report_to_frame(report: EvalReport) -> pd.DataFrame:
    """One row per (method, block) with both aggregation variants."""
    rows = []
    for method, blocks in (("model", report.blocks), ("neutral_baseline", report.baseline)):
        for block, m in blocks.items():
            rows.append({
                "split": report.split,
                "fps": report.fps,
                "method": method,
                "block": block,
                "LE_mm": m.le_mm,
                "DE_mm": m.de_mm,
                "DAE_rad": m.dae_rad,
                "LE_global_mm": m.le_global_mm,
                "DAE_global_rad": m.dae_global_rad,
            })
    return pd.DataFrame(rows)


def write_report_csv(report: EvalReport, file_path: Union[str, Path], per_sequence: bool = True) -> Path:
    """Aggregate rows, plus per-sequence rows in a sibling *_sequences.csv file."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    report_to_frame(report).to_csv(file_path, index=False)
    if per_sequence and report.per_sequence:
        frame = pd.DataFrame([
            {"sequence_id": s.sequence_id, "subject_id": s.subject_id, "block": s.block, "frames": s.frames,
             **s.metrics.model_dump()}
            for s in report.per_sequence
        ])
        frame.to_csv(file_path.with_name(f"{file_path.stem}_sequences.csv"), index=False)
    logger.info(f"Evaluation report written to {file_path}")
    return file_path


def format_report_table(report: EvalReport, include_reference: bool = True) -> str:
    """
    Text table with Landmarks and Dense column groups (LE, DE, DAE each).
    Landmarks gathered from dense output, global-max variants and the neutral
    baseline follow as extra rows.
    """
    def cells(block: Optional[MetricBlock]) -> List[str]:
        if block is None:
            return ["-", "-", "-"]
        return [f"{block.le_mm:.4f}", f"{block.de_mm:.4f}", f"{block.dae_rad:.4f}"]

    def global_cells(block: Optional[MetricBlock]) -> List[str]:
        if block is None:
            return ["-", "-", "-"]
        return [f"{block.le_global_mm:.4f}", f"{block.de_mm:.4f}", f"{block.dae_global_rad:.4f}"]

    header = ["Method", "LE (mm)", "DE (mm)", "DAE (Rad)", "LE (mm)", "DE (mm)", "DAE (Rad)"]
    rows = []
    if include_reference:
        for method, blocks in PUBLISHED_REFERENCE_ROWS.items():
            rows.append([f"{method} (published)"]
                        + [f"{v:.2f}" for v in blocks["landmarks"]]
                        + [f"{v:.2f}" for v in blocks["dense"]])
    rows.append(["Model"] + cells(report.blocks.get("landmarks")) + cells(report.blocks.get("dense")))
    if "dense_landmarks" in report.blocks:
        rows.append(["Model (landmarks from dense)"] + cells(report.blocks["dense_landmarks"]) + ["-", "-", "-"])
    rows.append(["Model (global max)"]
                + global_cells(report.blocks.get("landmarks")) + global_cells(report.blocks.get("dense")))
    if report.baseline:
        rows.append(["Neutral baseline"]
                    + cells(report.baseline.get("landmarks")) + cells(report.baseline.get("dense")))

    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    group = f"{'':<{widths[0]}} | {'Landmarks':^{sum(widths[1:4]) + 6}} | {'Dense':^{sum(widths[4:7]) + 6}}"

    def line(values: List[str]) -> str:
        first = f"{values[0]:<{widths[0]}}"
        left = "   ".join(f"{v:>{w}}" for v, w in zip(values[1:4], widths[1:4]))
        right = "   ".join(f"{v:>{w}}" for v, w in zip(values[4:7], widths[4:7]))
        return f"{first} | {left} | {right}"

    rule = "-" * len(line(header))
    lines = [f"split={report.split} fps={report.fps:g}", group, line(header), rule]
    lines += [line(r) for r in rows]
    return "\n".join(lines)


def reference_deviation(
    report: EvalReport,
    reference: Optional[Dict[str, Tuple[float, float, float]]] = None,
) -> Dict[str, Tuple[float, float, float]]:
    """
    Relative deviation |measured - reference| / reference of LE, DE and DAE per block.

    Args:
        report: Evaluation report holding the blocks named in the reference
        reference: (LE_mm, DE_mm, DAE_rad) per block, TARGET_ROWS by default

    Raises:
        ValueError: If the report lacks a block the reference names
    """
    reference = reference or TARGET_ROWS
    deviations = {}
    for block, expected in reference.items():
        if block not in report.blocks:
            raise ValueError(f"Report has no '{block}' block to compare")
        metrics = report.blocks[block]
        measured = (metrics.le_mm, metrics.de_mm, metrics.dae_rad)
        deviations[block] = tuple(abs(m - e) / e for m, e in zip(measured, expected))
    return deviations
