"""
Offline flat-shaded rasterization of mesh sequences to PNG frames.
"""
import logging
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import animation, colors  # noqa: E402
from mpl_toolkits.mplot3d.art3d import Poly3DCollection  # noqa: E402

from app.container import MotionSequence  # noqa: E402

logger = logging.getLogger(__name__)

# mesh +z faces the camera, mesh +y is up
LIGHT_DIRECTION = np.array([0.3, 0.4, 1.0]) / np.linalg.norm([0.3, 0.4, 1.0])
BASE_COLOR = np.array([0.78, 0.78, 0.80])
HEATMAP_CMAP = "coolwarm"


def _to_plot_axes(vertices: np.ndarray) -> np.ndarray:
    """Rotate mesh coordinates so the fixed camera looks at the face front."""
    return np.stack([vertices[:, 0], -vertices[:, 2], vertices[:, 1]], axis=1)


def _face_shading(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True).clip(min=1e-12)
    return 0.25 + 0.75 * np.clip(normals @ LIGHT_DIRECTION, 0.0, 1.0)


def _cube_limits(vertices: np.ndarray) -> Tuple[np.ndarray, float]:
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    return (lo + hi) / 2.0, 0.55 * float((hi - lo).max())


def render_frames(
    sequence: MotionSequence,
    faces: np.ndarray,
    out_dir: Union[str, Path],
    scalars: Optional[np.ndarray] = None,
    video_path: Optional[Union[str, Path]] = None,
    image_size: int = 512,
    vmax: Optional[float] = None,
) -> List[Path]:
    """
    Render every frame of a vertex-position sequence to frame_00000.png, ...

    Args:
        sequence: K×M×3 vertex positions
        faces: F×3 triangles shared by all frames
        out_dir: Directory for the PNG files
        scalars: Optional K×M per-vertex values drawn as a heatmap (blue low, red high)
        video_path: Optional MP4 stitched with ffmpeg when it is available
        image_size: Square image side in pixels
        vmax: Heatmap upper bound (maximum of scalars when omitted)

    Returns:
        Paths of the written PNG frames
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    faces = np.asarray(faces, dtype=np.int64)
    frames = np.asarray(sequence.frames, dtype=np.float64)
    if scalars is not None:
        scalars = np.asarray(scalars, dtype=np.float64)
        if scalars.shape != frames.shape[:2]:
            raise ValueError(f"Heatmap values have shape {scalars.shape}, expected {frames.shape[:2]}")
        norm = colors.Normalize(vmin=0.0, vmax=vmax or max(float(scalars.max()), 1e-12))
        cmap = matplotlib.colormaps[HEATMAP_CMAP]

    center, half = _cube_limits(_to_plot_axes(frames[0]))
    dpi = 100
    fig = plt.figure(figsize=(image_size / dpi, image_size / dpi), dpi=dpi)
    ax = fig.add_subplot(111, projection="3d")

    writer = None
    if video_path is not None:
        if animation.writers.is_available("ffmpeg"):
            writer = animation.FFMpegWriter(fps=sequence.fps)
        else:
            logger.warning("ffmpeg is not available; skipping video, PNG frames only")

    paths = []
    with writer.saving(fig, str(video_path), dpi) if writer else nullcontext():
        for k, vertices in enumerate(frames):
            ax.clear()
            ax.set_axis_off()
            ax.view_init(elev=5, azim=-90)
            for axis_set, c in zip((ax.set_xlim3d, ax.set_ylim3d, ax.set_zlim3d), center):
                axis_set(c - half, c + half)

            shade = _face_shading(vertices, faces)[:, None]
            if scalars is None:
                face_colors = BASE_COLOR[None] * shade
            else:
                face_values = scalars[k][faces].mean(axis=1)
                face_colors = cmap(norm(face_values))[:, :3] * (0.5 + 0.5 * shade)

            collection = Poly3DCollection(_to_plot_axes(vertices)[faces], linewidths=0.0)
            collection.set_facecolor(np.clip(face_colors, 0.0, 1.0))
            collection.set_edgecolor("none")
            ax.add_collection3d(collection)

            path = out_dir / f"frame_{k:05d}.png"
            fig.savefig(path, dpi=dpi)
            paths.append(path)
            if writer:
                writer.grab_frame()

    plt.close(fig)
    logger.info(f"Rendered {len(paths)} frames to {out_dir}")
    return paths
