"""
FastAPI inference service for LipField.
"""
import logging
from contextlib import asynccontextmanager
from typing import Optional

from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from starlette.concurrency import run_in_threadpool

from app.audio_frontend import decode_wav
from app.config import settings
from app.container import encode_container
from app.errors import LipFieldError
from app.mesh_core import Mesh
from app.mesh_io import load_mesh
from app.pipeline import AnimationPipeline
from app.topology_asset import load_topology_asset

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Global instances
pipeline: Optional[AnimationPipeline] = None
neutral_mesh: Optional[Mesh] = None


def load_service_pipeline() -> Optional[AnimationPipeline]:
    """
    Build the animation pipeline from LIPFIELD_* settings.

    Returns:
        AnimationPipeline, or None when the topology or a checkpoint is not configured
    """
    if not (settings.topology_path and settings.s2l_checkpoint and settings.s2d_checkpoint):
        logger.warning("Pipeline not loaded - set LIPFIELD_TOPOLOGY_PATH, LIPFIELD_S2L_CHECKPOINT and LIPFIELD_S2D_CHECKPOINT")
        return None
    asset = load_topology_asset(settings.topology_path)
    return AnimationPipeline.from_checkpoints(
        settings.s2l_checkpoint,
        settings.s2d_checkpoint,
        asset,
        fps=settings.target_fps,
    )


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan context manager for startup and shutdown events."""
    global pipeline, neutral_mesh

    logger.info("Starting LipField service...")
    try:
        pipeline = load_service_pipeline()
        if pipeline and settings.neutral_mesh_path:
            neutral_mesh = load_mesh(settings.neutral_mesh_path)
            logger.info(f"Neutral mesh loaded from {settings.neutral_mesh_path}")
    except (LipFieldError, ValueError, OSError) as e:
        logger.error(f"Pipeline failed to load: {e}")
        pipeline = None

    yield

    logger.info("Shutting down LipField service...")
    pipeline = None
    neutral_mesh = None


# Create FastAPI app
app = FastAPI(
    title="LipField API",
    description="Speech-driven 3D talking-head animation",
    version="1.0.0",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/")
async def root():
    """Root endpoint."""
    return {
        "service": "LipField API",
        "version": "1.0.0",
        "status": "operational"
    }


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "pipeline_loaded": pipeline is not None,
        "environment": settings.environment
    }


@app.get("/api/topology")
async def get_topology():
    """
    Describe the topology the loaded models animate.

    Returns:
        Content hash, vertex/landmark counts, hierarchy level sizes and encoder
    """
    if not pipeline:
        raise HTTPException(status_code=503, detail="Pipeline not initialized")

    asset = pipeline.asset
    return {
        "content_hash": asset.content_hash,
        "vertex_count": asset.topology.vertex_count,
        "landmark_count": asset.topology.landmark_count,
        "level_sizes": asset.hierarchy.level_sizes,
        "spiral_lengths": asset.spirals.spiral_lengths,
        "encoder": pipeline.encoder.name,
        "fps": pipeline.fps,
    }


@app.post("/api/animate")
async def animate(request: Request, fps: Optional[float] = Query(default=None, gt=0.0, le=240.0)):
    """
    Animate the configured neutral face from a WAV request body.

    Returns:
        LMS1 container bytes with K×M×3 vertex positions
    """
    if not pipeline:
        raise HTTPException(status_code=503, detail="Pipeline not initialized")

    data = await request.body()
    try:
        waveform, sample_rate = decode_wav(data)
        sequence = await run_in_threadpool(pipeline.animate, waveform, sample_rate, neutral_mesh, fps)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except LipFieldError as e:
        logger.error(f"Animation failed: {e}")
        raise HTTPException(status_code=500, detail=f"Animation failed: {str(e)}")

    return Response(
        content=encode_container(sequence),
        media_type="application/octet-stream",
        headers={
            "X-Frame-Count": str(sequence.frame_count),
            "X-Frame-Rate": f"{sequence.fps:g}",
        },
    )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
