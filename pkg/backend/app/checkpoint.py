"""
Checkpoint files shared by both models.
"""
import logging
import os
import random
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from app.errors import TopologyMismatchError

logger = logging.getLogger(__name__)


def capture_rng_state() -> Dict[str, Any]:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def restore_rng_state(state: Dict[str, Any]) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(
    file_path: Union[str, Path],
    kind: str,
    config: Dict[str, Any],
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    step: int = 0,
    topology_hash: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint atomically (temp file, then rename).

    Args:
        file_path: Destination
        kind: 's2l' or 's2d'
        config: Model config as a plain dict
        model: Module whose state dict is stored
        optimizer: Optimizer whose state is stored for resuming
        epoch: Completed epochs
        step: Completed optimizer steps
        topology_hash: Content hash of the topology asset the model was built on
        extra: Additional bookkeeping (e.g. best validation score)

    Returns:
        The written path
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": kind,
        "config": config,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "rng_state": capture_rng_state(),
        "topology_hash": topology_hash,
        "extra": extra or {},
    }
    tmp_path = file_path.with_name(file_path.name + ".tmp")
    torch.save(payload, tmp_path)
    os.replace(tmp_path, file_path)
    logger.info(f"Checkpoint written: {file_path} (kind={kind}, epoch={epoch}, step={step})")
    return file_path


def load_checkpoint(
    file_path: Union[str, Path],
    kind: Optional[str] = None,
    topology_hash: Optional[str] = None,
    map_location: Union[str, torch.device] = "cpu",
) -> Dict[str, Any]:
    """
    Read a checkpoint and check it against the expected kind and topology.

    Raises:
        ValueError: If the file is missing or holds a different model kind
        TopologyMismatchError: If the stored topology hash differs from topology_hash
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise ValueError(f"Checkpoint not found: {file_path}")

    payload = torch.load(file_path, map_location=map_location, weights_only=False)
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"Checkpoint {file_path} holds a '{payload.get('kind')}' model, expected '{kind}'")
    stored_hash = payload.get("topology_hash")
    if topology_hash is not None and stored_hash is not None and stored_hash != topology_hash:
        logger.error(f"Topology mismatch for {file_path}: {stored_hash} vs {topology_hash}")
        raise TopologyMismatchError(expected=topology_hash, found=stored_hash, source=f"checkpoint {file_path.name}")
    return payload
