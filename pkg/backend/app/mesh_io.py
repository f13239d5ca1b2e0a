"""
OBJ and PLY reading and writing for fixed-topology meshes.
"""
import logging
import re
from pathlib import Path
from typing import Optional, Union

import trimesh

from app.errors import MeshFormatError
from app.mesh_core import Mesh

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ('obj', 'ply')


def _check_obj_faces(file_path: Path) -> None:
    """Reject OBJ files containing polygons other than triangles."""
    with open(file_path, 'r', errors='replace') as f:
        for line_no, line in enumerate(f, start=1):
            if line.startswith('f ') or line.startswith('f\t'):
                corners = line.split()[1:]
                if len(corners) != 3:
                    raise MeshFormatError(
                        f"{file_path}: non-triangular face with {len(corners)} corners at line {line_no}"
                    )


def _ply_declared_faces(file_path: Path) -> Optional[int]:
    """Read the face count declared in a PLY header."""
    with open(file_path, 'rb') as f:
        header = b''
        while b'end_header' not in header:
            chunk = f.readline()
            if not chunk:
                raise MeshFormatError(f"{file_path}: PLY header has no end_header")
            header += chunk
    match = re.search(rb'element\s+face\s+(\d+)', header)
    return int(match.group(1)) if match else None


def load_mesh(file_path: Union[str, Path]) -> Mesh:
    """
    Load a triangle mesh from OBJ or PLY, preserving vertex order.

    Args:
        file_path: Path to the mesh file

    Returns:
        Mesh with validated vertices and faces

    Raises:
        ValueError: If the file does not exist
        MeshFormatError: If parsing fails, faces are not triangles or the mesh is empty
    """
    file_path = Path(file_path)

    if not file_path.exists():
        raise ValueError(f"Mesh file not found: {file_path}")

    file_type = file_path.suffix.lower().lstrip('.')
    if file_type not in SUPPORTED_FORMATS:
        raise MeshFormatError(f"Unsupported format: {file_type}. Use 'obj' or 'ply'.")

    declared_faces = None
    if file_type == 'obj':
        _check_obj_faces(file_path)
    else:
        declared_faces = _ply_declared_faces(file_path)

    try:
        loaded = trimesh.load(
            file_path,
            file_type=file_type,
            process=False,
            maintain_order=True,
            force='mesh',
        )
    except Exception as e:
        logger.error(f"Failed to parse mesh {file_path}: {e}")
        raise MeshFormatError(f"{file_path}: mesh parsing error: {e}") from e

    vertices = getattr(loaded, 'vertices', None)
    faces = getattr(loaded, 'faces', None)
    if vertices is None or faces is None or len(vertices) == 0 or len(faces) == 0:
        raise MeshFormatError(f"{file_path}: empty mesh (no vertices or no faces)")

    # trimesh splits quads into triangles on load, which shows up as extra faces
    if declared_faces is not None and len(faces) != declared_faces:
        raise MeshFormatError(
            f"{file_path}: non-triangular face (header declares {declared_faces} faces, "
            f"{len(faces)} triangles after loading)"
        )

    try:
        mesh = Mesh(vertices=vertices, faces=faces)
    except ValueError as e:
        raise MeshFormatError(f"{file_path}: {e}") from e

    logger.info(f"Loaded mesh {file_path.name}: {mesh.vertex_count} vertices, {mesh.face_count} faces")
    return mesh


def save_mesh(mesh: Mesh, file_path: Union[str, Path], binary: bool = True) -> Path:
    """
    Write a mesh as OBJ or PLY.

    Args:
        mesh: Mesh to write
        file_path: Destination; the suffix selects the format
        binary: For PLY, write binary little-endian instead of ASCII

    Returns:
        The written path
    """
    file_path = Path(file_path)
    file_type = file_path.suffix.lower().lstrip('.')
    if file_type not in SUPPORTED_FORMATS:
        raise MeshFormatError(f"Unsupported format: {file_type}. Use 'obj' or 'ply'.")

    file_path.parent.mkdir(parents=True, exist_ok=True)
    tri = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)

    if file_type == 'ply':
        data = trimesh.exchange.ply.export_ply(
            tri, encoding='binary' if binary else 'ascii', vertex_normal=False
        )
        file_path.write_bytes(data)
    else:
        text = trimesh.exchange.obj.export_obj(
            tri, include_normals=False, include_color=False, include_texture=False, digits=10
        )
        file_path.write_text(text)

    logger.debug(f"Saved mesh to {file_path}")
    return file_path
