"""Binary tensor files, edge lists and artifact containers.

A tensor file is a 4-byte ASCII magic, the extents as little-endian u64,
an optional layout byte (kernel files only) and row-major little-endian
float64 data. The generic magic ``DTN1`` stores its rank as one extra u64
before the extents.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import DataError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GENERIC_MAGIC = "DTN1"
FIXED_RANKS = {"STG1": 3, "TTG1": 3, "LG41": 4, "WA31": 3, "WB31": 3}
KERNEL_MAGICS = {"WA31", "WB31"}
MANIFEST_NAME = "manifest.json"

_EXTENT = np.dtype("<u8")
_VALUE = np.dtype("<f8")


def write_tensor(
    path: PathLike, array: np.ndarray, magic: str = GENERIC_MAGIC, layout_tag: Optional[int] = None
) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array, dtype=np.float64)
    if magic != GENERIC_MAGIC and magic not in FIXED_RANKS:
        raise ValidationError(f"unknown tensor magic {magic!r}")
    if magic in FIXED_RANKS and array.ndim != FIXED_RANKS[magic]:
        raise ValidationError(
            f"{magic} files hold rank-{FIXED_RANKS[magic]} tensors, got rank {array.ndim}"
        )
    parts = [magic.encode("ascii")]
    if magic == GENERIC_MAGIC:
        parts.append(np.array([array.ndim], dtype=_EXTENT).tobytes())
    parts.append(np.array(array.shape, dtype=_EXTENT).tobytes())
    if magic in KERNEL_MAGICS:
        parts.append(bytes([0 if layout_tag is None else int(layout_tag)]))
    parts.append(array.astype(_VALUE, copy=False).tobytes(order="C"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def read_tensor(path: PathLike, magic: Optional[str] = None) -> Tuple[np.ndarray, Optional[int]]:
    """Return ``(array, layout_tag)``; the tag is None for non-kernel files."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"missing artifact {path}") from exc
    found = blob[:4].decode("ascii", errors="replace")
    if magic is not None and found != magic:
        raise DataError(f"{path}: expected magic {magic!r}, found {found!r}")
    offset = 4
    if found == GENERIC_MAGIC:
        if len(blob) < offset + 8:
            raise DataError(f"{path}: truncated header")
        rank = int(np.frombuffer(blob, dtype=_EXTENT, count=1, offset=offset)[0])
        offset += 8
    elif found in FIXED_RANKS:
        rank = FIXED_RANKS[found]
    else:
        raise DataError(f"{path}: unknown magic {found!r}")
    if len(blob) < offset + 8 * rank:
        raise DataError(f"{path}: truncated header")
    shape = tuple(int(e) for e in np.frombuffer(blob, dtype=_EXTENT, count=rank, offset=offset))
    offset += 8 * rank
    layout_tag = None
    if found in KERNEL_MAGICS:
        layout_tag = blob[offset]
        offset += 1
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != 8 * count:
        raise DataError(
            f"{path}: payload holds {(len(blob) - offset) // 8} values, header promises {count}"
        )
    if count == 0:
        return np.empty(shape), layout_tag
    data = np.frombuffer(blob, dtype=_VALUE, count=count, offset=offset)
    return data.astype(np.float64).reshape(shape), layout_tag


def write_edge_list(path: PathLike, weights: np.ndarray) -> Path:
    """One ``i j s weight`` line per non-zero entry of an n x n x s tensor."""
    path = Path(path)
    lines = [
        f"{i} {j} {s} {float(weights[i, j, s])!r}"
        for i, j, s in zip(*np.nonzero(weights))
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def dump_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"missing artifact {path}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: could not decode JSON: {exc}") from exc


def write_container(
    directory: PathLike, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any]
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, array in sorted(tensors.items()):
        write_tensor(directory / f"{name}.bin", array)
    manifest = {
        "metadata": dict(metadata),
        "tensors": {name: list(np.shape(array)) for name, array in sorted(tensors.items())},
    }
    dump_json(directory / MANIFEST_NAME, manifest)
    logger.info("Wrote %d tensors to %s", len(tensors), directory)
    return directory


def read_container(directory: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    directory = Path(directory)
    manifest = load_json(directory / MANIFEST_NAME)
    tensors = {}
    for name, shape in manifest["tensors"].items():
        array, _ = read_tensor(directory / f"{name}.bin", GENERIC_MAGIC)
        if list(array.shape) != list(shape):
            raise DataError(f"{directory}/{name}.bin: shape {array.shape} disagrees with manifest {shape}")
        tensors[name] = array
    return tensors, manifest["metadata"]
