"""
Parameter checkpoints: a raw binary blob plus a text manifest

<stem>.bin       little-endian tensors, concatenated in manifest order, no padding
<stem>.manifest  "# key=value" header lines, then one line per tensor:
                 name dtype shape offset nbytes
                 (dtype as a numpy type string such as <f4, shape comma-separated or - for scalars,
                 offset and nbytes in bytes into the .bin file)
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from ballsparse.exceptions import ShapeError
from ballsparse.processing.attention.params import BsaConfig, ModelParams, init_model_params
from ballsparse.processing.utils.array_utils import make_rng

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest"
BLOB_SUFFIX = ".bin"


def _paths(stem: Path) -> Tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + BLOB_SUFFIX), stem.with_name(stem.name + MANIFEST_SUFFIX)


def save_checkpoint(
    params: ModelParams,
    stem: Path,
    config: Optional[BsaConfig] = None,
    metadata: Optional[Dict[str, object]] = None
) -> Tuple[Path, Path]:
    """
    Write every named parameter to <stem>.bin / <stem>.manifest

    Args:
        params: Model parameters
        stem: Output path without suffix
        config: Layer configuration recorded in the header
        metadata: Extra header entries

    Returns:
        Tuple of (blob path, manifest path)
    """
    blob_path, manifest_path = _paths(stem)
    blob_path.parent.mkdir(parents=True, exist_ok=True)

    header = dict(metadata or {})
    header["depth"] = len(params.blocks)
    header["in_dim"] = params.embed_w.shape[0]
    if config is not None:
        header["config"] = config.model_dump_json()

    lines = [f"# {key}={value}" for key, value in header.items()]
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, array in params.named_arrays().items():
            little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
            data = little.tobytes()
            shape = ",".join(str(s) for s in array.shape) or "-"
            lines.append(f"{name} {little.dtype.str} {shape} {offset} {len(data)}")
            blob.write(data)
            offset += len(data)

    manifest_path.write_text("\n".join(lines) + "\n")
    logger.info(f"Saved checkpoint ({offset} bytes, {len(params.named_arrays())} tensors) to {blob_path}")
    return blob_path, manifest_path


def read_manifest(stem: Path) -> Tuple[Dict[str, str], list]:
    """
    Parse a manifest

    Returns:
        Tuple of (header mapping, [(name, dtype, shape, offset, nbytes), ...])
    """
    _, manifest_path = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"Checkpoint manifest not found at {manifest_path}")

    header = {}
    entries = []
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
            continue
        name, dtype, shape, offset, nbytes = line.split()
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        entries.append((name, np.dtype(dtype), dims, int(offset), int(nbytes)))
    return header, entries


def load_checkpoint(stem: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """
    Read every tensor of a checkpoint

    Returns:
        Tuple of (name -> array in native byte order, header mapping)
    """
    blob_path, _ = _paths(stem)
    header, entries = read_manifest(stem)
    if not blob_path.exists():
        raise FileNotFoundError(f"Checkpoint data not found at {blob_path}")

    blob = blob_path.read_bytes()
    arrays = {}
    for name, dtype, shape, offset, nbytes in entries:
        if offset + nbytes > len(blob):
            raise ShapeError(f"Tensor {name} runs past the end of {blob_path}")
        array = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        arrays[name] = array.reshape(shape).astype(dtype.newbyteorder("="))
    logger.info(f"Loaded {len(arrays)} tensors from {blob_path}")
    return arrays, header


def restore_model(stem: Path) -> Tuple[BsaConfig, ModelParams]:
    """Rebuild the configuration and parameters stored by save_checkpoint"""
    arrays, header = load_checkpoint(stem)
    if "config" not in header:
        raise ShapeError(f"Checkpoint {stem} does not record its configuration")
    config = BsaConfig.model_validate_json(header["config"])
    dtype = arrays["embed.w"].dtype
    params = init_model_params(config, int(header["in_dim"]), int(header["depth"]), make_rng(0), dtype)
    params.load_named(arrays)
    return config, params
