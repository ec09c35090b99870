# Checkpoints: raw little-endian tensor blob plus a plain-text manifest
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

BLOB_SUFFIX = ".bin"
MANIFEST_SUFFIX = ".manifest"
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


class CheckpointError(ValueError):
    """Unreadable, inconsistent or incompatible checkpoint files"""


def checkpoint_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    return path.with_name(path.name + BLOB_SUFFIX), path.with_name(path.name + MANIFEST_SUFFIX)


def _format_meta(value: Any) -> str:
    return json.dumps(value, default=str)


def _parse_meta(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        # hand-edited bare words
        return value


def save_checkpoint(state: Dict[str, torch.Tensor], path: Union[str, Path], meta: Dict[str, Any]) -> Path:
    """
    Write a state dict as <path>.bin and <path>.manifest

    Both files are written next to their targets and renamed into place; the
    manifest goes last so a reader never sees a manifest without its blob.

    Args:
        state: Tensor state dict (parameters and buffers)
        path: Base path without suffix
        meta: JSON-serializable values recorded in the [meta] section

    Returns:
        The base path
    """
    blob_path, manifest_path = checkpoint_paths(path)
    blob_path.parent.mkdir(parents=True, exist_ok=True)

    lines = ["[meta]"]
    lines += [f"{key} = {_format_meta(value)}" for key, value in meta.items()]
    lines += ["", "[params]", "# name offset shape dtype"]
    chunks = []
    offset = 0
    for name, tensor in state.items():
        dtype = _DTYPES.get(tensor.dtype)
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        data = tensor.detach().cpu().contiguous().numpy().astype(dtype, copy=False).tobytes()
        shape = "x".join(str(d) for d in tensor.shape) or "scalar"
        lines.append(f"{name} {offset} {shape} {dtype}")
        chunks.append(data)
        offset += len(data)

    blob_tmp = blob_path.with_name(blob_path.name + ".tmp")
    manifest_tmp = manifest_path.with_name(manifest_path.name + ".tmp")
    with open(blob_tmp, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    with open(manifest_tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(blob_tmp, blob_path)
    os.replace(manifest_tmp, manifest_path)
    logger.info(f"Saved checkpoint with {len(state)} tensors ({offset} bytes) to {blob_path}")
    return Path(path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        (meta, state dict)

    Raises:
        CheckpointError: Missing files or a manifest that does not match the blob
    """
    blob_path, manifest_path = checkpoint_paths(path)
    for p in (blob_path, manifest_path):
        if not p.exists():
            raise CheckpointError(f"checkpoint file not found: {p}")
    blob = blob_path.read_bytes()

    meta: Dict[str, Any] = {}
    state: Dict[str, torch.Tensor] = {}
    section = None
    for raw in manifest_path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section == "meta":
            key, _, value = line.partition("=")
            meta[key.strip()] = _parse_meta(value.strip())
        elif section == "params":
            try:
                name, offset, shape, dtype = line.split()
                offset = int(offset)
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
                count = int(np.prod(dims)) if dims else 1
                end = offset + count * np.dtype(dtype).itemsize
            except (ValueError, TypeError) as e:
                raise CheckpointError(f"bad manifest line '{line}': {e}") from e
            if end > len(blob):
                raise CheckpointError(f"{name} runs past the end of {blob_path}")
            array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims)
            state[name] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
        else:
            raise CheckpointError(f"manifest line outside a section: '{line}'")
    logger.debug(f"Loaded checkpoint {blob_path} with {len(state)} tensors")
    return meta, state


def load_state(module: torch.nn.Module, state: Dict[str, torch.Tensor]) -> torch.nn.Module:
    """Copy a loaded state into a freshly built module, naming any mismatch"""
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    wrong = [n for n in expected if n in state and tuple(expected[n].shape) != tuple(state[n].shape)]
    if missing or unexpected or wrong:
        raise CheckpointError(f"checkpoint does not fit the model: missing={missing}, "
                              f"unexpected={unexpected}, shape mismatch={wrong}")
    module.load_state_dict({n: state[n].to(expected[n].dtype) for n in expected})
    return module
