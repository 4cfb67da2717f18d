"""
Checkpoint files.

A checkpoint is a JSON manifest listing every parameter array as
{name, shape, offset} plus a sidecar blob of little-endian float64 values
in manifest order. Reading back is bit-exact.
"""

import json
import logging
from pathlib import Path

import numpy as np

from core.utils.errors import ArtifactIOError, CheckpointError
from core.utils.hashing import digest_arrays

logger = logging.getLogger("fsod.training")

CHECKPOINT_FORMAT = "fsod-checkpoint/1"
BLOB_DTYPE = "<f8"


def parameter_digest(layers) -> str:
    """SHA-256 of all parameter arrays in layer order."""
    return digest_arrays(array for layer in layers for _, array, _ in layer.arrays())


def save_checkpoint(path, layers, meta=None) -> Path:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    layers = list(layers)

    entries, chunks, offset = [], [], 0
    for layer in layers:
        for name, array, _ in layer.arrays():
            chunk = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
            entries.append({"name": name, "shape": list(array.shape), "offset": offset})
            chunks.append(chunk)
            offset += len(chunk)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": BLOB_DTYPE,
        "blob": blob_path.name,
        "nbytes": offset,
        "digest": parameter_digest(layers),
        "layers": entries,
        "meta": meta or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(b"".join(chunks))
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as e:
        raise ArtifactIOError(f"Could not write checkpoint ({e.strerror})", path=path)

    logger.info(f"Checkpoint written: {path} ({len(entries)} arrays, {offset} bytes)")
    return path


def read_checkpoint(path):
    """Return ({name: array}, meta) from a manifest path."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        blob = (path.parent / manifest["blob"]).read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"Could not read checkpoint ({e.strerror})", path=path)
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"Malformed checkpoint manifest {path}: {e}")

    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("dtype") != BLOB_DTYPE:
        raise CheckpointError(f"Unsupported checkpoint format in {path}")
    if len(blob) != manifest.get("nbytes"):
        raise CheckpointError(
            f"Checkpoint blob size {len(blob)} != manifest {manifest.get('nbytes')}: {path}"
        )

    arrays = {}
    itemsize = np.dtype(BLOB_DTYPE).itemsize
    for entry in manifest["layers"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] < 0 or entry["offset"] + count * itemsize > len(blob):
            raise CheckpointError(
                f"Layer {entry['name']} at offset {entry['offset']} ({count} values) overruns the {len(blob)} byte blob: {path}"
            )
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=entry["offset"])
        arrays[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return arrays, manifest.get("meta", {})


def load_checkpoint(layers, path) -> dict:
    """Copy checkpoint values into ``layers``; the shape tables must agree."""
    arrays, meta = read_checkpoint(path)
    layers = list(layers)

    expected = {name: array.shape for layer in layers for name, array, _ in layer.arrays()}
    stored = {name: tuple(array.shape) for name, array in arrays.items()}
    if expected != stored:
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        mismatched = sorted(
            name for name in set(expected) & set(stored) if expected[name] != stored[name]
        )
        raise CheckpointError(
            f"Checkpoint {path} does not match the model shape table",
            data={"missing": missing, "unexpected": unexpected, "mismatched": mismatched},
        )

    for layer in layers:
        layer.weights[...] = arrays[f"{layer.name}.weights"]
        layer.bias[...] = arrays[f"{layer.name}.bias"]
        layer.zero_grad()
    return meta
