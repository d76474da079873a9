"""
Checkpoint file format.

    [8 bytes little-endian u64: index length][JSON index][raw buffers]

The index maps tensor name -> {"dtype", "shape", "offset"} (offset relative to
the start of the buffer section, all buffers little-endian, row-major). The
optional "__metadata__" entry carries JSON-serialisable run state.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_NAMES = {v: k for k, v in _DTYPES.items()}
METADATA_KEY = "__metadata__"


class CheckpointError(Exception):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    le = arr.dtype.newbyteorder("<")
    if le not in _NAMES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return _NAMES[le]


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray], metadata: Dict[str, Any] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index: Dict[str, Any] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        index[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    if metadata is not None:
        index[METADATA_KEY] = metadata
    header = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8:
        raise CheckpointError(f"checkpoint truncated: {path}")
    (header_len,) = struct.unpack("<Q", blob[:8])
    try:
        index = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint index in {path}: {e}") from e

    metadata = index.pop(METADATA_KEY, {})
    data = memoryview(blob)[8 + header_len:]
    tensors = {}
    for name, entry in index.items():
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(data):
            raise CheckpointError(f"tensor {name} overruns the buffer section of {path}")
        tensors[name] = np.frombuffer(data[start:end], dtype=dtype).reshape(entry["shape"]).copy()
    return tensors, metadata
