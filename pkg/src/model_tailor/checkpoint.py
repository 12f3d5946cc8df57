"""Bit-exact container for weights, calibration records, and task patches.

File layout (the ``.mtw`` compatibility contract, covered by golden tests):

    magic "MTWT" (4 bytes)
    format version, 4-byte little-endian unsigned
    header length, 8-byte little-endian unsigned
    UTF-8 JSON header: {"crc": ..., "metadata": {...}, "tensors": {...}}
      with keys sorted and no whitespace; "crc" is the CRC-32 of the header
      serialized without the crc field, so any single-byte header corruption
      is caught even when it still parses as JSON
    tensor payloads, little-endian, in header (name) order, each starting on
      a 64-byte boundary with zero padding in the gaps

Offsets are stored explicitly; readers never infer layout. Tensors are held
in memory as float64 regardless of the declared dtype; ``f32`` sources are
upcast on load and downcast again on save, which round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateNameError,
    HeaderError,
    MagicError,
    OffsetError,
    SizeOverflowError,
    TruncationError,
    ValidationError,
    VersionError,
)

MAGIC = b"MTWT"
FORMAT_VERSION = 1
ALIGNMENT = 64

_DTYPE_WIDTH = {"f32": 4, "f64": 8}
_DTYPE_NP = {"f32": "<f4", "f64": "<f8"}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


@dataclass
class Checkpoint:
    """Named float64 tensors plus a string metadata map.

    Tensors and metadata are normalized to sorted-key order on construction so
    that semantically equal checkpoints serialize to byte-identical files.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    dtypes: dict[str, str] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        norm = {}
        for name in sorted(self.tensors):
            if not isinstance(name, str) or not name:
                raise ValidationError(f"bad tensor name {name!r}")
            norm[name] = np.ascontiguousarray(np.asarray(self.tensors[name], dtype=np.float64))
        self.tensors = norm
        for name, tag in self.dtypes.items():
            if tag not in _DTYPE_WIDTH:
                raise ValidationError(f"unsupported dtype {tag!r} for tensor {name!r}")
        self.dtypes = {name: self.dtypes.get(name, "f64") for name in self.tensors}
        meta = {}
        for key in sorted(self.metadata):
            val = self.metadata[key]
            if not isinstance(key, str) or not isinstance(val, str):
                raise ValidationError("metadata must map strings to strings")
            meta[key] = val
        self.metadata = meta

    def dtype_of(self, name: str) -> str:
        return self.dtypes[name]

    def with_metadata(self, **updates: str) -> "Checkpoint":
        meta = dict(self.metadata)
        meta.update(updates)
        return Checkpoint(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            metadata=meta,
            dtypes=dict(self.dtypes),
        )

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            metadata=dict(self.metadata),
            dtypes=dict(self.dtypes),
        )

    def same_tensors(self, other: "Checkpoint") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            a.shape == other.tensors[k].shape
            and a.tobytes() == other.tensors[k].tobytes()
            for k, a in self.tensors.items()
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and self.dtypes == other.dtypes
            and self.same_tensors(other)
        )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sink = io.BytesIO()
    write_checkpoint(ckpt, sink)
    return sink.getvalue()


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()


def write_checkpoint(ckpt: Checkpoint, sink) -> int:
    """Serialize to a binary stream; returns the number of bytes written."""
    entries = {}
    payloads = []
    for name, arr in ckpt.tensors.items():
        tag = ckpt.dtypes[name]
        raw = arr.astype(_DTYPE_NP[tag]).tobytes(order="C")
        expected = int(np.prod(arr.shape, dtype=np.int64)) * _DTYPE_WIDTH[tag]
        if len(raw) != expected:
            raise SizeOverflowError(f"tensor {name!r}: declared {expected} bytes, got {len(raw)}")
        entries[name] = {"dtype": tag, "shape": list(arr.shape)}
        payloads.append((name, raw))

    # Offsets depend on the header length, which depends on the offsets'
    # digit counts; iterate until the layout is stable (two passes suffice
    # in practice, the loop guards pathological digit-boundary cases).
    offsets = {name: 0 for name, _ in payloads}
    while True:
        for name, entry in entries.items():
            entry["offset"] = offsets[name]
        core = {"metadata": ckpt.metadata, "tensors": entries}
        crc = zlib.crc32(_canonical_json(core))
        header = _canonical_json({"crc": crc, "metadata": ckpt.metadata, "tensors": entries})
        pos = _align(16 + len(header))
        new_offsets = {}
        end = 16 + len(header)
        for name, raw in payloads:
            new_offsets[name] = pos
            end = pos + len(raw)
            pos = _align(end)
        if new_offsets == offsets:
            # the file ends at the last payload byte; no trailing padding
            total = end
            break
        offsets = new_offsets

    blob = bytearray(total)
    blob[0:4] = MAGIC
    blob[4:8] = ckpt.format_version.to_bytes(4, "little")
    blob[8:16] = len(header).to_bytes(8, "little")
    blob[16 : 16 + len(header)] = header
    for name, raw in payloads:
        off = offsets[name]
        blob[off : off + len(raw)] = raw
    sink.write(bytes(blob))
    return len(blob)


def _parse_header(data: bytes, length: int) -> dict:
    def no_duplicates(pairs):
        out = {}
        for key, val in pairs:
            if key in out:
                raise DuplicateNameError(f"duplicate header key {key!r}")
            out[key] = val
        return out

    try:
        header = json.loads(data[16 : 16 + length].decode("utf-8"), object_pairs_hook=no_duplicates)
    except DuplicateNameError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    return header


def read_checkpoint(source) -> Checkpoint:
    """Parse a checkpoint from a binary stream or bytes; fully validated."""
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    data = bytes(data)
    if len(data) < 16:
        raise TruncationError(f"file is {len(data)} bytes, shorter than the 16-byte prefix")
    if data[0:4] != MAGIC:
        raise MagicError(f"bad magic {data[0:4]!r}")
    version = int.from_bytes(data[4:8], "little")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")
    header_len = int.from_bytes(data[8:16], "little")
    if 16 + header_len > len(data):
        raise TruncationError("header extends past end of file")

    header = _parse_header(data, header_len)
    if set(header) != {"crc", "metadata", "tensors"}:
        raise HeaderError(f"unexpected header keys {sorted(header)}")
    crc = header["crc"]
    core = {"metadata": header["metadata"], "tensors": header["tensors"]}
    if not isinstance(crc, int) or zlib.crc32(_canonical_json(core)) != crc:
        raise HeaderError("header checksum mismatch")
    # Canonical form: the stored bytes must match our own serialization.
    if _canonical_json(header) != data[16 : 16 + header_len]:
        raise HeaderError("header is not in canonical form")

    metadata = header["metadata"]
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise HeaderError("metadata must map strings to strings")

    entries = header["tensors"]
    if not isinstance(entries, dict):
        raise HeaderError("tensor table must be an object")
    names = list(entries)
    if names != sorted(names):
        raise HeaderError("tensor names are not sorted")

    payload_start = _align(16 + header_len)
    tensors: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    prev_end = payload_start
    for name in names:
        entry = entries[name]
        if not isinstance(entry, dict) or set(entry) != {"dtype", "offset", "shape"}:
            raise HeaderError(f"tensor {name!r}: malformed entry")
        tag = entry["dtype"]
        if tag not in _DTYPE_WIDTH:
            raise HeaderError(f"tensor {name!r}: unknown dtype {tag!r}")
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise HeaderError(f"tensor {name!r}: bad shape {shape!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE_WIDTH[tag]
        if nbytes < 0 or nbytes > len(data):
            raise SizeOverflowError(f"tensor {name!r}: declared size {nbytes} is impossible")
        offset = entry["offset"]
        if not isinstance(offset, int) or offset % ALIGNMENT != 0 or offset < payload_start:
            raise OffsetError(f"tensor {name!r}: offset {offset!r} is misaligned or inside the header")
        if offset < prev_end:
            raise OffsetError(f"tensor {name!r}: payload overlaps the previous tensor")
        if offset + nbytes > len(data):
            raise TruncationError(f"tensor {name!r}: payload is truncated")
        raw = data[offset : offset + nbytes]
        arr = np.frombuffer(raw, dtype=_DTYPE_NP[tag]).astype(np.float64).reshape(shape)
        tensors[name] = arr
        dtypes[name] = tag
        prev_end = _align(offset + nbytes)

    return Checkpoint(tensors=tensors, metadata=metadata, dtypes=dtypes)


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    with open(path, "wb") as fh:
        return write_checkpoint(ckpt, fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


@dataclass
class PatchLayer:
    """Sparse per-layer patch: flat row-major indices with aligned values."""

    shape: tuple[int, int]
    indices: np.ndarray
    decorator: np.ndarray
    sft_values: np.ndarray

    def __post_init__(self):
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.decorator = np.asarray(self.decorator, dtype=np.float64)
        self.sft_values = np.asarray(self.sft_values, dtype=np.float64)
        if self.indices.ndim != 1 or self.decorator.ndim != 1 or self.sft_values.ndim != 1:
            raise ValidationError("patch layer arrays must be 1-D")
        if not (len(self.indices) == len(self.decorator) == len(self.sft_values)):
            raise ValidationError(
                f"misaligned patch arrays: {len(self.indices)} indices, "
                f"{len(self.decorator)} decorator values, {len(self.sft_values)} weights"
            )
        if len(self.indices) and (np.any(np.diff(self.indices) <= 0)):
            raise ValidationError("patch indices must be strictly increasing")
        size = self.shape[0] * self.shape[1]
        if len(self.indices) and (self.indices[0] < 0 or self.indices[-1] >= size):
            raise ValidationError(f"patch indices out of range for shape {self.shape}")

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        out[self.indices] = True
        return out.reshape(self.shape)


@dataclass
class TaskPatch:
    """Everything needed to re-apply one task's fusion onto its parent model."""

    task_id: str
    layers: dict[str, PatchLayer]
    config: dict
    pre_hash: str

    def __post_init__(self):
        self.layers = {name: self.layers[name] for name in sorted(self.layers)}


def write_task_patch(patch: TaskPatch, sink) -> int:
    tensors = {}
    for name, layer in patch.layers.items():
        tensors[f"layer/{name}/indices"] = layer.indices.astype(np.float64)
        tensors[f"layer/{name}/decorator"] = layer.decorator
        tensors[f"layer/{name}/sft"] = layer.sft_values
        tensors[f"layer/{name}/shape"] = np.asarray(layer.shape, dtype=np.float64)
    container = Checkpoint(
        tensors=tensors,
        metadata={
            "kind": "task_patch",
            "task_id": patch.task_id,
            "pre_hash": patch.pre_hash,
            "config": _canonical_json(patch.config).decode("utf-8"),
        },
    )
    return write_checkpoint(container, sink)


def read_task_patch(source) -> TaskPatch:
    container = read_checkpoint(source)
    if container.metadata.get("kind") != "task_patch":
        raise ValidationError("container does not hold a task patch")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in container.tensors.items():
        if not name.startswith("layer/"):
            raise ValidationError(f"unexpected tensor {name!r} in task patch")
        layer, part = name[len("layer/") :].rsplit("/", 1)
        groups.setdefault(layer, {})[part] = arr
    layers = {}
    for layer, parts in groups.items():
        if set(parts) != {"indices", "decorator", "sft", "shape"}:
            raise ValidationError(f"layer {layer!r}: incomplete patch entry")
        shape = parts["shape"]
        if shape.shape != (2,):
            raise ValidationError(f"layer {layer!r}: bad shape record")
        layers[layer] = PatchLayer(
            shape=(int(shape[0]), int(shape[1])),
            indices=parts["indices"].astype(np.int64),
            decorator=parts["decorator"],
            sft_values=parts["sft"],
        )
    try:
        config = json.loads(container.metadata.get("config", "{}"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"task patch config snapshot is not valid JSON: {exc}") from exc
    return TaskPatch(
        task_id=container.metadata.get("task_id", ""),
        layers=layers,
        config=config,
        pre_hash=container.metadata.get("pre_hash", ""),
    )


def save_task_patch(patch: TaskPatch, path) -> int:
    with open(path, "wb") as fh:
        return write_task_patch(patch, fh)


def load_task_patch(path) -> TaskPatch:
    with open(path, "rb") as fh:
        return read_task_patch(fh)
