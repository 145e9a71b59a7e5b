"""Binary persistence for named parameter matrices.

File layout (little-endian, no padding or alignment):

    magic "CKI1" (4 bytes)
    format version          u16 = 1
    architecture-tag length u16, then UTF-8 bytes
    tensor count            u32
    per tensor:
        name length u16, then UTF-8 bytes
        ndim u8, then each dim as u64
        dtype u8 (0 = f32, 1 = f64)
        row-major payload

Storage may be f32, but loading always promotes to f64; the compute
path is fixed at 64-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor

MAGIC = b"CKI1"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: "<f4", DTYPE_F64: "<f8"}


class CheckpointError(Exception):
    """Base class for checkpoint persistence failures."""


class CheckpointFormatError(CheckpointError):
    """The bytes do not follow the checkpoint layout."""


class CheckpointTruncationError(CheckpointError):
    """The file ends before a declared payload does."""


@dataclass(frozen=True)
class ParameterSet:
    """Ordered, named dense parameter matrices of one model.

    Order is part of identity: two sets with the same name->matrix mapping
    but different iteration order are different sets. Every parameter is a
    non-empty 2-D matrix (store vectors as 1 x d).
    """

    architecture: str
    entries: tuple[tuple[str, Tensor], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((n, t) for n, t in self.entries))
        seen: set[str] = set()
        for name, tensor in self.entries:
            if not name:
                raise ValueError("parameter names must be non-empty")
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            if not isinstance(tensor, Tensor):
                raise TypeError(f"parameter {name!r} must be a Tensor")
            if len(tensor.shape) != 2:
                raise ValueError(f"parameter {name!r} must be a matrix, got shape {tensor.shape}")
            if tensor.size == 0:
                raise ValueError(f"parameter {name!r} is empty")
        if not self.entries:
            raise ValueError("a ParameterSet needs at least one parameter")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    def get(self, name: str) -> Tensor:
        for entry_name, tensor in self.entries:
            if entry_name == name:
                return tensor
        raise KeyError(name)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tensor.shape for name, tensor in self.entries}

    def items(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def parameter_set(architecture: str, pairs) -> ParameterSet:
    """Build a ParameterSet from (name, array-like) pairs."""
    return ParameterSet(architecture, tuple((n, t if isinstance(t, Tensor) else Tensor(t))
                                            for n, t in pairs))


def save(pset: ParameterSet, path, dtype: str = "f64") -> None:
    """Write a ParameterSet in the binary layout above.

    ``dtype`` selects the stored payload width; only "f64" round-trips
    bit-exactly.
    """
    if dtype not in ("f32", "f64"):
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    dtype_byte = DTYPE_F64 if dtype == "f64" else DTYPE_F32
    np_dtype = _DTYPES[dtype_byte]

    chunks: list[bytes] = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    tag = pset.architecture.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValueError("architecture tag too long")
    chunks.append(struct.pack("<H", len(tag)))
    chunks.append(tag)
    chunks.append(struct.pack("<I", len(pset)))
    for name, tensor in pset.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", len(tensor.shape)))
        for dim in tensor.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(struct.pack("<B", dtype_byte))
        chunks.append(np.ascontiguousarray(tensor.data).astype(np_dtype).tobytes())
    with open(path, "wb") as handle:
        handle.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self._blob = blob
        self._off = 0

    def take(self, n: int, what: str) -> bytes:
        if self._off + n > len(self._blob):
            raise CheckpointTruncationError(f"file truncated while reading {what}")
        chunk = self._blob[self._off:self._off + n]
        self._off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        (value,) = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return value

    @property
    def exhausted(self) -> bool:
        return self._off == len(self._blob)


def load(path) -> ParameterSet:
    """Read a checkpoint file, promoting stored values to f64."""
    with open(path, "rb") as handle:
        blob = handle.read()
    reader = _Reader(blob)

    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    version = reader.unpack("<H", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    tag_len = reader.unpack("<H", "architecture tag length")
    try:
        architecture = reader.take(tag_len, "architecture tag").decode("utf-8")
    except UnicodeDecodeError as err:
        raise CheckpointFormatError(f"{path}: architecture tag is not UTF-8") from err
    count = reader.unpack("<I", "tensor count")

    entries: list[tuple[str, Tensor]] = []
    names: set[str] = set()
    for index in range(count):
        name_len = reader.unpack("<H", f"name length of tensor {index}")
        try:
            name = reader.take(name_len, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointFormatError(f"{path}: tensor {index} name is not UTF-8") from err
        if not name:
            raise CheckpointFormatError(f"{path}: tensor {index} has an empty name")
        if name in names:
            raise CheckpointFormatError(f"{path}: duplicate parameter name {name!r}")
        names.add(name)
        ndim = reader.unpack("<B", f"ndim of {name!r}")
        if ndim not in (1, 2):
            raise CheckpointFormatError(
                f"{path}: {name!r} has ndim {ndim}; only vectors and matrices are supported")
        dims = tuple(reader.unpack("<Q", f"dim {d} of {name!r}") for d in range(ndim))
        if any(dim == 0 for dim in dims):
            raise CheckpointFormatError(f"{path}: {name!r} has a zero dimension")
        dtype_byte = reader.unpack("<B", f"dtype of {name!r}")
        if dtype_byte not in _DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype byte {dtype_byte} for {name!r}")
        np_dtype = np.dtype(_DTYPES[dtype_byte])
        n_elems = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(n_elems * np_dtype.itemsize, f"payload of {name!r}")
        values = np.frombuffer(payload, dtype=np_dtype).astype(np.float64).reshape(dims)
        if ndim == 1:
            values = values.reshape(1, -1)  # vectors are stored as 1 x d matrices
        try:
            entries.append((name, Tensor(values)))
        except NonFiniteError as err:
            raise CheckpointFormatError(f"{path}: {name!r} holds non-finite values") from err
    if not reader.exhausted:
        raise CheckpointFormatError(f"{path}: trailing bytes after the declared payload")
    try:
        return ParameterSet(architecture, tuple(entries))
    except ValueError as err:
        raise CheckpointFormatError(f"{path}: {err}") from err


def validate_compatible(sets) -> dict[str, tuple[int, ...]]:
    """Check that all sets share architecture, names, order, and shapes.

    Returns the shared name -> shape table. The check is order-sensitive:
    the same parameters in a different order are a mismatch.
    """
    sets = list(sets)
    if len(sets) < 2:
        raise ValueError("compatibility validation needs at least 2 parameter sets")
    ref = sets[0]
    ref_names = ref.names
    for k, other in enumerate(sets[1:], start=1):
        if other.architecture != ref.architecture:
            raise ValueError(
                f"architecture tag mismatch: set 0 is {ref.architecture!r}, "
                f"set {k} is {other.architecture!r}")
        other_names = other.names
        for pos in range(max(len(ref_names), len(other_names))):
            a = ref_names[pos] if pos < len(ref_names) else None
            b = other_names[pos] if pos < len(other_names) else None
            if a != b:
                offending = b if a is None else a
                raise ValueError(
                    f"parameter order mismatch at position {pos}: "
                    f"set 0 has {a!r}, set {k} has {b!r} (first offender {offending!r})")
        for name in ref_names:
            sa, sb = ref.get(name).shape, other.get(name).shape
            if sa != sb:
                raise ValueError(
                    f"shape mismatch for {name!r}: set 0 has {sa}, set {k} has {sb}")
    return ref.shapes()
