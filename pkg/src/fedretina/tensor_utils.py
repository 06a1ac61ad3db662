"""Utilities for named parameter collections."""
import hashlib
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from fedretina.errors import ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ParameterSet:
    """Ordered, named collection of tensors.

    This is the unit exchanged between institutions and the server. Order is
    canonical (layer index, then parameter role) and names are unique.
    """

    def __init__(self, entries: Sequence[Tuple[str, np.ndarray]]):
        names = [name for name, _ in entries]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate tensor names in {names}")
        self._entries: Tuple[Tuple[str, np.ndarray], ...] = tuple(
            (name, np.asarray(array)) for name, array in entries
        )
        for name, array in self._entries:
            if array.dtype not in SUPPORTED_DTYPES:
                raise ShapeError(f"tensor {name!r} has unsupported dtype {array.dtype}")

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self._entries]

    @property
    def arrays(self) -> List[np.ndarray]:
        return [array for _, array in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for entry_name, array in self._entries:
            if entry_name == name:
                return array
        raise KeyError(name)

    def __eq__(self, other) -> bool:
        """Bitwise equality: names, dtypes, shapes and raw bytes."""
        if not isinstance(other, ParameterSet) or len(self) != len(other):
            return False
        for (name_a, a), (name_b, b) in zip(self, other):
            if name_a != name_b or a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.tobytes() != b.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        shapes = ", ".join(f"{name}{list(array.shape)}" for name, array in self._entries)
        return f"ParameterSet({shapes})"

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self._entries)

    def num_elements(self) -> int:
        return int(sum(array.size for _, array in self._entries))

    def copy(self) -> "ParameterSet":
        return ParameterSet([(name, array.copy()) for name, array in self._entries])

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet([(name, array.astype(dtype)) for name, array in self._entries])

    def check_aligned(self, other: "ParameterSet", context: str = "parameter sets") -> None:
        """Raise ShapeError unless both sets have identical names and shapes."""
        if self.names != other.names:
            raise ShapeError(f"{context}: names differ ({self.names} vs {other.names})")
        for (name, a), (_, b) in zip(self, other):
            if a.shape != b.shape:
                raise ShapeError(f"{context}: tensor {name!r} shape {a.shape} vs {b.shape}")

    def checksum(self) -> str:
        """SHA-256 over names, dtypes, shapes and little-endian data."""
        digest = hashlib.sha256()
        for name, array in self._entries:
            digest.update(name.encode("utf-8"))
            digest.update(array.dtype.str.encode("ascii"))
            digest.update(np.asarray(array.shape, dtype="<u4").tobytes())
            digest.update(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
        return digest.hexdigest()

    def concat(self, other: "ParameterSet") -> "ParameterSet":
        return ParameterSet(list(self._entries) + list(other))

    def split(self, count: int) -> Tuple["ParameterSet", "ParameterSet"]:
        return ParameterSet(self._entries[:count]), ParameterSet(self._entries[count:])

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(array))) for _, array in self._entries)
