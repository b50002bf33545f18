"""Immutable float32 tensor with shape metadata."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteValue


def first_nonfinite(arr: np.ndarray):
    """Return the flat index of the first NaN/Inf in ``arr`` or None."""
    bad = ~np.isfinite(arr.reshape(-1))
    if bad.any():
        return int(np.argmax(bad))
    return None


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense row-major float32 array.

    The backing array is made read-only so a ``Tensor`` can be shared between
    workers without copying.
    """

    data: np.ndarray
    name: str = ""

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        idx = first_nonfinite(arr)
        if idx is not None:
            raise NonFiniteValue(idx, float(arr.reshape(-1)[idx]))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __len__(self):
        return self.shape[0] if self.shape else 0

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape})"

    def equals(self, other: "Tensor") -> bool:
        """Bit-exact comparison of shape and payload."""
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()
