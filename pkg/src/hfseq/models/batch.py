from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DimensionError


@dataclass(frozen=True)
class Batch:
    """``n`` equal-length sequences, time-major.

    ``inputs`` is ``(T, n)`` symbol ids or ``(T, n, d)`` real features;
    ``targets`` is ``(T, n)`` ids (softmax mode) or ``(T, n, V)`` reals (MSE
    mode). ``mask`` optionally weights each ``(t, sequence)`` loss term; only
    the final step carries weight in the marked addition task.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.shape[:2] != self.targets.shape[:2]:
            raise DimensionError(
                f"inputs {self.inputs.shape[:2]} and targets {self.targets.shape[:2]} disagree")
        if self.mask is not None and self.mask.shape != self.inputs.shape[:2]:
            raise DimensionError(f"mask shape {self.mask.shape} != {self.inputs.shape[:2]}")

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    @property
    def symbolic(self) -> bool:
        return self.inputs.dtype.kind in "iu"

    @property
    def weight(self) -> float:
        """Normalizer for mean losses: the number of weighted loss terms."""
        if self.mask is None:
            return float(self.T * self.n)
        return float(self.mask.sum())

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.inputs[:, idx], self.targets[:, idx],
                     None if self.mask is None else self.mask[:, idx])

    def shards(self, k: int) -> list["Batch"]:
        """Split sequences into ``k`` contiguous groups (fewer if ``n < k``)."""
        k = max(1, min(k, self.n))
        return [self.subset(idx) for idx in np.array_split(np.arange(self.n), k)]
