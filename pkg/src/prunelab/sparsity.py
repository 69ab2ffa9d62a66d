"""Binary sparsity masks: construction, application, and enforcement.

Two pattern families are supported: unstructured masks that keep the
top-scoring fraction of a tensor, and N:M semi-structured masks that
keep exactly N entries in every group of M consecutive entries along
each row's input dimension.  Score ties are broken deterministically:
the entry with the lower flat index is kept first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ContractError, DimensionError, PatternError
from .tensor import Parameter

__all__ = [
    "Unstructured",
    "SemiStructured",
    "MaskPattern",
    "SparsityMask",
    "magnitude_scores",
    "build_mask",
    "apply_mask",
    "enforce_mask",
    "sparsity_of",
]


@dataclass(frozen=True)
class Unstructured:
    sparsity: float

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise PatternError(f"unstructured sparsity must lie in [0, 1), got {self.sparsity}")

    def __str__(self):
        return f"s={self.sparsity:g}"


@dataclass(frozen=True)
class SemiStructured:
    n: int
    m: int

    def __post_init__(self):
        if not 0 < self.n < self.m:
            raise PatternError(f"semi-structured pattern needs 0 < n < m, got {self.n}:{self.m}")

    def __str__(self):
        return f"{self.n}:{self.m}"


MaskPattern = Union[Unstructured, SemiStructured]


def parse_pattern(text: str) -> MaskPattern:
    """Parse "s=0.5" / "0.5" as unstructured or "2:4" as semi-structured."""
    text = text.strip()
    if ":" in text:
        n, m = text.split(":")
        return SemiStructured(int(n), int(m))
    if text.startswith("s="):
        text = text[2:]
    return Unstructured(float(text))


@dataclass
class SparsityMask:
    """A 0/1 mask matched to one weight tensor."""

    values: np.ndarray  # uint8, same shape as the owner weight
    pattern: MaskPattern
    owner: str = ""
    grouping: str = "tensor"  # "tensor" or "row" comparison groups (unstructured only)

    @property
    def shape(self):
        return self.values.shape

    def astype(self, dtype) -> np.ndarray:
        return self.values.astype(dtype)


def magnitude_scores(w: np.ndarray) -> np.ndarray:
    """Entrywise |w| for a 2-D weight."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise DimensionError(f"magnitude scores expect a 2-D weight, got shape {w.shape}")
    return np.abs(w)


def _top_keep(scores_flat: np.ndarray, keep: int) -> np.ndarray:
    """Boolean keep mask for the top ``keep`` scores, ties kept at lower flat index."""
    order = np.argsort(-scores_flat, kind="stable")
    mask = np.zeros(scores_flat.size, dtype=bool)
    mask[order[:keep]] = True
    return mask


def build_mask(scores: np.ndarray, pattern: MaskPattern, grouping: str = "tensor", owner: str = "") -> SparsityMask:
    """Keep the highest-scoring entries subject to ``pattern``.

    Unstructured masks zero exactly round(s * numel) entries; with
    ``grouping="row"`` the keep quota applies per output row instead
    (round(s * row length) zeros in every row).  Semi-structured masks
    keep the n largest scores in each group of m consecutive entries
    along the input dimension.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DimensionError(f"mask construction expects 2-D scores, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise ContractError("scores must be finite")

    n_rows, n_cols = scores.shape
    if isinstance(pattern, Unstructured):
        if grouping == "tensor":
            keep = scores.size - int(round(pattern.sparsity * scores.size))
            mask = _top_keep(scores.reshape(-1), keep).reshape(scores.shape)
        elif grouping == "row":
            keep = n_cols - int(round(pattern.sparsity * n_cols))
            mask = np.zeros_like(scores, dtype=bool)
            for i in range(n_rows):
                mask[i] = _top_keep(scores[i], keep)
        else:
            raise ContractError(f"unknown grouping {grouping!r}")
        return SparsityMask(mask.astype(np.uint8), pattern, owner, grouping)

    if n_cols % pattern.m != 0:
        raise PatternError(
            f"input dimension {n_cols} not divisible by group size m={pattern.m}"
        )
    groups = scores.reshape(n_rows, n_cols // pattern.m, pattern.m)
    # Keep the n largest per group; stable descending sort lets the lower
    # in-group index win ties.
    order = np.argsort(-groups, axis=2, kind="stable")
    mask = np.zeros_like(groups, dtype=bool)
    np.put_along_axis(mask, order[:, :, : pattern.n], True, axis=2)
    return SparsityMask(mask.reshape(scores.shape).astype(np.uint8), pattern, owner, "tensor")


def apply_mask(w: np.ndarray, mask: SparsityMask) -> np.ndarray:
    """Hadamard product of a weight with its mask."""
    w = np.asarray(w)
    if w.shape != mask.shape:
        raise DimensionError(f"weight shape {w.shape} != mask shape {mask.shape}")
    return w * mask.values.astype(w.dtype)


def enforce_mask(param: Parameter, mask: SparsityMask):
    """Register ``mask`` on ``param`` so every optimizer step re-applies it."""
    if param.data.shape != mask.shape:
        raise DimensionError(f"parameter shape {param.data.shape} != mask shape {mask.shape}")
    if param.mask is not None:
        raise ContractError("parameter already has a registered mask")
    param.mask = mask.values.astype(param.data.dtype)
    param.data *= param.mask


def sparsity_of(mask) -> float:
    """Fraction of zeros in a binary tensor."""
    values = mask.values if isinstance(mask, SparsityMask) else np.asarray(mask)
    if not np.isin(values, (0, 1)).all():
        raise ContractError("sparsity is defined for binary tensors only")
    return float((values == 0).sum() / values.size)
