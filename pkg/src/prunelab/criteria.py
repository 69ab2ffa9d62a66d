"""Calibration-data-driven pruning criteria.

``capture_activations`` records the exact input matrix each prunable
linear layer sees during a forward pass over a calibration set.
``wanda_scores`` rescales weight magnitudes by the Euclidean norm of
the corresponding input feature and uses per-output-row comparison
groups.  ``sparsegpt_prune`` runs the column-blockwise optimal brain
surgeon procedure: score by squared weight over the squared diagonal of
the inverse-Hessian Cholesky factor, zero the selected entries, and
propagate compensating updates into the not-yet-processed columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DataError, DimensionError, NumericalError
from .model import MiniGPT
from .sparsity import (
    MaskPattern,
    SemiStructured,
    SparsityMask,
    Unstructured,
    build_mask,
    magnitude_scores,
)

__all__ = ["CalibrationSet", "capture_activations", "wanda_scores", "sparsegpt_prune"]


@dataclass
class CalibrationSet:
    """Token sequences used to capture layer inputs.

    The same set is reused for every criterion and for reconstruction
    within one experiment, since the random draw of calibration data
    shifts the quality of all downstream results.
    """

    sequences: np.ndarray  # [N, T] token matrix
    seed: int = 0
    captures: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences)
        if self.sequences.ndim != 2 or self.sequences.size == 0:
            raise DataError("calibration set needs a nonempty [N, T] token matrix")

    @property
    def n_positions(self) -> int:
        return int(self.sequences.size)


def capture_activations(
    model: MiniGPT,
    calib: CalibrationSet,
    layer_names: Optional[List[str]] = None,
    batch: int = 16,
) -> Dict[str, np.ndarray]:
    """Input matrices X (features x positions) per prunable linear layer."""
    names = list(layer_names) if layer_names is not None else list(model.prunable_layer_names)
    capture: Dict[str, list] = {name: [] for name in names}
    seqs = calib.sequences
    for start in range(0, seqs.shape[0], batch):
        model.forward(seqs[start : start + batch], capture=capture)
    out = {}
    for name in names:
        rows = np.concatenate(capture[name], axis=0)  # (positions, features)
        out[name] = np.ascontiguousarray(rows.T)
    calib.captures = out
    return out


def wanda_scores(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """|W_ij| scaled by the norm of input feature j over all calibration columns."""
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 2 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"weight {w.shape} and inputs {x.shape} disagree")
    # 64-bit accumulation keeps long rows from losing small contributions.
    xf = x.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", xf, xf))
    return np.abs(w).astype(np.float64) * norms[None, :]


def _select_prune(scores: np.ndarray, count: int) -> np.ndarray:
    """Boolean prune mask for the ``count`` lowest scores (ties keep lower flat index)."""
    keep_order = np.argsort(-scores, kind="stable")
    prune = np.zeros(scores.size, dtype=bool)
    if count > 0:
        prune[keep_order[scores.size - count :]] = True
    return prune


def _obs_pass(
    w: np.ndarray,
    u: np.ndarray,
    pattern: MaskPattern,
    blocksize: int,
    forced_keep: Optional[np.ndarray] = None,
):
    """One blockwise OBS sweep.

    ``u`` is the upper Cholesky factor of the (damped) inverse Hessian.
    Entries are scored by w^2 over the squared factor diagonal; the
    selected entries are zeroed column by column while the induced error
    is propagated into the not-yet-processed columns.  ``forced_keep``
    skips scoring and compensates a given mask instead.
    """
    n_rows, n_cols = w.shape
    wq = w.copy()

    starts = list(range(0, n_cols, blocksize))
    quotas = [0] * len(starts)
    if forced_keep is None and isinstance(pattern, Unstructured):
        # Per-block prune quotas summing to round(s * numel) exactly
        # (largest remainder first, earlier blocks win ties).
        total_zeros = int(round(pattern.sparsity * w.size))
        block_entries = [n_rows * (min(s + blocksize, n_cols) - s) for s in starts]
        exact = [total_zeros * be / w.size for be in block_entries]
        quotas = [int(q) for q in exact]
        rem = total_zeros - sum(quotas)
        order = sorted(range(len(starts)), key=lambda i: (-(exact[i] - quotas[i]), i))
        for i in order[:rem]:
            quotas[i] += 1

    mask_keep = np.ones_like(wq, dtype=bool)
    diag_u = np.diag(u)
    for bi, i1 in enumerate(starts):
        i2 = min(i1 + blocksize, n_cols)
        w1 = wq[:, i1:i2].copy()
        u1 = u[i1:i2, i1:i2]
        err = np.zeros_like(w1)
        d1 = diag_u[i1:i2]

        if forced_keep is not None:
            prune1 = ~forced_keep[:, i1:i2]
        elif isinstance(pattern, Unstructured):
            tmp = (w1 ** 2) / (d1[None, :] ** 2)
            prune1 = _select_prune(tmp.reshape(-1), quotas[bi]).reshape(w1.shape)
        else:
            prune1 = np.zeros_like(w1, dtype=bool)

        for j in range(i2 - i1):
            if forced_keep is None and isinstance(pattern, SemiStructured) and (i1 + j) % pattern.m == 0:
                grp = slice(j, j + pattern.m)
                tmp = (w1[:, grp] ** 2) / (d1[grp][None, :] ** 2)
                for r in range(n_rows):
                    prune1[r, grp] |= _select_prune(tmp[r], pattern.m - pattern.n)
            col = w1[:, j]
            q = col.copy()
            q[prune1[:, j]] = 0.0
            e = (col - q) / u1[j, j]
            w1[:, j] = q
            if j + 1 < w1.shape[1]:
                w1[:, j + 1 :] -= np.outer(e, u1[j, j + 1 :])
            err[:, j] = e

        wq[:, i1:i2] = w1
        mask_keep[:, i1:i2] = ~prune1
        if i2 < n_cols:
            wq[:, i2:] -= err @ u[i1:i2, i2:]

    wq[~mask_keep] = 0.0
    return mask_keep, wq


def sparsegpt_prune(
    w: np.ndarray,
    x: np.ndarray,
    pattern: MaskPattern,
    damp: float = 0.01,
    blocksize: int = 8,
    owner: str = "",
):
    """Column-blockwise OBS pruning with weight compensation.

    Returns ``(mask, compensated_weights)`` where the weights satisfy
    support(W') == support(mask).  ``damp`` is the fraction of the mean
    Hessian diagonal added for stability.

    The OBS result is guarded against the plain magnitude projection at
    the same pattern: in the rare draws where the damped sequential
    procedure lands above that baseline, the compensation is re-run on
    the magnitude mask, and if even that loses (damping artifact), the
    projection itself is returned.  The layer-wise objective therefore
    never exceeds the magnitude-no-update baseline.
    """
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 2 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"weight {w.shape} and inputs {x.shape} disagree")
    n_cols = w.shape[1]

    if isinstance(pattern, SemiStructured):
        if n_cols % pattern.m != 0:
            # Delegate the divisibility error to the mask builder.
            build_mask(np.abs(w), pattern)
        if blocksize % pattern.m != 0:
            blocksize = max(blocksize, pattern.m) // pattern.m * pattern.m

    xf = x.astype(np.float64)
    h = xf @ xf.T
    wf = w.astype(np.float64)
    dead = np.diag(h) == 0
    if dead.any():
        h[dead, dead] = 1.0
        wf = wf.copy()
        wf[:, dead] = 0.0
    h[np.arange(n_cols), np.arange(n_cols)] += damp * float(np.mean(np.diag(h)))
    try:
        hinv = np.linalg.inv(np.linalg.cholesky(h))
        hinv = hinv.T @ hinv  # H^-1 from the Cholesky factor
        u = np.linalg.cholesky(hinv, upper=True)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Hessian not positive definite ({e}); increase damp={damp}") from e

    def err_of(wq):
        d = (wf - wq) @ xf
        return float(np.einsum("ij,ij->", d, d))

    keep, wq = _obs_pass(wf, u, pattern, blocksize)
    mag_mask = build_mask(magnitude_scores(w), pattern, owner=owner)
    mag_keep = mag_mask.values.astype(bool)
    baseline = err_of(wf * mag_keep)
    if err_of(wq) > baseline:
        keep, wq = _obs_pass(wf, u, pattern, blocksize, forced_keep=mag_keep)
        if err_of(wq) > baseline:
            keep, wq = mag_keep, wf * mag_keep

    mask = SparsityMask(keep.astype(np.uint8), pattern, owner)
    return mask, wq.astype(w.dtype)
