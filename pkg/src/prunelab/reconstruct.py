"""Memory-light layer-wise reconstruction of pruned weights.

Each pruned layer is refit to reproduce the original layer's outputs on
captured calibration inputs: minimize ||W X - (M o What) X||_F^2 over
the reconstructed weights.  The residual only depends on D = W - M o
What through D X, so the optimizer works with the precomputed Gram
matrix H = X X^T (an algebraically identical form of the same
objective that avoids touching the wide X every step).  Reported
objective values always come from the literal form, accumulated in
64-bit.

``lstsq_oracle`` solves the exact minimizer row by row via damped
normal equations; it exists to verify the iterative path and shares no
code with it.

``sequential_reconstruct`` walks transformer blocks in order.  Inputs
are captured from the current, partially reconstructed model; the
regression target for every layer uses that layer's original dense
weights on those same inputs.  Optimizer state never exceeds one
layer's trainable entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericalError
from .model import MiniGPT
from .optim import AdamW, LrSchedule, lr_at
from .criteria import CalibrationSet, capture_activations, sparsegpt_prune, wanda_scores
from .sparsity import MaskPattern, SparsityMask, Unstructured, build_mask, magnitude_scores
from .tensor import Parameter, Tensor

__all__ = [
    "ReconstructionProblem",
    "objective",
    "objective_node",
    "lstsq_oracle",
    "reconstruct_layer",
    "sequential_reconstruct",
    "RECONSTRUCT_LR_GRID",
]

# Reconstruction learning rates; the retraining grid shifted one decade
# up, since adapter/weight deltas here are small fractions of weight
# magnitudes reachable within a few hundred steps.
RECONSTRUCT_LR_GRID = (5e-5, 1e-4, 5e-4, 1e-3, 5e-3)


@dataclass
class ReconstructionProblem:
    """One layer's reconstruction instance.

    The target ``y = w @ x`` is computed once from the original weights
    and cached; it is the fixed regression target no matter how the
    reconstruction is parametrized or initialized.
    """

    w: np.ndarray          # original (n, m) weights, float64
    mask: SparsityMask     # binary (n, m)
    x: np.ndarray          # captured inputs (m, S), float64
    y: np.ndarray = field(init=False)
    gram: np.ndarray = field(init=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.w.ndim != 2 or self.x.ndim != 2 or self.w.shape[1] != self.x.shape[0]:
            raise DimensionError(f"weights {self.w.shape} and inputs {self.x.shape} disagree")
        if self.mask.shape != self.w.shape:
            raise DimensionError(f"mask {self.mask.shape} does not match weights {self.w.shape}")
        self.y = self.w @ self.x
        self.gram = self.x @ self.x.T


def objective(problem: ReconstructionProblem, w_hat: np.ndarray) -> float:
    """Squared Frobenius reconstruction error of ``M o w_hat``."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w_hat.shape != problem.w.shape:
        raise DimensionError(f"candidate shape {w_hat.shape} != {problem.w.shape}")
    resid = problem.y - (problem.mask.values * w_hat) @ problem.x
    return float(np.einsum("ij,ij->", resid, resid))


def objective_node(problem: ReconstructionProblem, w_hat: Tensor, use_gram: bool = False) -> Tensor:
    """The reconstruction objective as a differentiable graph node."""
    mask = Tensor(problem.mask.values.astype(np.float64))
    d = T.sub(Tensor(problem.w), T.mul(mask, w_hat))
    if use_gram:
        return T.tsum(T.mul(T.matmul(d, Tensor(problem.gram)), d))
    r = T.matmul(d, Tensor(problem.x))
    return T.tsum(T.mul(r, r))


def lstsq_oracle(problem: ReconstructionProblem, damp: float = 1e-8):
    """Exact minimizer of the reconstruction objective, row by row.

    The objective separates over output rows; row i's kept entries
    solve damped normal equations over the kept input features.
    Rank-deficient rows fall back to the minimum-norm solution and are
    flagged.  Returns ``(w_star, optimal_objective, flagged_rows)``.
    """
    n, m = problem.w.shape
    keep = problem.mask.values.astype(bool)
    gram_full = problem.gram
    rhs_full = problem.x @ problem.y.T  # (m, n)
    w_star = np.zeros((n, m), dtype=np.float64)
    flagged: List[int] = []
    for i in range(n):
        cols = np.flatnonzero(keep[i])
        if cols.size == 0:
            continue
        g = gram_full[np.ix_(cols, cols)]
        g = g + damp * float(np.mean(np.diag(g))) * np.eye(cols.size)
        b = rhs_full[cols, i]
        try:
            sol = np.linalg.solve(g, b)
            if not np.isfinite(sol).all():
                raise np.linalg.LinAlgError("non-finite solution")
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(g, b, rcond=None)[0]
            flagged.append(i)
        w_star[i, cols] = sol
    return w_star, objective(problem, w_star), flagged


@dataclass
class LayerReconstruction:
    w_hat: np.ndarray
    obj_initial: float
    obj_final: float
    steps: int
    lr: float
    optimizer_floats: int


def reconstruct_layer(
    problem: ReconstructionProblem,
    method: str = "direct",
    steps: int = 500,
    lr: float = 1e-3,
    rank: int = 16,
    alpha: float = 32.0,
    init: Optional[np.ndarray] = None,
    seed: int = 0,
) -> LayerReconstruction:
    """AdamW descent on the reconstruction objective for one layer.

    ``direct`` optimizes the kept entries themselves; ``masked_lora``
    reparametrizes the update as (alpha/rank) * (M o BA) around the
    starting weights and optimizes only B and A.  ``init`` overrides
    the starting point (used to refine compensated weights).  The best
    iterate seen is returned, so the final objective never exceeds the
    initial one.
    """
    if steps <= 0:
        raise ContractError("reconstruct_layer needs steps > 0")
    if method not in ("direct", "masked_lora"):
        raise ContractError(f"unknown reconstruction method {method!r}")
    base = problem.w if init is None else np.asarray(init, dtype=np.float64)
    if base.shape != problem.w.shape:
        raise DimensionError(f"init shape {base.shape} != {problem.w.shape}")
    mvals = problem.mask.values.astype(np.float64)
    n, m = problem.w.shape

    if method == "direct":
        w_hat = Parameter(mvals * base, "linear-weight", trainable=True, dtype=np.float64)
        trainables = [w_hat]

        def current() -> np.ndarray:
            return mvals * w_hat.data

        def loss_node() -> Tensor:
            return objective_node(problem, w_hat, use_gram=True)

    else:
        rng = np.random.default_rng(seed)
        scale = alpha / rank
        b = Parameter(np.zeros((n, rank)), "adapter", trainable=True, dtype=np.float64)
        a = Parameter(rng.normal(0.0, 0.02, size=(rank, m)), "adapter", trainable=True, dtype=np.float64)
        trainables = [b, a]
        # D = (W - M o base) - scale * M o BA, so precompute the constant part.
        d0 = Tensor(problem.w - mvals * base)
        mask_t = Tensor(mvals)
        gram_t = Tensor(problem.gram)

        def current() -> np.ndarray:
            return mvals * (base + scale * (b.data @ a.data))

        def loss_node() -> Tensor:
            delta = T.mul(mask_t, T.mul(T.matmul(b, a), scale))
            d = T.sub(d0, delta)
            return T.tsum(T.mul(T.matmul(d, gram_t), d))

    opt = AdamW(trainables)
    schedule = LrSchedule(lr, steps) if steps >= 2 else None
    best_obj = math.inf
    best = [t.data.copy() for t in trainables]

    def consider(value: float):
        nonlocal best_obj, best
        if value < best_obj:
            best_obj = value
            best = [t.data.copy() for t in trainables]

    for k in range(1, steps + 1):
        opt.zero_grad()
        loss = loss_node()
        if not np.isfinite(loss.data):
            raise NumericalError(f"reconstruction objective became non-finite at step {k}")
        consider(loss.item())
        T.backward(loss)
        opt.step(lr_at(schedule, k) if schedule else lr)
    consider(_gram_value(problem, current()))

    for t, data in zip(trainables, best):
        t.data = data
    w_final = current()
    w_final[mvals == 0] = 0.0
    obj_initial = objective(problem, base)
    obj_final = objective(problem, w_final)
    if obj_final > obj_initial:
        # Gram-vs-literal rounding can invert a tie; keep the start.
        w_final = mvals * base
        obj_final = obj_initial
    return LayerReconstruction(
        w_hat=w_final,
        obj_initial=obj_initial,
        obj_final=obj_final,
        steps=steps,
        lr=lr,
        optimizer_floats=opt.state_float_count(),
    )


def _gram_value(problem: ReconstructionProblem, w_hat: np.ndarray) -> float:
    d = problem.w - problem.mask.values * w_hat
    return float(np.einsum("ij,ij->", d @ problem.gram, d))


@dataclass
class BlockLayerLog:
    layer: str
    criterion: str
    steps: int
    lr: float
    obj_initial: float
    obj_final: float
    obj_oracle: float
    optimizer_floats: int


def sequential_reconstruct(
    model: MiniGPT,
    calib: CalibrationSet,
    criterion: str = "magnitude",
    pattern: Optional[MaskPattern] = None,
    method: str = "masked_lora",
    steps: int = 500,
    lr_grid: Sequence[float] = RECONSTRUCT_LR_GRID,
    rank: int = 16,
    alpha: float = 32.0,
    seed: int = 0,
    damp: float = 0.01,
    with_oracle: bool = True,
) -> Tuple[Dict[str, SparsityMask], List[BlockLayerLog]]:
    """Prune and reconstruct every block's linear layers, in block order.

    The model is modified in place.  For each block, calibration inputs
    are captured once from the current model (earlier blocks already
    reconstructed), then every linear layer of the block is masked by
    ``criterion`` and refit against its original dense outputs.  With
    ``criterion="sparsegpt"`` the OBS compensation runs first and the
    reconstruction refines it.  ``steps=0`` skips refitting, leaving
    the criterion-pruned weights.

    Returns the masks and one log row per layer.
    """
    if criterion not in ("magnitude", "wanda", "sparsegpt"):
        raise ContractError(f"unknown criterion {criterion!r}")
    if pattern is None:
        raise ContractError("a sparsity pattern is required")
    model.freeze_all()
    masks: Dict[str, SparsityMask] = {}
    logs: List[BlockLayerLog] = []
    names_by_block: Dict[int, List[str]] = {}
    for name in model.prunable_layer_names:
        names_by_block.setdefault(model.block_of[name], []).append(name)

    for block in sorted(names_by_block):
        layer_names = names_by_block[block]
        captures = capture_activations(model, calib, layer_names=layer_names)
        for li, name in enumerate(layer_names):
            weight = model.params[name]
            w_dense = weight.data.astype(np.float64)
            x = captures[name].astype(np.float64)

            if criterion == "magnitude":
                mask = build_mask(magnitude_scores(w_dense), pattern, owner=name)
                start = None
            elif criterion == "wanda":
                grouping = "row" if isinstance(pattern, Unstructured) else "tensor"
                mask = build_mask(wanda_scores(w_dense, x), pattern, grouping=grouping, owner=name)
                start = None
            else:
                mask, w_comp = sparsegpt_prune(w_dense, x, pattern, damp=damp, owner=name)
                start = w_comp.astype(np.float64)

            problem = ReconstructionProblem(w_dense, mask, x)
            base = start if start is not None else w_dense
            if steps > 0:
                best: Optional[LayerReconstruction] = None
                for lr in lr_grid:
                    rec = reconstruct_layer(
                        problem,
                        method=method,
                        steps=steps,
                        lr=lr,
                        rank=rank,
                        alpha=alpha,
                        init=base,
                        seed=seed + 7919 * li + block,
                    )
                    if best is None or rec.obj_final < best.obj_final:
                        best = rec
                w_new = best.w_hat
                obj_init, obj_fin, used_lr = best.obj_initial, best.obj_final, best.lr
                opt_floats = best.optimizer_floats
            else:
                w_new = problem.mask.values * base
                obj_init = obj_fin = objective(problem, base)
                used_lr = 0.0
                opt_floats = 0

            weight.data = w_new.astype(np.float32)
            masks[name] = mask
            oracle_obj = lstsq_oracle(problem)[1] if with_oracle else float("nan")
            logs.append(
                BlockLayerLog(name, criterion, steps, used_lr, obj_init, obj_fin, oracle_obj, opt_floats)
            )
    return masks, logs
