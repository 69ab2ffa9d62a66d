"""Global retraining of a pruned model under a recipe.

A recipe names the trainable parameter subset (by group tag), an
optional adapter kind applied to every prunable linear layer, the
iteration budget, and the learning-rate grid.  Training runs AdamW with
gradient accumulation under a linear warmup/decay schedule; sparsity
masks are enforced after every step, and everything outside the
selected subset stays bitwise untouched.

``tune_lr`` sweeps the grid from identical pruned starting points and
keeps the run with the lowest final validation perplexity (ties go to
the smaller rate).  ``memory_audit`` reports the trainable fraction and
the optimizer float count a recipe implies without running anything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .adapters import ADAPTER_KINDS, MergeReport, attach, merge
from .corpus import sample_batch
from .errors import ConfigError, ContractError, NumericalError
from .model import GROUP_TAGS, MiniGPT, forward_loss
from .optim import AdamW, LrSchedule, lr_at
from .sparsity import SparsityMask, enforce_mask
from .tensor import Parameter

__all__ = [
    "RetrainRecipe",
    "RetrainResult",
    "TrajectoryPoint",
    "retrain",
    "tune_lr",
    "memory_audit",
    "MemoryAudit",
    "validation_windows",
    "windows_perplexity",
]

DEFAULT_LR_GRID = (5e-6, 1e-5, 5e-5, 1e-4, 5e-4)

_SUBSET_TAGS = tuple(t for t in GROUP_TAGS if t != "adapter")


@dataclass(frozen=True)
class RetrainRecipe:
    subset: frozenset = frozenset()
    adapter: Optional[str] = None
    adapter_rank: int = 16
    adapter_alpha: float = 32.0
    iters: int = 1000
    lr_grid: tuple = DEFAULT_LR_GRID
    batch_size: int = 2
    grad_accum: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subset", frozenset(self.subset))
        unknown = self.subset - set(_SUBSET_TAGS)
        if unknown:
            raise ConfigError(f"unknown subset tag(s): {sorted(unknown)}")
        if not self.subset and self.adapter is None:
            raise ConfigError("recipe must select a parameter subset or an adapter kind")
        if self.adapter is not None and self.adapter not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.adapter!r}")
        if self.iters <= 0:
            raise ConfigError("iters must be positive")
        if not self.lr_grid:
            raise ConfigError("lr_grid must be nonempty")
        if self.batch_size <= 0 or self.grad_accum <= 0:
            raise ConfigError("batch_size and grad_accum must be positive")


@dataclass
class TrajectoryPoint:
    iteration: int
    lr: float
    train_loss: float
    val_ppl: float


@dataclass
class RetrainResult:
    model: MiniGPT
    trajectory: List[TrajectoryPoint]
    merge_reports: Dict[str, MergeReport]
    unmerged_adapters: bool
    tokens_per_sec: float

    @property
    def final_val_ppl(self) -> float:
        return self.trajectory[-1].val_ppl


@dataclass
class MemoryAudit:
    trainable_entries: int
    total_entries: int
    optimizer_floats: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_entries / self.total_entries


def _adapter_entries(model: MiniGPT, rank: int) -> int:
    total = 0
    for name in model.prunable_layer_names:
        n, m = model.params[name].data.shape
        total += n * rank + rank * m
    return total


def memory_audit(model: MiniGPT, recipe: RetrainRecipe) -> MemoryAudit:
    """Trainable entries, fraction of the model, and optimizer floats."""
    trainable = sum(p.size for p in model.params.values() if p.tag in recipe.subset)
    if recipe.adapter is not None:
        trainable += _adapter_entries(model, recipe.adapter_rank)
    return MemoryAudit(
        trainable_entries=trainable,
        total_entries=model.total_entries(),
        optimizer_floats=2 * trainable,
    )


def _prepare(model: MiniGPT, masks: Optional[Dict[str, SparsityMask]], recipe: RetrainRecipe):
    """Apply masks, freeze/unfreeze, attach adapters; return trainables."""
    if masks:
        missing = [n for n in model.prunable_layer_names if n not in masks]
        if missing:
            raise ContractError(f"prunable layers without a mask: {missing[:3]}...")
        for name in model.prunable_layer_names:
            p = model.params[name]
            if p.mask is None:
                enforce_mask(p, masks[name])
    elif recipe.adapter in ("masked_lora", "lora_prune"):
        raise ContractError(f"adapter kind {recipe.adapter!r} requires masks")

    model.freeze_all()
    trainables: List[Parameter] = [p for p in model.params.values() if p.tag in recipe.subset]
    for p in trainables:
        p.requires_grad = True

    model.adapters = {}
    if recipe.adapter is not None:
        rng = np.random.default_rng(recipe.seed)
        for name in model.prunable_layer_names:
            mask = masks.get(name) if masks else None
            pair = attach(
                model.params[name],
                recipe.adapter,
                rank=recipe.adapter_rank,
                alpha=recipe.adapter_alpha,
                rng=rng,
                mask=mask if recipe.adapter != "lora" else None,
                owner=name,
            )
            model.adapters[name] = pair
            trainables.extend([pair.b, pair.a])
    return trainables


def validation_windows(val_split: np.ndarray, context: int, seed: int, n_sequences: int = 100) -> np.ndarray:
    """The fixed validation sample used throughout one retraining run."""
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(0x5EED))
    return sample_batch(val_split, n_sequences, context + 1, rng)


def windows_perplexity(model: MiniGPT, windows: np.ndarray) -> float:
    return float(np.exp(forward_loss(model, windows).item()))


def retrain(
    model: MiniGPT,
    masks: Optional[Dict[str, SparsityMask]],
    recipe: RetrainRecipe,
    train_split: np.ndarray,
    val_split: np.ndarray,
    peak_lr: float,
    merge_probes: int = 10,
) -> RetrainResult:
    """Run the recipe on ``model`` in place and return it merged.

    ``masks`` must cover every prunable layer (pass ``None`` for the
    dense-model control).  Validation perplexity is tracked on 100
    sequences sampled once from the validation split.  Adapters of
    every kind except plain lora are folded into the weights at the
    end, so downstream evaluation sees an ordinary sparse model; lora
    results stay reparametrized and are flagged.
    """
    trainables = _prepare(model, masks, recipe)
    opt = AdamW(trainables)
    schedule = LrSchedule(peak_lr, recipe.iters) if recipe.iters >= 2 else None
    rng = np.random.default_rng(recipe.seed)
    context = model.config.context_length
    val_windows = validation_windows(val_split, context, recipe.seed)
    every = max(1, recipe.iters // 20)
    inv_accum = 1.0 / recipe.grad_accum

    trajectory: List[TrajectoryPoint] = []
    train_time = 0.0
    for k in range(1, recipe.iters + 1):
        lr = lr_at(schedule, k) if schedule else peak_lr
        tick = time.perf_counter()
        opt.zero_grad()
        losses = []
        for _ in range(recipe.grad_accum):
            batch = sample_batch(train_split, recipe.batch_size, context + 1, rng)
            loss = forward_loss(model, batch)
            losses.append(loss.item())
            T.backward(T.mul(loss, inv_accum))
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise NumericalError(f"non-finite training loss at iteration {k} (lr {lr:g})")
        opt.step(lr)
        train_time += time.perf_counter() - tick
        if k % every == 0 and k != recipe.iters:
            trajectory.append(TrajectoryPoint(k, lr, train_loss, windows_perplexity(model, val_windows)))

    merge_reports: Dict[str, MergeReport] = {}
    unmerged = False
    for name, pair in list(model.adapters.items()):
        if pair.kind == "lora":
            unmerged = True
            continue
        merged, report = merge(pair, n_probes=merge_probes)
        model.params[name].data = merged.astype(np.float32)
        merge_reports[name] = report
        del model.adapters[name]

    final_ppl = windows_perplexity(model, val_windows)
    trajectory.append(TrajectoryPoint(recipe.iters, lr, train_loss, final_ppl))
    tokens = recipe.iters * recipe.grad_accum * recipe.batch_size * context
    return RetrainResult(
        model=model,
        trajectory=trajectory,
        merge_reports=merge_reports,
        unmerged_adapters=unmerged,
        tokens_per_sec=tokens / train_time if train_time > 0 else 0.0,
    )


def tune_lr(
    model: MiniGPT,
    masks: Optional[Dict[str, SparsityMask]],
    recipe: RetrainRecipe,
    train_split: np.ndarray,
    val_split: np.ndarray,
    lr_grid: Optional[Sequence[float]] = None,
) -> Tuple[float, RetrainResult, List[Tuple[float, Optional[float]]]]:
    """Retrain once per grid rate from identical pruned starting points.

    Returns ``(best_lr, best_result, report)`` where the report lists
    (lr, final validation perplexity or None if the run diverged).  The
    lowest perplexity wins; ties break toward the smaller rate.
    """
    grid = sorted(lr_grid if lr_grid is not None else recipe.lr_grid)
    report: List[Tuple[float, Optional[float]]] = []
    best: Optional[Tuple[float, RetrainResult]] = None
    for lr in grid:
        candidate = model.clone()
        try:
            result = retrain(candidate, masks, recipe, train_split, val_split, peak_lr=lr)
        except NumericalError:
            report.append((lr, None))
            continue
        ppl = result.final_val_ppl
        report.append((lr, ppl))
        if best is None or ppl < best[1].final_val_ppl:
            best = (lr, result)
    if best is None:
        outcomes = ", ".join(f"{lr:g}: diverged" for lr, _ in report)
        raise NumericalError(f"every learning rate diverged ({outcomes})")
    return best[0], best[1], report
