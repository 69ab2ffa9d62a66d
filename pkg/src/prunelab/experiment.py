"""Experiment grids: pretrain, prune, retrain/reconstruct, evaluate.

An :class:`ExperimentConfig` (JSON on disk, unknown keys rejected)
declares a grid over sparsity patterns, pruning criteria, methods, and
seeds.  ``run_grid`` executes every cell against one dense checkpoint:
prune, then retrain or reconstruct per the method, then score test
perplexity.  Learning rates are tuned on the first seed of each cell
and reused for the remaining seeds.  Failed cells are recorded and the
grid continues.  Set the ``PRUNELAB_WORKERS`` environment variable to
run cells in parallel processes.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusSplits, ingest_corpus, sample_batch
from .criteria import CalibrationSet
from .errors import ConfigError, ContractError
from .model import MiniGPT, MiniGPTConfig, forward_loss, init_model, perplexity
from .optim import AdamW, LrSchedule, lr_at
from .reconstruct import sequential_reconstruct
from .report import ExperimentReport, RunRecord, write_layer_log, write_trajectory
from .retrain import MemoryAudit, RetrainRecipe, memory_audit, retrain, tune_lr
from .sparsity import MaskPattern, SemiStructured, SparsityMask, Unstructured, build_mask, magnitude_scores, parse_pattern

__all__ = [
    "ExperimentConfig",
    "run_grid",
    "pretrain_dense",
    "prune_model",
    "bench_throughput",
    "resolve_method",
    "ablation_methods",
]

WORKERS_ENV = "PRUNELAB_WORKERS"

SUBSET_METHODS = {
    "none": frozenset(),
    "bias": frozenset({"bias"}),
    "ln": frozenset({"ln"}),
    "bias+ln": frozenset({"bias", "ln"}),
    "head": frozenset({"head"}),
    "embedding": frozenset({"embedding"}),
    "full-ft": frozenset({"bias", "ln", "head", "embedding", "linear-weight"}),
}
ADAPTER_METHODS = {
    "lora": "lora",
    "lora-prune": "lora_prune",
    "mult-lora": "mult_lora",
    "masked-lora": "masked_lora",
}
ABLATION_GROUPS = ("bias", "ln", "head", "embedding", "masked-lora")


def resolve_method(name: str) -> Tuple[frozenset, Optional[str]]:
    """Map a method name to (subset tags, adapter kind).

    Adapter methods follow the retraining recipe that also trains
    biases and LayerNorm parameters.  Ablation combos written as
    ``abl:bias+masked-lora`` toggle exactly the named groups.
    """
    if name in SUBSET_METHODS:
        return SUBSET_METHODS[name], None
    if name in ADAPTER_METHODS:
        return frozenset({"bias", "ln"}), ADAPTER_METHODS[name]
    if name.startswith("abl:"):
        parts = name[4:].split("+")
        bad = [p for p in parts if p not in ABLATION_GROUPS]
        if bad:
            raise ConfigError(f"unknown ablation group(s) {bad} in {name!r}")
        adapter = "masked_lora" if "masked-lora" in parts else None
        subset = frozenset(p for p in parts if p != "masked-lora")
        return subset, adapter
    raise ConfigError(f"unknown method {name!r}")


def ablation_methods() -> List[str]:
    """The 31 nonempty combinations of the ablation parameter groups."""
    names = []
    for r in range(1, len(ABLATION_GROUPS) + 1):
        for combo in itertools.combinations(ABLATION_GROUPS, r):
            names.append("abl:" + "+".join(combo))
    return names


@dataclass
class ExperimentConfig:
    corpus: str
    checkpoint: str
    out_dir: str = "results"
    model: MiniGPTConfig = field(default_factory=MiniGPTConfig)
    pretrain_steps: int = 20000
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    sparsities: Tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    patterns: Tuple[str, ...] = ("unstructured", "2:4", "4:8")
    criteria: Tuple[str, ...] = ("magnitude",)
    mode: str = "retrain"
    methods: Tuple[str, ...] = ("none", "bias+ln", "masked-lora")
    ablation: bool = False
    iters: int = 1000
    lr_grid: Tuple[float, ...] = (5e-6, 1e-5, 5e-5, 1e-4, 5e-4)
    batch_size: int = 2
    grad_accum: int = 4
    adapter_rank: int = 16
    adapter_alpha: float = 32.0
    reconstruct_steps: int = 500
    calib_sequences: int = 128
    seeds: Tuple[int, ...] = (0, 1, 2)
    save_checkpoints: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = MiniGPTConfig(**self.model)
        if self.mode not in ("retrain", "reconstruct"):
            raise ConfigError(f"mode must be retrain or reconstruct, got {self.mode!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for c in self.criteria:
            if c not in ("magnitude", "wanda", "sparsegpt"):
                raise ConfigError(f"unknown criterion {c!r}")
        if self.mode == "reconstruct":
            bad = [m for m in self.methods if m not in ("none", "masked-lora", "direct")]
            if bad:
                raise ConfigError(f"reconstruct mode supports none/masked-lora/direct, got {bad}")
        else:
            for m in self.methods:
                resolve_method(m)  # validates
        for p in self.patterns:
            parse_pattern(p if p != "unstructured" else "0.5")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        if "model" in raw:
            model_known = {f.name for f in dataclasses.fields(MiniGPTConfig)}
            bad = set(raw["model"]) - model_known
            if bad:
                raise ConfigError(f"unknown model config key(s): {sorted(bad)}")
        for key in ("sparsities", "patterns", "criteria", "methods", "lr_grid", "seeds"):
            if key in raw:
                raw[key] = tuple(raw[key])
        cfg = cls(**raw)
        if not Path(cfg.corpus).exists():
            raise ConfigError(f"corpus file {cfg.corpus} does not exist")
        if not Path(cfg.checkpoint).exists() and cfg.pretrain_steps <= 0:
            raise ConfigError(f"checkpoint {cfg.checkpoint} missing and no pretrain budget set")
        return cfg


def pretrain_dense(
    config: MiniGPTConfig,
    train_split: np.ndarray,
    steps: int,
    batch_size: int = 8,
    peak_lr: float = 1e-3,
    val_split: Optional[np.ndarray] = None,
    log_every: int = 2000,
) -> MiniGPT:
    """Train a fresh dense model on the byte corpus."""
    model = init_model(config)
    for p in model.params.values():
        p.requires_grad = True
    opt = AdamW(list(model.params.values()))
    schedule = LrSchedule(peak_lr, steps) if steps >= 2 else None
    rng = np.random.default_rng(config.seed)
    context = config.context_length
    for k in range(1, steps + 1):
        opt.zero_grad()
        batch = sample_batch(train_split, batch_size, context + 1, rng)
        loss = forward_loss(model, batch)
        T.backward(loss)
        opt.step(lr_at(schedule, k) if schedule else peak_lr)
        if log_every and (k % log_every == 0 or k == steps):
            msg = f"pretrain step {k}/{steps} loss {loss.item():.4f}"
            if val_split is not None and k == steps:
                msg += f" val_ppl {perplexity(model, val_split):.3f}"
            print(msg, flush=True)
    model.freeze_all()
    return model


def _draw_calibration(train_split: np.ndarray, n_sequences: int, context: int, seed: int) -> CalibrationSet:
    rng = np.random.default_rng(seed ^ 0xC0FFEE)
    return CalibrationSet(sample_batch(train_split, n_sequences, context, rng), seed=seed)


def prune_model(
    model: MiniGPT,
    criterion: str,
    pattern: MaskPattern,
    calib: Optional[CalibrationSet] = None,
) -> Dict[str, SparsityMask]:
    """One-shot prune of every prunable layer, in place.

    Magnitude needs no data.  Wanda and SparseGPT capture inputs block
    by block from the partially pruned model, mirroring the sequential
    calibration pipelines they come from.
    """
    if criterion == "magnitude":
        masks = {}
        for name in model.prunable_layer_names:
            p = model.params[name]
            mask = build_mask(magnitude_scores(p.data), pattern, owner=name)
            p.data = p.data * mask.values.astype(p.data.dtype)
            masks[name] = mask
        return masks
    if calib is None:
        raise ContractError(f"criterion {criterion!r} needs a calibration set")
    masks, _ = sequential_reconstruct(
        model, calib, criterion=criterion, pattern=pattern, steps=0, with_oracle=False
    )
    return masks


def _pattern_cells(cfg: ExperimentConfig) -> List[Tuple[str, float, MaskPattern]]:
    cells = []
    for p in cfg.patterns:
        if p == "unstructured":
            for s in cfg.sparsities:
                cells.append((p, s, Unstructured(s)))
        else:
            pat = parse_pattern(p)
            s = 1.0 - pat.n / pat.m if isinstance(pat, SemiStructured) else pat.sparsity
            cells.append((p, s, pat))
    return cells


def _method_list(cfg: ExperimentConfig) -> List[str]:
    return ablation_methods() if cfg.ablation else list(cfg.methods)


def _run_cell_group(args) -> List[RunRecord]:
    """All seeds of one (pattern, sparsity, criterion, method) cell."""
    cfg, pattern_name, sparsity, pattern, criterion, method = args
    splits = ingest_corpus(cfg.corpus)
    dense, _ = load_checkpoint(cfg.checkpoint)
    out_dir = Path(cfg.out_dir)
    (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    if cfg.save_checkpoints:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    rows: List[RunRecord] = []
    tuned_lr: Optional[float] = None
    for seed in cfg.seeds:
        stem = f"{pattern_name.replace(':', 'of')}_s{sparsity:g}_{criterion}_{method.replace(':', '_')}_seed{seed}"
        try:
            row = _run_single(
                cfg, splits, dense, pattern_name, sparsity, pattern, criterion, method, seed, tuned_lr, stem
            )
            if tuned_lr is None and row.lr:
                tuned_lr = row.lr
            rows.append(row)
        except Exception as e:  # cell failures are recorded, the grid continues
            rows.append(
                RunRecord(pattern_name, sparsity, criterion, method, seed, None, 0.0, 0, 0.0, 0.0, error=str(e))
            )
    return rows


def _run_single(
    cfg: ExperimentConfig,
    splits: CorpusSplits,
    dense: MiniGPT,
    pattern_name: str,
    sparsity: float,
    pattern: MaskPattern,
    criterion: str,
    method: str,
    seed: int,
    tuned_lr: Optional[float],
    stem: str,
) -> RunRecord:
    out_dir = Path(cfg.out_dir)
    model = dense.clone()
    calib = None
    if criterion != "magnitude" or cfg.mode == "reconstruct":
        calib = _draw_calibration(splits.train, cfg.calib_sequences, cfg.model.context_length, seed)

    if cfg.mode == "reconstruct":
        steps = 0 if method == "none" else cfg.reconstruct_steps
        rec_method = "direct" if method == "direct" else "masked_lora"
        masks, logs = sequential_reconstruct(
            model,
            calib,
            criterion=criterion,
            pattern=pattern,
            method=rec_method,
            steps=steps,
            rank=cfg.adapter_rank,
            alpha=cfg.adapter_alpha,
            seed=seed,
            with_oracle=False,
        )
        log_path = out_dir / "trajectories" / f"{stem}_layers.csv"
        write_layer_log(log_path, logs)
        peak_entries = max((l.optimizer_floats for l in logs), default=0) // 2
        test_ppl = perplexity(model, splits.test)
        if cfg.save_checkpoints:
            save_checkpoint(out_dir / "checkpoints" / f"{stem}.ckpt", model, masks)
        return RunRecord(
            pattern_name, sparsity, criterion, method, seed, test_ppl,
            peak_entries / model.total_entries(), 2 * peak_entries, 0.0, 0.0, str(log_path),
        )

    masks = prune_model(model, criterion, pattern, calib)
    if method == "none":
        test_ppl = perplexity(model, splits.test)
        if cfg.save_checkpoints:
            save_checkpoint(out_dir / "checkpoints" / f"{stem}.ckpt", model, masks)
        return RunRecord(pattern_name, sparsity, criterion, method, seed, test_ppl, 0.0, 0, 0.0, 0.0)

    subset, adapter = resolve_method(method)
    recipe = RetrainRecipe(
        subset=subset,
        adapter=adapter,
        adapter_rank=cfg.adapter_rank,
        adapter_alpha=cfg.adapter_alpha,
        iters=cfg.iters,
        lr_grid=cfg.lr_grid,
        batch_size=cfg.batch_size,
        grad_accum=cfg.grad_accum,
        seed=seed,
    )
    audit = memory_audit(model, recipe)
    if tuned_lr is None:
        lr, result, _ = tune_lr(model, masks, recipe, splits.train, splits.val)
    else:
        lr = tuned_lr
        result = retrain(model.clone(), masks, recipe, splits.train, splits.val, peak_lr=lr)

    test_ppl = perplexity(result.model, splits.test)
    traj_path = out_dir / "trajectories" / f"{stem}.csv"
    write_trajectory(traj_path, result.trajectory)
    if cfg.save_checkpoints:
        save_checkpoint(out_dir / "checkpoints" / f"{stem}.ckpt", result.model, masks)
    return RunRecord(
        pattern_name, sparsity, criterion, method, seed, test_ppl,
        audit.trainable_fraction, audit.optimizer_floats, result.tokens_per_sec, lr, str(traj_path),
    )


def run_grid(cfg: ExperimentConfig) -> ExperimentReport:
    """Execute the full grid and return the assembled report."""
    splits = ingest_corpus(cfg.corpus)
    if not Path(cfg.checkpoint).exists():
        if cfg.pretrain_steps <= 0:
            raise ConfigError(f"checkpoint {cfg.checkpoint} missing and pretrain_steps is 0")
        model = pretrain_dense(
            cfg.model, splits.train, cfg.pretrain_steps, cfg.pretrain_batch, cfg.pretrain_lr, splits.val
        )
        Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cfg.checkpoint, model)

    groups = [
        (cfg, pname, s, pat, criterion, method)
        for (pname, s, pat) in _pattern_cells(cfg)
        for criterion in cfg.criteria
        for method in _method_list(cfg)
    ]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    report = ExperimentReport()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_run_cell_group, groups):
                report.rows.extend(rows)
    else:
        for g in groups:
            report.rows.extend(_run_cell_group(g))
    return report


def bench_throughput(
    model: MiniGPT,
    masks: Optional[Dict[str, SparsityMask]],
    recipe: RetrainRecipe,
    train_split: np.ndarray,
    duration: float = 6.0,
    warmup_iters: int = 3,
) -> Tuple[float, MemoryAudit]:
    """Measured training tokens/sec over ``duration`` seconds.

    The assertable quantity is the attached memory audit; the clock
    number is reported as-is.
    """
    if duration < 5.0:
        raise ConfigError("bench duration must be at least 5 seconds for a stable measurement")
    audit = memory_audit(model, recipe)
    work = model.clone()
    probe = dataclasses.replace(recipe, iters=max(1, warmup_iters))
    retrain(work, masks, probe, train_split, train_split[: 4 * model.config.context_length], peak_lr=1e-5)

    from .retrain import _prepare
    from .optim import AdamW as _Adam

    work = model.clone()
    trainables = _prepare(work, masks, recipe)
    opt = _Adam(trainables)
    rng = np.random.default_rng(recipe.seed)
    context = work.config.context_length
    tokens = 0
    start = time.perf_counter()
    while time.perf_counter() - start < duration:
        opt.zero_grad()
        for _ in range(recipe.grad_accum):
            batch = sample_batch(train_split, recipe.batch_size, context + 1, rng)
            T.backward(forward_loss(work, batch))
        opt.step(1e-5)
        tokens += recipe.grad_accum * recipe.batch_size * context
    elapsed = time.perf_counter() - start
    return tokens / elapsed, audit
