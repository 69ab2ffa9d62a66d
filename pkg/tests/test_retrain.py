"""Retraining recipes: budgets, enforcement, freezing, tuning, audits."""

import numpy as np
import pytest

from prunelab.corpus import generate_corpus
from prunelab.errors import ConfigError, ContractError, NumericalError
from prunelab.model import MiniGPTConfig, init_model
from prunelab.retrain import RetrainRecipe, memory_audit, retrain, tune_lr
from prunelab.sparsity import Unstructured, build_mask, magnitude_scores, sparsity_of

SMALL = MiniGPTConfig(vocab_size=256, context_length=8, d_model=32, n_heads=2, n_layers=2, d_ff=64, seed=9)


@pytest.fixture(scope="module")
def streams():
    data = np.frombuffer(generate_corpus(1 << 17, seed=5), dtype=np.uint8)
    return data[:100_000], data[100_000:]


@pytest.fixture()
def pruned():
    model = init_model(SMALL)
    model.freeze_all()
    masks = {}
    for name in model.prunable_layer_names:
        p = model.params[name]
        masks[name] = build_mask(magnitude_scores(p.data), Unstructured(0.5), owner=name)
        p.data *= masks[name].values.astype(p.data.dtype)
    return model, masks


class TestRecipe:
    def test_needs_subset_or_adapter(self):
        with pytest.raises(ConfigError):
            RetrainRecipe()
        RetrainRecipe(subset={"bias"})
        RetrainRecipe(adapter="masked_lora")

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            RetrainRecipe(subset={"bias"}, iters=0)
        with pytest.raises(ConfigError):
            RetrainRecipe(subset={"spam"})
        with pytest.raises(ConfigError):
            RetrainRecipe(adapter="dora")


class TestRetrain:
    def test_single_iter_single_step_trajectory(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias", "ln"}, iters=1, seed=0)
        result = retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-4)
        assert len(result.trajectory) == 1
        assert result.trajectory[0].iteration == 1

    def test_trajectory_iterations_strictly_increase(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias"}, iters=45, seed=0)
        result = retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-4)
        its = [p.iteration for p in result.trajectory]
        assert all(b > a for a, b in zip(its, its[1:]))
        assert its[-1] == 45

    def test_masked_weights_zero_and_frozen_unchanged(self, pruned, streams):
        model, masks = pruned
        frozen_before = {
            n: p.data.copy() for n, p in model.named_parameters() if p.tag not in ("bias", "ln")
        }
        recipe = RetrainRecipe(subset={"bias", "ln"}, iters=8, seed=0)
        result = retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-3)
        for name in model.prunable_layer_names:
            w = result.model.params[name].data
            support = masks[name].values.astype(bool)
            assert np.all(w[~support] == 0.0)
            assert sparsity_of((w != 0).astype(np.uint8)) >= sparsity_of(masks[name])
        for name, before in frozen_before.items():
            assert np.array_equal(result.model.params[name].data, before), name

    def test_adapter_run_merges_and_preserves_support(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias", "ln"}, adapter="masked_lora", adapter_rank=4, iters=8, seed=0)
        result = retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-3)
        assert not result.model.adapters
        assert not result.unmerged_adapters
        for name in model.prunable_layer_names:
            assert result.merge_reports[name].max_forward_deviation < 1e-5
            w = result.model.params[name].data
            assert np.all(w[masks[name].values == 0] == 0.0)

    def test_plain_lora_left_unmerged_and_flagged(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset=frozenset(), adapter="lora", adapter_rank=4, iters=4, seed=0)
        result = retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-3)
        assert result.unmerged_adapters
        assert len(result.model.adapters) == len(model.prunable_layer_names)

    def test_partial_masks_rejected(self, pruned, streams):
        model, masks = pruned
        masks = dict(list(masks.items())[:-1])
        recipe = RetrainRecipe(subset={"bias"}, iters=2, seed=0)
        with pytest.raises(ContractError):
            retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-4)

    def test_dense_control_runs(self, streams):
        model = init_model(SMALL)
        model.freeze_all()
        recipe = RetrainRecipe(subset={"bias", "ln"}, iters=4, seed=0)
        result = retrain(model, None, recipe, streams[0], streams[1][:2000], peak_lr=1e-3)
        assert np.isfinite(result.final_val_ppl)

    def test_determinism_bitwise(self, streams):
        outs = []
        for _ in range(2):
            model = init_model(SMALL)
            model.freeze_all()
            masks = {}
            for name in model.prunable_layer_names:
                p = model.params[name]
                masks[name] = build_mask(magnitude_scores(p.data), Unstructured(0.5), owner=name)
            recipe = RetrainRecipe(subset={"bias", "ln"}, adapter="masked_lora", adapter_rank=4, iters=6, seed=3)
            result = retrain(model, masks, recipe, streams[0], streams[1][:2000], peak_lr=1e-3)
            outs.append({n: p.data.copy() for n, p in result.model.named_parameters()})
        for name in outs[0]:
            assert np.array_equal(outs[0][name], outs[1][name]), name


class TestTuneLr:
    def test_grid_accounting_and_argmin(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias", "ln"}, iters=4, seed=0)
        best_lr, best, report = tune_lr(model, masks, recipe, streams[0], streams[1][:2000], lr_grid=(1e-5, 1e-4, 1e-3))
        assert len(report) == 3
        ppls = [p for _, p in report if p is not None]
        assert best.final_val_ppl == min(ppls)
        assert best_lr in [lr for lr, p in report if p == best.final_val_ppl]

    def test_singleton_grid(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias"}, iters=2, seed=0)
        best_lr, _, report = tune_lr(model, masks, recipe, streams[0], streams[1][:2000], lr_grid=(5e-5,))
        assert best_lr == 5e-5 and len(report) == 1

    def test_tie_breaks_toward_smaller_lr(self, pruned, streams):
        # Zero-lr runs all tie; the smallest rate must win.
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias"}, iters=2, seed=0)
        best_lr, _, _ = tune_lr(model, masks, recipe, streams[0], streams[1][:2000], lr_grid=(0.0, 0.0))
        assert best_lr == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_all_diverged_raises_with_outcomes(self, pruned, streams):
        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias", "ln", "head", "embedding", "linear-weight"}, iters=40, seed=0)
        with pytest.raises(NumericalError, match="diverged"):
            tune_lr(model, masks, recipe, streams[0], streams[1][:2000], lr_grid=(1e18, 1e19))


class TestMemoryAudit:
    def test_bias_ln_counts(self):
        model = init_model(MiniGPTConfig())
        audit = memory_audit(model, RetrainRecipe(subset={"bias", "ln"}))
        assert audit.trainable_fraction < 0.005
        assert audit.optimizer_floats == 2 * audit.trainable_entries
        hand = sum(p.size for p in model.params.values() if p.tag in ("bias", "ln"))
        assert audit.trainable_entries == hand

    def test_full_ft_fraction_one(self):
        model = init_model(SMALL)
        audit = memory_audit(model, RetrainRecipe(subset={"bias", "ln", "head", "embedding", "linear-weight"}))
        assert audit.trainable_fraction == pytest.approx(1.0)

    def test_masked_lora_between_subset_and_full(self):
        model = init_model(MiniGPTConfig())
        subset_only = memory_audit(model, RetrainRecipe(subset={"bias", "ln"}))
        ml = memory_audit(model, RetrainRecipe(subset={"bias", "ln"}, adapter="masked_lora", adapter_rank=16))
        full = memory_audit(model, RetrainRecipe(subset={"bias", "ln", "head", "embedding", "linear-weight"}))
        assert subset_only.trainable_fraction < ml.trainable_fraction < full.trainable_fraction
        n_r = sum(
            model.params[n].data.shape[0] * 16 + 16 * model.params[n].data.shape[1]
            for n in model.prunable_layer_names
        )
        assert ml.trainable_entries == subset_only.trainable_entries + n_r

    def test_audit_matches_actual_optimizer_allocation(self, pruned, streams):
        from prunelab.retrain import _prepare
        from prunelab.optim import AdamW

        model, masks = pruned
        recipe = RetrainRecipe(subset={"bias", "ln"}, adapter="masked_lora", adapter_rank=4, seed=0)
        audit = memory_audit(model, recipe)
        trainables = _prepare(model, masks, recipe)
        assert AdamW(trainables).state_float_count() == audit.optimizer_floats
