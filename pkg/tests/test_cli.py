"""CLI subcommands exercised end to end on tiny budgets."""

import json

import numpy as np
import pytest

from prunelab.checkpoint import load_checkpoint
from prunelab.cli import main
from prunelab.corpus import generate_corpus
from prunelab.sparsity import SemiStructured, sparsity_of


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "corpus.txt"
    path.write_bytes(generate_corpus(1 << 17, seed=2))
    return path


@pytest.fixture(scope="module")
def dense_ckpt(tmp_path_factory, corpus_file):
    path = tmp_path_factory.mktemp("cli") / "dense.ckpt"
    main([
        "pretrain", "--corpus", str(corpus_file), "--out", str(path),
        "--steps", "30", "--batch-size", "4", "--context", "8",
        "--d-model", "32", "--n-heads", "2", "--n-layers", "2", "--d-ff", "64",
    ])
    return path


class TestCli:
    def test_pretrain_writes_checkpoint(self, dense_ckpt):
        model, masks = load_checkpoint(dense_ckpt)
        assert model.config.d_model == 32 and not masks

    def test_prune_magnitude(self, tmp_path, dense_ckpt, corpus_file):
        out = tmp_path / "pruned.ckpt"
        main([
            "prune", "--ckpt", str(dense_ckpt), "--out", str(out),
            "--criterion", "magnitude", "--pattern", "0.5", "--corpus", str(corpus_file),
        ])
        model, masks = load_checkpoint(out)
        assert set(masks) == set(model.prunable_layer_names)
        for name, mask in masks.items():
            assert sparsity_of(mask) == 0.5
            assert np.all(model.params[name].data[mask.values == 0] == 0.0)

    def test_prune_nm_pattern_with_wanda(self, tmp_path, dense_ckpt, corpus_file):
        out = tmp_path / "pruned24.ckpt"
        main([
            "prune", "--ckpt", str(dense_ckpt), "--out", str(out),
            "--criterion", "wanda", "--pattern", "2:4",
            "--corpus", str(corpus_file), "--calib-sequences", "8",
        ])
        _, masks = load_checkpoint(out)
        assert all(isinstance(m.pattern, SemiStructured) for m in masks.values())

    def test_retrain_and_eval(self, tmp_path, dense_ckpt, corpus_file, capsys):
        pruned = tmp_path / "pruned.ckpt"
        main(["prune", "--ckpt", str(dense_ckpt), "--out", str(pruned), "--pattern", "0.5"])
        out = tmp_path / "retrained.ckpt"
        traj = tmp_path / "traj.csv"
        main([
            "retrain", "--ckpt", str(pruned), "--out", str(out), "--corpus", str(corpus_file),
            "--method", "masked-lora", "--iters", "4", "--lr", "1e-3", "--trajectory", str(traj),
        ])
        model, masks = load_checkpoint(out)
        for name, mask in masks.items():
            assert np.all(model.params[name].data[mask.values == 0] == 0.0)
        header = traj.read_text().splitlines()[0]
        assert header == "iter,lr,train_loss,val_ppl"
        main(["eval", "--ckpt", str(out), "--corpus", str(corpus_file), "--split", "val"])
        assert "perplexity" in capsys.readouterr().out

    def test_reconstruct(self, tmp_path, dense_ckpt, corpus_file):
        out = tmp_path / "recon.ckpt"
        log = tmp_path / "layers.csv"
        main([
            "reconstruct", "--ckpt", str(dense_ckpt), "--out", str(out), "--corpus", str(corpus_file),
            "--criterion", "magnitude", "--pattern", "0.5", "--steps", "3",
            "--calib-sequences", "4", "--layer-log", str(log),
        ])
        model, masks = load_checkpoint(out)
        assert set(masks) == set(model.prunable_layer_names)
        assert log.read_text().splitlines()[0] == "layer,criterion,steps,obj_initial,obj_final,obj_oracle"

    def test_grid(self, tmp_path, dense_ckpt, corpus_file, capsys):
        cfg = {
            "corpus": str(corpus_file),
            "checkpoint": str(dense_ckpt),
            "out_dir": str(tmp_path / "results"),
            "model": {"vocab_size": 256, "context_length": 8, "d_model": 32,
                      "n_heads": 2, "n_layers": 2, "d_ff": 64, "seed": 0},
            "sparsities": [0.5],
            "patterns": ["unstructured"],
            "methods": ["none", "bias"],
            "iters": 2,
            "lr_grid": [1e-4],
            "seeds": [0],
            "save_checkpoints": False,
        }
        cfg_path = tmp_path / "grid.json"
        cfg_path.write_text(json.dumps(cfg))
        main(["grid", "--config", str(cfg_path)])
        out = capsys.readouterr().out
        assert "runs.csv" in out
        assert (tmp_path / "results" / "table_unstructured.md").exists()
        # Single-sparsity grids have no sparsity curve, but the retrained
        # cell's trajectory renders.
        assert (tmp_path / "results" / "trajectories.png").exists()

    def test_unknown_command_rejected(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
