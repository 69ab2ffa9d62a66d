"""Command-line interface.

Subcommands: pretrain, prune, retrain, reconstruct, eval, grid, bench.
Single-threaded BLAS is pinned before numpy loads; small-matrix training
is faster that way and runs become bitwise reproducible under a fixed
thread configuration.
"""

from ._threads import pin_single_thread

pin_single_thread()

import argparse


def _add_model_flags(ap):
    ap.add_argument("--vocab-size", type=int, default=256)
    ap.add_argument("--context", type=int, default=32)
    ap.add_argument("--d-model", type=int, default=256)
    ap.add_argument("--n-heads", type=int, default=8)
    ap.add_argument("--n-layers", type=int, default=1)
    ap.add_argument("--d-ff", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=0)


def _model_config(args):
    from .model import MiniGPTConfig

    return MiniGPTConfig(
        vocab_size=args.vocab_size,
        context_length=args.context,
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_layers=args.n_layers,
        d_ff=args.d_ff,
        seed=args.seed,
    )


def cmd_pretrain(args):
    from .checkpoint import save_checkpoint
    from .corpus import ingest_corpus
    from .experiment import pretrain_dense

    splits = ingest_corpus(args.corpus)
    model = pretrain_dense(
        _model_config(args), splits.train, args.steps, args.batch_size, args.lr, splits.val
    )
    save_checkpoint(args.out, model)
    print(f"saved dense checkpoint to {args.out}")


def cmd_prune(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .corpus import ingest_corpus
    from .experiment import _draw_calibration, prune_model
    from .model import perplexity
    from .sparsity import parse_pattern

    model, _ = load_checkpoint(args.ckpt)
    pattern = parse_pattern(args.pattern)
    calib = None
    if args.criterion != "magnitude":
        splits = ingest_corpus(args.corpus)
        calib = _draw_calibration(splits.train, args.calib_sequences, model.config.context_length, args.seed)
    masks = prune_model(model, args.criterion, pattern, calib)
    save_checkpoint(args.out, model, masks)
    print(f"pruned with {args.criterion} ({args.pattern}); saved to {args.out}")
    if args.corpus:
        splits = ingest_corpus(args.corpus)
        print(f"val perplexity after pruning: {perplexity(model, splits.val):.4f}")


def cmd_retrain(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .corpus import ingest_corpus
    from .experiment import resolve_method
    from .model import perplexity
    from .report import write_trajectory
    from .retrain import RetrainRecipe, retrain, tune_lr

    model, masks = load_checkpoint(args.ckpt)
    if not masks:
        masks = None
    splits = ingest_corpus(args.corpus)
    subset, adapter = resolve_method(args.method)
    recipe = RetrainRecipe(
        subset=subset,
        adapter=adapter,
        adapter_rank=args.rank,
        adapter_alpha=args.alpha,
        iters=args.iters,
        batch_size=args.batch_size,
        grad_accum=args.grad_accum,
        seed=args.seed,
    )
    if args.lr is not None:
        result = retrain(model, masks, recipe, splits.train, splits.val, peak_lr=args.lr)
        lr = args.lr
    else:
        lr, result, grid = tune_lr(model, masks, recipe, splits.train, splits.val)
        for g_lr, g_ppl in grid:
            print(f"  lr {g_lr:g}: {'diverged' if g_ppl is None else f'{g_ppl:.4f}'}")
    print(f"retrained ({args.method}, lr {lr:g}); final val ppl {result.final_val_ppl:.4f}")
    print(f"test perplexity: {perplexity(result.model, splits.test):.4f}")
    save_checkpoint(args.out, result.model, masks)
    if args.trajectory:
        write_trajectory(args.trajectory, result.trajectory)


def cmd_reconstruct(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .corpus import ingest_corpus
    from .experiment import _draw_calibration
    from .model import perplexity
    from .reconstruct import sequential_reconstruct
    from .report import write_layer_log
    from .sparsity import parse_pattern

    model, _ = load_checkpoint(args.ckpt)
    splits = ingest_corpus(args.corpus)
    calib = _draw_calibration(splits.train, args.calib_sequences, model.config.context_length, args.seed)
    masks, logs = sequential_reconstruct(
        model,
        calib,
        criterion=args.criterion,
        pattern=parse_pattern(args.pattern),
        method=args.method,
        steps=args.steps,
        rank=args.rank,
        alpha=args.alpha,
        seed=args.seed,
    )
    save_checkpoint(args.out, model, masks)
    if args.layer_log:
        write_layer_log(args.layer_log, logs)
    print(f"reconstructed ({args.criterion}, {args.pattern}, {args.method}, {args.steps} steps)")
    print(f"val perplexity: {perplexity(model, splits.val):.4f}")


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .corpus import ingest_corpus
    from .model import perplexity

    model, _ = load_checkpoint(args.ckpt)
    splits = ingest_corpus(args.corpus)
    stream = getattr(splits, args.split)
    print(f"{args.split} perplexity: {perplexity(model, stream):.4f}")


def cmd_grid(args):
    from .experiment import ExperimentConfig, run_grid
    from .report import emit_tables

    cfg = ExperimentConfig.from_json(args.config)
    report = run_grid(cfg)
    files = emit_tables(report, cfg.out_dir)
    for f in files:
        print(f"wrote {f}")


def cmd_bench(args):
    from .checkpoint import load_checkpoint
    from .corpus import ingest_corpus
    from .experiment import bench_throughput, resolve_method
    from .retrain import RetrainRecipe

    model, masks = load_checkpoint(args.ckpt)
    splits = ingest_corpus(args.corpus)
    subset, adapter = resolve_method(args.method)
    recipe = RetrainRecipe(subset=subset, adapter=adapter, seed=args.seed)
    tps, audit = bench_throughput(model, masks or None, recipe, splits.train, duration=args.duration)
    print(f"method {args.method}: {tps:.0f} tokens/sec")
    print(
        f"trainable {audit.trainable_entries} / {audit.total_entries} "
        f"({100 * audit.trainable_fraction:.3f}%), optimizer floats {audit.optimizer_floats}"
    )


def main(argv=None):
    parser = argparse.ArgumentParser(prog="prunelab", description="Prune and efficiently retrain a miniature GPT.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a dense byte-level model")
    _add_model_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", help="one-shot prune a dense checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--criterion", choices=["magnitude", "wanda", "sparsegpt"], default="magnitude")
    p.add_argument("--pattern", default="0.5", help='sparsity like "0.5" or pattern like "2:4"')
    p.add_argument("--corpus", default=None, help="needed for data-driven criteria")
    p.add_argument("--calib-sequences", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("retrain", help="retrain a pruned checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", default="bias+ln", help="none|bias|ln|bias+ln|head|embedding|full-ft|lora|lora-prune|mult-lora|masked-lora|abl:...")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=None, help="peak lr; omit to tune over the grid")
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--grad-accum", type=int, default=4)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--alpha", type=float, default=32.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectory", default=None, help="write the val-ppl trajectory CSV here")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("reconstruct", help="layer-wise prune and reconstruct a dense checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--criterion", choices=["magnitude", "wanda", "sparsegpt"], default="magnitude")
    p.add_argument("--pattern", default="0.5")
    p.add_argument("--method", choices=["direct", "masked_lora"], default="masked_lora")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--alpha", type=float, default=32.0)
    p.add_argument("--calib-sequences", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layer-log", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run an experiment grid from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="measure retraining throughput for a method")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", default="bias+ln")
    p.add_argument("--duration", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
