"""Command-line entry points for the pipeline stages.

Verbs: pretrain-mae, analyze-patches, align, merge, fuse-train,
finetune-head, grad-check, pipeline. Flags mirror config keys; a JSON
config file overrides flags only with --strict-config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as synth
from .align import AlignTrainConfig, ToyDecoderConfig, init_decoder, init_projector, train_align
from .harness import (
    ALL_STAGES,
    ExperimentConfig,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
    seed_everything,
    write_loss_csv,
    _ocr_samples,
)
from .mae import MAEDecoderConfig, MAETrainConfig, train_mae
from .merge import MergeTrainConfig, TeacherSet, merge_pipeline
from .numkernel import Rng, Tensor, grad_check, mse
from .patchstat import compare_corpora, write_report
from .vit import ViTConfig, encode


def _apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    overrides = json.loads(Path(args.config).read_text())
    for key, value in overrides.items():
        if not hasattr(args, key):
            continue
        # config file wins only under --strict-config; otherwise flags win
        if args.strict_config or getattr(args, key) == args._defaults.get(key):
            setattr(args, key, value)
    return args


def _enc_config(args) -> ViTConfig:
    return ViTConfig(image_size=args.image_size, patch_size=args.patch_size,
                     dim=args.dim, depth=args.depth, heads=args.heads)


def cmd_pretrain_mae(args) -> int:
    rng = seed_everything(args.seed).child("mae")
    enc_cfg = _enc_config(args)
    images = synth.mae_pretrain_images(rng.child("data"), args.images,
                                       enc_cfg.image_size)
    train_cfg = MAETrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               learning_rate=args.lr, loss_kind=args.loss)
    encoder, records = train_mae(images, enc_cfg, MAEDecoderConfig(),
                                 train_cfg, rng.child("train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(encoder, out / "stage1_encoder.ckpt")
    write_loss_csv(out / "mae_loss.csv", records)
    print(f"final loss {records[-1][1]:.5f} after {len(records)} steps")
    return 0


def cmd_analyze_patches(args) -> int:
    if args.corpus_a and args.corpus_b:
        corpus_a, corpus_b = args.corpus_a, args.corpus_b
    else:
        rng = Rng(args.seed)
        corpus_a = synth.document_corpus(rng.child("doc"), args.images, 192)
        corpus_b = synth.natural_corpus(rng.child("nat"), args.images, 192)
    report_a, report_b, ordering = compare_corpora(
        corpus_a, corpus_b, patch_size=args.patch_size,
        sample_n=args.sample_n, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report_a, out / "corpus_a_hist.csv", out / "corpus_a.json")
    write_report(report_b, out / "corpus_b_hist.csv", out / "corpus_b.json")
    (out / "ordering.json").write_text(json.dumps(ordering, indent=2))
    print(json.dumps(ordering, indent=2))
    return 0


def cmd_align(args) -> int:
    rng = seed_everything(args.seed).child("align")
    enc_cfg = _enc_config(args)
    encoder = load_checkpoint(args.encoder)
    dec_cfg = ToyDecoderConfig(dim=args.decoder_dim, identity=args.identity)
    decoder = init_decoder(dec_cfg, rng.child("decoder"))
    projector = init_projector(enc_cfg.dim, 2 * dec_cfg.dim, dec_cfg.dim,
                               rng.child("proj"))
    samples = _ocr_samples(rng.child("data"), args.samples, enc_cfg.image_size)
    aligned = train_align(encoder, enc_cfg, decoder, dec_cfg, projector,
                          samples, AlignTrainConfig(), rng.child("train"))
    save_checkpoint(aligned, args.out)
    print(f"aligned encoder written to {args.out}")
    return 0


def cmd_merge(args) -> int:
    enc_cfg = _enc_config(args)
    teachers = TeacherSet([load_checkpoint(p) for p in args.checkpoints], enc_cfg)
    rng = seed_everything(args.seed).child("merge")
    probe = synth.mae_pretrain_images(rng.child("probe"), args.probe_images,
                                      enc_cfg.image_size)
    merged = merge_pipeline(teachers, probe, args.method, MergeTrainConfig(),
                            rng.child("train"))
    save_checkpoint(merged, args.out)
    print(f"merged ({args.method}) encoder written to {args.out}")
    return 0


def cmd_fuse_train(args) -> int:
    config = ExperimentConfig(seed=args.seed, output_dir=args.out,
                              stages=("fuse_head",), merge_method=args.method,
                              head_steps=args.steps)
    manifest = run_pipeline(config)
    print(json.dumps(manifest.get("metrics", {}), indent=2))
    return 0


def cmd_finetune_head(args) -> int:
    return cmd_fuse_train(args)


def cmd_grad_check(args) -> int:
    rng = Rng(args.seed)
    enc_cfg = ViTConfig(image_size=16, patch_size=8, dim=8, depth=1, heads=2)
    from .vit import init_params, patchify
    params = init_params(enc_cfg, rng)
    image = rng.uniform((16, 16), 0.0, 1.0)
    target = rng.normal((enc_cfg.n_patches, enc_cfg.dim), 1.0)
    patches = patchify(image, enc_cfg.patch_size)

    def f(x):
        from .vit import encode_patches
        tokens = encode_patches(x, params, enc_cfg)
        return mse(tokens, Tensor(target))

    err = grad_check(f, Tensor(patches), h=args.step)
    print(f"encoder grad_check max relative error: {err:.3e}")
    return 0 if err < 1e-3 else 1


def cmd_pipeline(args) -> int:
    stages = tuple(args.stages.split(",")) if args.stages else ALL_STAGES
    config = ExperimentConfig(seed=args.seed, output_dir=args.out,
                              stages=stages, merge_method=args.method)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            if hasattr(config, key) and not dataclasses.is_dataclass(
                    getattr(config, key)):
                setattr(config, key, value)
    manifest = run_pipeline(config)
    print(json.dumps({k: manifest[k] for k in ("stages", "seed")}, indent=2))
    if "metrics" in manifest:
        print(json.dumps(manifest["metrics"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docenc")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--strict-config", action="store_true",
                       help="config file overrides explicit flags")
        p.add_argument("--image-size", type=int, default=32)
        p.add_argument("--patch-size", type=int, default=8)
        p.add_argument("--dim", type=int, default=64)
        p.add_argument("--depth", type=int, default=2)
        p.add_argument("--heads", type=int, default=4)

    p = sub.add_parser("pretrain-mae", help="stage-1 masked reconstruction")
    common(p)
    p.add_argument("--out", default="runs/mae")
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=("pixel", "normalized"), default="pixel")
    p.set_defaults(func=cmd_pretrain_mae)

    p = sub.add_parser("analyze-patches", help="inter-patch std statistics")
    common(p)
    p.add_argument("--out", default="runs/patchstat")
    p.add_argument("--corpus-a", default=None, help="PNG/PPM directory")
    p.add_argument("--corpus-b", default=None, help="PNG/PPM directory")
    p.add_argument("--images", type=int, default=200,
                   help="synthetic corpus size when no paths given")
    p.add_argument("--sample-n", type=int, default=1000)
    p.set_defaults(func=cmd_analyze_patches, patch_size=16)

    p = sub.add_parser("align", help="supervised alignment to one decoder")
    common(p)
    p.add_argument("--encoder", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", default="aligned.ckpt")
    p.add_argument("--identity", default="toy-decoder-0")
    p.add_argument("--decoder-dim", type=int, default=32)
    p.add_argument("--samples", type=int, default=320)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("merge", help="merge aligned encoder checkpoints")
    common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--method", choices=("none", "average", "fisher", "learned"),
                   default="learned")
    p.add_argument("--out", default="merged.ckpt")
    p.add_argument("--probe-images", type=int, default=256)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("fuse-train", help="fused bbox-head training stage")
    common(p)
    p.add_argument("--out", default="runs/fuse")
    p.add_argument("--method", default="learned")
    p.add_argument("--steps", type=int, default=700)
    p.set_defaults(func=cmd_fuse_train)

    p = sub.add_parser("finetune-head", help="alias of fuse-train")
    common(p)
    p.add_argument("--out", default="runs/head")
    p.add_argument("--method", default="learned")
    p.add_argument("--steps", type=int, default=700)
    p.set_defaults(func=cmd_finetune_head)

    p = sub.add_parser("grad-check", help="finite-difference encoder check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-3)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("pipeline", help="full toy pipeline")
    common(p)
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--stages", default=None,
                   help="comma-separated subset of " + ",".join(ALL_STAGES))
    p.add_argument("--method", default="learned")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = next(a for a in parser._actions
               if isinstance(a, argparse._SubParsersAction))
    chosen = sub.choices[args.command]
    args._defaults = {a.dest: a.default for a in chosen._actions}
    args = _apply_config_file(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
