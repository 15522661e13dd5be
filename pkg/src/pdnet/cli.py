"""Command-line entry point.

Subcommands: gen-data, pretrain, train, eval, ablate, infer, grad-check.
Exit codes: 0 success, 1 usage error, 2 runtime/data error, 3 verification
failure.  Every report CSV gets a rendered PNG figure next to it.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import RunConfig, UsageError, key_catalog, parse_kv_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(
        prog="pdnet",
        description="Prior-guided, depth-enhanced RGB-D salient object detection.",
        epilog="configuration keys (key=value file via --config, overrides via --set):\n"
               + key_catalog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    sp = sub.add_parser("gen-data", help="generate a synthetic RGB-D dataset directory")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory (train/ and test/ inside)")
    sp.add_argument("--n", type=int, help="number of samples (data.n)")
    sp.add_argument("--seed", type=int, help="generation seed (data.seed)")

    sp = sub.add_parser("pretrain", help="pretrain the master network on RGB data (the prior)")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output checkpoint path")
    sp.add_argument("--seed", type=int, help="training seed (train.seed)")

    sp = sub.add_parser("train", help="train a variant on RGB-D data")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory with train/ and test/")
    sp.add_argument("--out", required=True, help="output checkpoint path")
    sp.add_argument("--variant", default="PDNet", choices=["MNet", "PNet", "DNet", "PDNet"])
    sp.add_argument("--alpha", help="combination weight factor (fusion.alpha)")
    sp.add_argument("--prior", help="prior checkpoint (required for PNet/PDNet)")
    sp.add_argument("--seed", type=int, help="training seed (train.seed)")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset directory (test/ used if present)")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--f-mode", choices=["adaptive", "max-curve"],
                    help="F-measure rule (metrics.f_mode)")

    sp = sub.add_parser("ablate", help="run the variant ablation table")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory with train/ and test/")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--pretrain-data",
                    help="separate RGB dataset for the prior (default: train split)")
    sp.add_argument("--seeds", help="comma-separated seeds (ablate.seeds)")
    sp.add_argument("--jobs", type=int, help="parallel runs (ablate.jobs)")
    sp.add_argument("--alpha-zero-smoke", action="store_true",
                    help="add an alpha=0 row (reproduces PNet exactly)")

    sp = sub.add_parser("infer", help="run a checkpoint on one rgb(/depth) image pair")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rgb", required=True, help="input PPM (P6)")
    sp.add_argument("--depth", help="input PGM (P5); optional for RGB-only models")
    sp.add_argument("--out", required=True, help="output saliency PGM")

    sp = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    common(sp)
    sp.add_argument("--seeds", type=int, default=2, help="random seeds per op case")

    return p


def _config_from(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.apply_file(args.config)
    for item in args.set:
        cfg.apply_pairs(parse_kv_text(item, source="--set"), source="--set")
    return cfg


def _load_split(path, size):
    from .data import DataError, DatasetSplit, load_dataset_dir, preprocess
    train_dir = os.path.join(path, "train")
    test_dir = os.path.join(path, "test")
    if os.path.isdir(train_dir) and os.path.isdir(test_dir):
        train, test = load_dataset_dir(train_dir), load_dataset_dir(test_dir)
    elif os.path.isdir(path):
        raise DataError(f"{path}: expected train/ and test/ subdirectories")
    else:
        raise DataError(f"{path}: not a directory")
    split = DatasetSplit(train=train, test=test)
    split.train = [_fit(s, size, preprocess) for s in split.train]
    split.test = [_fit(s, size, preprocess) for s in split.test]
    return split


def _fit(sample, size, preprocess):
    return sample if sample.rgb.shape[2] == size else preprocess(sample, size)


def _load_flat(path, size):
    from .data import DataError, load_dataset_dir, preprocess
    test_dir = os.path.join(path, "test")
    use = test_dir if os.path.isdir(test_dir) else path
    if not os.path.isdir(use):
        raise DataError(f"{use}: not a directory")
    return [_fit(s, size, preprocess) for s in load_dataset_dir(use)]


def _cmd_gen_data(args) -> int:
    from .data import export_dataset, gen_dataset
    cfg = _config_from(args)
    if args.n is not None:
        cfg.apply_pairs({"data.n": str(args.n)})
    if args.seed is not None:
        cfg.apply_pairs({"data.seed": str(args.seed)})
    split = gen_dataset(cfg.scene_config(), cfg["data.n"], cfg["data.seed"])
    export_dataset(split.train, os.path.join(args.out, "train"))
    export_dataset(split.test, os.path.join(args.out, "test"))
    print(f"wrote {len(split.train)} train / {len(split.test)} test samples to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import DataError, load_dataset_dir, preprocess
    from .report import save_training_curves
    from .train import pretrain_master, write_train_log
    cfg = _config_from(args)
    if args.seed is not None:
        cfg.apply_pairs({"train.seed": str(args.seed)})
    size = cfg["master.input_size"]
    train_dir = os.path.join(args.data, "train")
    use = train_dir if os.path.isdir(train_dir) else args.data
    if not os.path.isdir(use):
        raise DataError(f"{use}: not a directory")
    samples = [_fit(s, size, preprocess) for s in load_dataset_dir(use)]
    model, rows, _ = pretrain_master(cfg.train_config(epochs=cfg["pretrain.epochs"]),
                                     samples, cfg.master_config(input_channels=3),
                                     dtype=cfg.dtype())
    save_checkpoint(model, args.out)
    stem = os.path.splitext(args.out)[0]
    write_train_log(rows, stem + "_log.csv")
    save_training_curves(rows, stem + "_curves.png")
    print(f"prior checkpoint: {args.out} (final loss {rows[-1][2]:.4f})")
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .report import save_training_curves
    from .train import make_variant, train_pdnet, write_train_log
    cfg = _config_from(args)
    if args.seed is not None:
        cfg.apply_pairs({"train.seed": str(args.seed)})
    if args.alpha is not None:
        cfg.apply_pairs({"fusion.alpha": args.alpha})
    split = _load_split(args.data, cfg["master.input_size"])
    fusion = cfg.fusion_spec()
    variant = make_variant(args.variant, fusion.alpha)
    model, rows, _ = train_pdnet(
        cfg.train_config(), split, variant,
        fusion_mode=fusion.mode,
        master_config=cfg.master_config(input_channels=variant.input_channels),
        subnet_config=cfg.subnet_config() if variant.uses_subnet else None,
        prior_path=args.prior, dtype=cfg.dtype(),
        beta2=cfg["metrics.beta2"], f_mode=cfg["metrics.f_mode"],
        threshold_scale=cfg["metrics.threshold_scale"])
    save_checkpoint(model, args.out)
    stem = os.path.splitext(args.out)[0]
    write_train_log(rows, stem + "_log.csv")
    save_training_curves(rows, stem + "_curves.png")
    last = rows[-1]
    print(f"{args.variant} checkpoint: {args.out} "
          f"(test mae {last[3]:.4f}, fbeta {last[4]:.4f})")
    return 0


def _variant_from_checkpoint(model):
    subnet = model.subnet is not None
    four = model.master_config.input_channels == 4
    return subnet, four


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_dataset, write_report_csv
    from .report import save_pr_curve_figure
    from .train import _eval_forward
    cfg = _config_from(args)
    if args.f_mode:
        cfg.apply_pairs({"metrics.f_mode": args.f_mode})
    model = load_checkpoint(args.checkpoint)
    samples = _load_flat(args.data, model.master_config.input_size)
    subnet, four = _variant_from_checkpoint(model)
    report = evaluate_dataset(
        _eval_forward(model, subnet, four, model.dtype), samples,
        beta2=cfg["metrics.beta2"], f_mode=cfg["metrics.f_mode"],
        threshold_scale=cfg["metrics.threshold_scale"])
    os.makedirs(args.out_dir, exist_ok=True)
    write_report_csv(report, os.path.join(args.out_dir, "metrics.csv"),
                     os.path.join(args.out_dir, "pr_curve.csv"))
    save_pr_curve_figure(report.pr_curve, os.path.join(args.out_dir, "pr_curve.png"),
                         label=os.path.basename(args.checkpoint))
    print(f"mae {report.mae:.6f}  fbeta {report.f_beta:.6f}  "
          f"({report.n_samples} samples) -> {args.out_dir}")
    return 0


def _cmd_ablate(args) -> int:
    from .data import DataError, load_dataset_dir, preprocess
    from .report import save_ablation_figure
    from .train import run_ablation
    cfg = _config_from(args)
    if args.seeds:
        cfg.apply_pairs({"ablate.seeds": args.seeds})
    if args.jobs is not None:
        cfg.apply_pairs({"ablate.jobs": str(args.jobs)})
    if args.alpha_zero_smoke:
        cfg.apply_pairs({"ablate.alpha_zero_smoke": "true"})
    size = cfg["master.input_size"]
    split = _load_split(args.data, size)
    pretrain_dataset = None
    if args.pretrain_data:
        pdir = os.path.join(args.pretrain_data, "train")
        use = pdir if os.path.isdir(pdir) else args.pretrain_data
        if not os.path.isdir(use):
            raise DataError(f"{use}: not a directory")
        pretrain_dataset = [_fit(s, size, preprocess) for s in load_dataset_dir(use)]
    rows, summary = run_ablation(
        cfg.train_config(), split, args.out_dir,
        master_config=cfg.master_config(input_channels=3),
        subnet_config=cfg.subnet_config(),
        fusion_mode=cfg["fusion.mode"],
        seeds=cfg["ablate.seeds"],
        alphas_lt=cfg["ablate.alphas_lt"],
        alphas_gt=cfg["ablate.alphas_gt"],
        pretrain_dataset=pretrain_dataset,
        pretrain_epochs=cfg["pretrain.epochs"],
        jobs=cfg["ablate.jobs"],
        alpha_zero_smoke=cfg["ablate.alpha_zero_smoke"],
        dtype=cfg.dtype(),
        beta2=cfg["metrics.beta2"], f_mode=cfg["metrics.f_mode"],
        threshold_scale=cfg["metrics.threshold_scale"])
    save_ablation_figure(summary, os.path.join(args.out_dir, "ablation_summary.png"))
    print(f"{'variant':<18} {'fbeta':>8} {'mae':>8}")
    for name, fb, ma in summary:
        print(f"{name:<18} {fb:>8.4f} {ma:>8.4f}")
    return 0


def _cmd_infer(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import Sample, preprocess, read_pgm, read_ppm, write_pgm
    from .tensor import Tensor
    model = load_checkpoint(args.checkpoint)
    size = model.master_config.input_size
    rgb = read_ppm(args.rgb).astype(np.float32) / 255.0
    depth = None
    if args.depth:
        depth = read_pgm(args.depth).astype(np.float32) / 255.0
    h, w = rgb.shape[:2]
    sample = Sample(
        rgb=Tensor(rgb.transpose(2, 0, 1)[None]),
        depth=Tensor((depth if depth is not None else np.zeros((h, w), np.float32))[None, None]),
        gt=Tensor(np.zeros((1, 1, h, w), np.float32)),
        id="infer")
    if (h, w) != (size, size):
        sample = preprocess(sample, size)
    rgb_t = sample.rgb
    depth_t = sample.depth if args.depth else None
    if model.master_config.input_channels == 4:
        if depth_t is None:
            raise UsageError("this checkpoint consumes 4-channel RGB-D input; --depth is required")
        rgb_t = Tensor(np.concatenate([rgb_t.data, depth_t.data], axis=1))
        depth_t = None
    if depth_t is not None and model.subnet is None:
        depth_t = None  # RGB-only model: depth input is ignored
    rgb_in = Tensor(rgb_t.data.astype(model.dtype, copy=False))
    depth_in = None if depth_t is None else Tensor(depth_t.data.astype(model.dtype, copy=False))
    s, _ = model.forward(rgb_in, depth_in, training=False)
    out = np.floor(s.data[0, 0].astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    write_pgm(args.out, out)
    print(f"saliency map ({out.shape[1]}x{out.shape[0]}) -> {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    from .verify import run_grad_suite
    results = run_grad_suite(seeds=tuple(range(args.seeds)))
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{status:4s} {r.name:38s} err {r.err:.3e}  tol {r.tol:g}")
        failed += 0 if r.ok else 1
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 0 if failed == 0 else 3


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "infer": _cmd_infer,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime/data errors
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
