"""Two-stage training protocol and the ablation harness.

Stage 1 pretrains the master network on RGB-only data (the prior); stage 2
loads the prior, freezes the encoder, and trains on RGB-D.  The ablation
harness trains the four variants (MNet / PNet / DNet / PDNet) plus the
alpha sweep and emits a six-row summary table.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import load_prior, save_checkpoint
from .data import DatasetSplit, Sample
from .metrics import evaluate_dataset
from .model import (ConfigError, FusionSpec, MasterConfig, PDNet, SubNetConfig,
                    freeze_prior, total_loss)
from .optim import AdamState, adam_step
from .tensor import DEFAULT_DTYPE, Rng, Tape, Tensor, backward


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    seed: int = 0
    side_weight: float = 0.5
    shuffle: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"bad epochs/batch_size {self.epochs}/{self.batch_size}")
        if not (0 < self.lr_end <= self.lr_start):
            raise ConfigError(
                f"need 0 < lr_end <= lr_start, got {self.lr_end} / {self.lr_start}")

    def lr_at(self, epoch: int) -> float:
        """Linear per-epoch decay from lr_start to lr_end."""
        if self.epochs == 1:
            return self.lr_start
        return self.lr_start + (self.lr_end - self.lr_start) * epoch / (self.epochs - 1)


@dataclass(frozen=True)
class AblationVariant:
    name: str  # MNet | PNet | DNet | PDNet
    alpha: float = 1.0
    use_prior: bool = False
    use_depth: bool = False
    input_channels: int = 3

    @property
    def uses_subnet(self) -> bool:
        return self.use_depth and self.input_channels == 3


def make_variant(name: str, alpha: float = 1.0) -> AblationVariant:
    if name == "MNet":  # depth as a 4th input channel, no prior, no subnet
        return AblationVariant("MNet", alpha, use_prior=False, use_depth=True,
                               input_channels=4)
    if name == "PNet":  # prior-guided master, RGB only
        return AblationVariant("PNet", alpha, use_prior=True, use_depth=False)
    if name == "DNet":  # depth subnet without the prior
        return AblationVariant("DNet", alpha, use_prior=False, use_depth=True)
    if name == "PDNet":  # prior + depth subnet
        return AblationVariant("PDNet", alpha, use_prior=True, use_depth=True)
    raise ConfigError(f"unknown variant {name!r} (expected MNet/PNet/DNet/PDNet)")


def _stack(batch: list[Sample], use_depth: bool, four_channel: bool, dtype):
    rgb = np.concatenate([s.rgb.data for s in batch], axis=0).astype(dtype, copy=False)
    gt = np.concatenate([s.gt.data for s in batch], axis=0).astype(dtype, copy=False)
    depth = None
    if use_depth or four_channel:
        depth = np.concatenate([s.depth.data for s in batch], axis=0).astype(dtype, copy=False)
    if four_channel:
        rgb = np.concatenate([rgb, depth], axis=1)
        depth = None
    return Tensor(rgb), (None if depth is None else Tensor(depth)), Tensor(gt)


def _eval_forward(model: PDNet, use_depth: bool, four_channel: bool, dtype):
    def fwd(batch):
        rgb, depth, _ = _stack(batch, use_depth, four_channel, dtype)
        s, _ = model.forward(rgb, depth, training=False)
        return s.data
    return fwd


def _run_epochs(model, cfg: TrainConfig, train_samples, *, use_depth, four_channel,
                test_samples=None, beta2=0.3, f_mode="adaptive", threshold_scale=2.0):
    params = list(model.named_params())
    state = AdamState()
    shuffle_rng = Rng(cfg.seed).child(1)
    n = len(train_samples)
    dtype = model.dtype
    rows = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.gen.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            rgb, depth, gt = _stack(batch, use_depth, four_channel, dtype)
            model.zero_grads()
            with Tape() as tape:
                s, sides = model.forward(rgb, depth, training=True)
                loss = total_loss(s, sides, gt, cfg.side_weight)
                backward(loss, tape)
            lv = loss.item()
            if not np.isfinite(lv):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            adam_step(params, state, lr)
            total += lv * len(batch)
        mean_loss = total / n
        if test_samples is None:
            rows.append((epoch, lr, mean_loss))
        else:
            report = evaluate_dataset(
                _eval_forward(model, use_depth, four_channel, dtype), test_samples,
                beta2=beta2, f_mode=f_mode, threshold_scale=threshold_scale)
            rows.append((epoch, lr, mean_loss, report.mae, report.f_beta))
    return rows, state


def pretrain_master(cfg: TrainConfig, rgb_dataset: list[Sample],
                    master_config: MasterConfig | None = None,
                    dtype=DEFAULT_DTYPE):
    """Stage 1: trains the master alone on rgb+gt (depth ignored); the
    resulting weights are the prior."""
    cfg.validate()
    if not rgb_dataset:
        raise ConfigError("pretrain_master: empty dataset")
    mc = master_config or MasterConfig()
    if mc.input_channels != 3:
        raise ConfigError("the prior is pretrained on 3-channel RGB data")
    model = PDNet(mc, None, None, Rng(cfg.seed).child(0), dtype)
    rows, state = _run_epochs(model, cfg, rgb_dataset,
                              use_depth=False, four_channel=False)
    return model, rows, state


def train_pdnet(cfg: TrainConfig, split: DatasetSplit, variant: AblationVariant,
                fusion_mode: str = "gate",
                master_config: MasterConfig | None = None,
                subnet_config: SubNetConfig | None = None,
                prior_path=None, dtype=DEFAULT_DTYPE,
                beta2=0.3, f_mode="adaptive", threshold_scale=2.0):
    """Stage 2: builds the variant, optionally loads + freezes the prior
    encoder, and trains on the RGB-D split with a per-epoch test report."""
    cfg.validate()
    if not split.train:
        raise ConfigError("train_pdnet: empty training split")
    if variant.use_prior and prior_path is None:
        raise ConfigError(f"variant {variant.name} requires a prior checkpoint")
    if not variant.use_prior and prior_path is not None:
        raise ConfigError(f"variant {variant.name} does not take a prior checkpoint")

    mc = master_config or MasterConfig()
    if variant.input_channels != mc.input_channels:
        mc = replace(mc, input_channels=variant.input_channels)
    subnet = None
    fusion = None
    if variant.uses_subnet:
        subnet = subnet_config or SubNetConfig(
            stage_channels=mc.stage_channels,
            convs_per_block=mc.convs_per_block,
            fusion_stage=len(mc.stage_channels) - 1)
        fusion = FusionSpec(mode=fusion_mode, alpha=variant.alpha)

    model = PDNet(mc, subnet, fusion, Rng(cfg.seed).child(0), dtype)
    if prior_path is not None:
        load_prior(model, prior_path)
        freeze_prior(model)

    rows, state = _run_epochs(
        model, cfg, split.train,
        use_depth=variant.uses_subnet,
        four_channel=variant.input_channels == 4,
        test_samples=split.test,
        beta2=beta2, f_mode=f_mode, threshold_scale=threshold_scale)
    return model, rows, state


# ---------------------------------------------------------------------------
# CSV log writers


def write_train_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if rows and len(rows[0]) == 3:
            w.writerow(["epoch", "lr", "train_loss"])
        else:
            w.writerow(["epoch", "lr", "train_loss", "test_mae", "test_fbeta"])
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def write_runs_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "alpha", "fbeta", "mae", "seed"])
        for name, alpha, fbeta, mae_, seed in rows:
            w.writerow([name, "" if alpha is None else repr(float(alpha)),
                        repr(float(fbeta)), repr(float(mae_)), seed])


def write_summary_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "fbeta", "mae"])
        for name, fbeta, mae_ in rows:
            w.writerow([name, repr(float(fbeta)), repr(float(mae_))])


# ---------------------------------------------------------------------------
# Ablation harness


def _run_tag(name: str, alpha, seed: int) -> str:
    if alpha is None:
        return f"{name}_s{seed}"
    return f"{name}_a{alpha:g}_s{seed}"


def _ablation_task(args):
    (name, alpha, seed, cfg, split, mc, sc, fusion_mode, prior_path, out_dir,
     dtype_name, beta2, f_mode, threshold_scale) = args
    dtype = np.float64 if dtype_name == "f64" else np.float32
    variant = make_variant(name, alpha if alpha is not None else 1.0)
    run_cfg = replace(cfg, seed=seed)
    model, rows, _ = train_pdnet(
        run_cfg, split, variant, fusion_mode, mc, sc,
        prior_path=prior_path if variant.use_prior else None, dtype=dtype,
        beta2=beta2, f_mode=f_mode, threshold_scale=threshold_scale)
    tag = _run_tag(name, alpha, seed)
    save_checkpoint(model, os.path.join(out_dir, f"{tag}.pdnc"))
    write_train_log(rows, os.path.join(out_dir, f"{tag}_log.csv"))
    _, _, _, test_mae, test_fbeta = rows[-1]
    return (name, alpha, test_fbeta, test_mae, seed)


def run_ablation(cfg: TrainConfig, split: DatasetSplit, out_dir,
                 master_config: MasterConfig | None = None,
                 subnet_config: SubNetConfig | None = None,
                 fusion_mode: str = "gate",
                 seeds=(0,),
                 alphas_lt=(0.3, 0.5, 0.7, 0.9),
                 alphas_gt=(1.3, 1.5, 1.7, 1.9),
                 pretrain_dataset: list[Sample] | None = None,
                 pretrain_epochs: int = 15,
                 jobs: int = 1,
                 alpha_zero_smoke: bool = False,
                 dtype=DEFAULT_DTYPE,
                 beta2=0.3, f_mode="adaptive", threshold_scale=2.0):
    """Trains every table row: MNet, PNet, DNet(a=1), PDNet(a=1), and the two
    averaged alpha groups; returns (per-run rows, six-row summary).

    The prior is pretrained once per seed, on ``pretrain_dataset`` when
    given (a clear-RGB corpus standing in for large-scale RGB pretraining)
    and otherwise on the training split's RGB channels.
    """
    os.makedirs(out_dir, exist_ok=True)
    mc = master_config or MasterConfig()
    dtype_name = "f64" if np.dtype(dtype) == np.float64 else "f32"

    # stage 1 per seed
    prior_paths = {}
    for seed in seeds:
        pre_cfg = replace(cfg, seed=seed, epochs=pretrain_epochs)
        prior_data = pretrain_dataset if pretrain_dataset is not None else split.train
        prior, prows, _ = pretrain_master(pre_cfg, prior_data, mc, dtype)
        path = os.path.join(out_dir, f"prior_s{seed}.pdnc")
        save_checkpoint(prior, path)
        write_train_log(prows, os.path.join(out_dir, f"prior_s{seed}_log.csv"))
        prior_paths[seed] = path

    runs = [("MNet", None), ("PNet", None), ("DNet", 1.0), ("PDNet", 1.0)]
    runs += [("PDNet", a) for a in alphas_lt]
    runs += [("PDNet", a) for a in alphas_gt]
    if alpha_zero_smoke:
        runs.append(("PDNet", 0.0))

    tasks = [(name, alpha, seed, cfg, split, mc, subnet_config, fusion_mode,
              prior_paths[seed], out_dir, dtype_name, beta2, f_mode, threshold_scale)
             for seed in seeds for (name, alpha) in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_task, tasks))
    else:
        rows = [_ablation_task(t) for t in tasks]

    summary = summarize_ablation(rows, alphas_lt, alphas_gt)
    write_runs_csv(rows, os.path.join(out_dir, "ablation_runs.csv"))
    write_summary_csv(summary, os.path.join(out_dir, "ablation_summary.csv"))
    return rows, summary


# ---------------------------------------------------------------------------
# Depth-benefit trend benchmark: the designated RGB-ambiguous regime


def _bench_data(n_train: int, n_test: int, size: int):
    from .data import gen_sample, rgb_ambiguous_scene
    cfg = rgb_ambiguous_scene(size)
    train = [gen_sample(cfg, 90001 + i) for i in range(n_train)]
    test = [gen_sample(cfg, 90001 + n_train + i) for i in range(n_test)]
    return DatasetSplit(train=train, test=test)


def _bench_pretrain_data(n: int, size: int):
    from .data import clear_rgb_scene, gen_sample
    cfg = clear_rgb_scene(size)
    return [gen_sample(cfg, 91001 + i) for i in range(n)]


def _bench_prior_task(args):
    seed, n_pre, size, epochs, out_dir = args
    data = _bench_pretrain_data(n_pre, size)
    cfg = TrainConfig(epochs=epochs, seed=seed)
    model, rows, _ = pretrain_master(cfg, data)
    path = os.path.join(out_dir, f"prior_s{seed}.pdnc")
    save_checkpoint(model, path)
    write_train_log(rows, os.path.join(out_dir, f"prior_s{seed}_log.csv"))
    return path


def _bench_variant_task(args):
    name, seed, n_train, n_test, size, epochs, prior_path, out_dir = args
    split = _bench_data(n_train, n_test, size)
    variant = make_variant(name, 1.0)
    cfg = TrainConfig(epochs=epochs, seed=seed)
    model, rows, _ = train_pdnet(cfg, split, variant,
                                 prior_path=prior_path if variant.use_prior else None)
    tag = f"{name}_s{seed}"
    save_checkpoint(model, os.path.join(out_dir, f"{tag}.pdnc"))
    write_train_log(rows, os.path.join(out_dir, f"{tag}_log.csv"))
    _, _, _, test_mae, test_fbeta = rows[-1]
    return (name, seed, test_fbeta, test_mae)


def depth_benefit_benchmark(out_dir, seeds=(0, 1, 2), n_train=500, n_test=100,
                            size=64, pretrain_n=500, epochs=20, pretrain_epochs=15,
                            jobs=1):
    """Trains the four variants on the RGB-ambiguous benchmark and returns
    per-variant mean test metrics: {variant: (mean_fbeta, mean_mae)}.

    The prior is pretrained per seed on a clear-RGB corpus; workers
    regenerate the deterministic datasets themselves, so runs parallelize
    cleanly across processes.
    """
    os.makedirs(out_dir, exist_ok=True)
    prior_tasks = [(s, pretrain_n, size, pretrain_epochs, out_dir) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            priors = list(pool.map(_bench_prior_task, prior_tasks))
    else:
        priors = [_bench_prior_task(t) for t in prior_tasks]
    prior_by_seed = dict(zip(seeds, priors))

    tasks = [(name, seed, n_train, n_test, size, epochs, prior_by_seed[seed], out_dir)
             for seed in seeds for name in ("MNet", "PNet", "DNet", "PDNet")]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_bench_variant_task, tasks))
    else:
        rows = [_bench_variant_task(t) for t in tasks]

    means = {}
    for name in ("MNet", "PNet", "DNet", "PDNet"):
        sel = [(fb, ma) for (n, _, fb, ma) in rows if n == name]
        means[name] = (float(np.mean([fb for fb, _ in sel])),
                       float(np.mean([ma for _, ma in sel])))
    with open(os.path.join(out_dir, "trend_summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "fbeta", "mae"])
        for name, (fb, ma) in means.items():
            w.writerow([name, repr(fb), repr(ma)])
    return means, rows


def summarize_ablation(rows, alphas_lt=(0.3, 0.5, 0.7, 0.9), alphas_gt=(1.3, 1.5, 1.7, 1.9)):
    """Collapses per-run rows into the six-row table (alpha groups averaged)."""
    def collect(pred):
        sel = [(f, m) for (name, alpha, f, m, seed) in rows if pred(name, alpha)]
        if not sel:
            return None
        fb = float(np.mean([f for f, _ in sel]))
        ma = float(np.mean([m for _, m in sel]))
        return fb, ma

    out = []
    for label, pred in [
        ("MNet", lambda n, a: n == "MNet"),
        ("PNet", lambda n, a: n == "PNet"),
        ("DNet_alpha1", lambda n, a: n == "DNet"),
        ("PDNet_alpha1", lambda n, a: n == "PDNet" and a == 1.0),
        ("PDNet_alpha_lt1", lambda n, a: n == "PDNet" and a in alphas_lt),
        ("PDNet_alpha_gt1", lambda n, a: n == "PDNet" and a in alphas_gt),
    ]:
        got = collect(pred)
        if got is not None:
            out.append((label, got[0], got[1]))
    return out
