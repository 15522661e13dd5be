"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 8 trains the full-scale depth-benefit benchmark (12 runs of 20
epochs plus 3 pretrains at 64x64) and dominates the suite's runtime; its
budget is two hours on a commodity CPU.
"""

import time

import numpy as np
import pytest

from pdnet.checkpoint import read_records, save_checkpoint
from pdnet.data import DatasetSplit, SceneConfig, gen_sample
from pdnet.metrics import f_measure_adaptive, mae, pr_curve
from pdnet.model import (FusionSpec, MasterConfig, PDNet, SubNetConfig,
                         bce_loss, freeze_prior)
from pdnet.tensor import Rng, Tensor
from pdnet.train import (TrainConfig, depth_benefit_benchmark, make_variant,
                         pretrain_master, run_ablation, train_pdnet)
from pdnet.verify import run_grad_suite
from tests.test_metrics import brute_force_pr
from tests.test_model import TINY, TINY_SUB, shape_walk_count


def _report(criterion, ok, detail=""):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    results = run_grad_suite(seeds=(0, 1))
    elapsed = time.perf_counter() - t0
    bad = [r for r in results if not r.ok]
    _report("1 (gradient integrity)",
            not bad and elapsed < 60.0,
            f"{len(results)} checks, {len(bad)} failing, {elapsed:.1f}s"
            + (f"; first failure {bad[0].name} err={bad[0].err:.2e}" if bad else ""))


def test_criterion_2_loss_oracles():
    gen = Rng(1002).gen
    worst = 0.0
    for _ in range(100):
        n, h, w = int(gen.integers(1, 3)), 4, 4
        s = gen.random((n, 1, h, w))
        g = (gen.random((n, 1, h, w)) > gen.random()).astype(np.float64)
        got = bce_loss(Tensor(s), Tensor(g)).item()
        p = np.clip(s, 1e-7, 1 - 1e-7)
        per_image = -(g * np.log(p) + (1 - g) * np.log(1 - p)).sum(axis=(1, 2, 3)) / (h * w)
        worst = max(worst, abs(got - per_image.mean()))
    s_half = Tensor(np.full((2, 1, 4, 4), 0.5))
    g_any = Tensor((gen.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    ln2_err = abs(bce_loss(s_half, g_any).item() - np.log(2.0))
    g_bin = (gen.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
    perfect = bce_loss(Tensor(np.clip(g_bin, 1e-7, 1 - 1e-7)), Tensor(g_bin)).item()
    _report("2 (loss oracles)",
            worst < 1e-6 and ln2_err < 1e-6 and perfect < 1e-6,
            f"oracle worst {worst:.2e}, ln2 err {ln2_err:.2e}, perfect {perfect:.2e}")


def test_criterion_3_metric_oracles():
    gen = Rng(1003).gen
    exact = True
    mono = True
    for _ in range(50):
        k = int(gen.integers(1, 4))
        preds = [gen.random((8, 8)) for _ in range(k)]
        masks = [(gen.random((8, 8)) > gen.random() * 0.8).astype(np.float64)
                 for _ in range(k)]
        if not any(m.sum() for m in masks):
            masks[0][0, 0] = 1.0
        got = pr_curve(preds, masks)
        exact &= np.array_equal(got, brute_force_pr(preds, masks))
        mono &= bool(np.all(np.diff(got[:, 1]) <= 0))
    worst_mae = worst_fb = 0.0
    for _ in range(50):
        s = gen.random((8, 8))
        g = (gen.random((8, 8)) > 0.6).astype(np.float64)
        if g.sum() == 0:
            g[0, 0] = 1.0
        worst_mae = max(worst_mae, abs(mae(s, g) - np.abs(s - g).mean()))
        t = min(2.0 * s.mean(), 1.0)
        pred = s > t
        tp = float((pred & (g > 0.5)).sum())
        p = tp / pred.sum() if pred.sum() else 0.0
        r = tp / g.sum()
        want = 0.0 if (p == 0 and r == 0) else 1.3 * p * r / (0.3 * p + r)
        worst_fb = max(worst_fb, abs(f_measure_adaptive(s, g) - want))
    _report("3 (metric oracles)",
            exact and mono and worst_mae < 1e-9 and worst_fb < 1e-9,
            f"pr exact={exact}, recall monotone={mono}, "
            f"mae err {worst_mae:.1e}, fbeta err {worst_fb:.1e}")


def test_criterion_4_architecture_invariants():
    ok = True
    details = []
    for convs in [(2, 2, 3, 3), (2, 2, 4, 4)]:
        mc = MasterConfig(convs_per_block=convs)
        net = PDNet(mc, SubNetConfig(convs_per_block=convs), FusionSpec("gate", 1.0), Rng(0))
        got = sum(t.data.size for _, t in net.named_params())
        want = shape_walk_count(mc, SubNetConfig(convs_per_block=convs))
        ok &= got == want
        details.append(f"params[{convs}]={got}")
    for size in (32, 64):
        net = PDNet(MasterConfig(input_size=size), SubNetConfig(),
                    FusionSpec("gate", 1.0), Rng(1))
        g = Rng(size).gen
        s, _ = net.forward(Tensor(g.random((1, 3, size, size), dtype=np.float32)),
                           Tensor(g.random((1, 1, size, size), dtype=np.float32)),
                           training=False)
        ok &= s.shape == (1, 1, size, size)
        ok &= bool(np.all((s.data > 0) & (s.data < 1)))
        details.append(f"res{size} ok")
    _report("4 (architecture invariants)", ok, ", ".join(details))


def test_criterion_5_alpha_off_equivalence():
    worst = 0.0
    for seed in range(20):
        mode = "gate" if seed % 2 == 0 else "add"
        full = PDNet(TINY, TINY_SUB, FusionSpec(mode, 0.0), Rng(seed))
        master = PDNet(TINY, None, None, Rng(seed))
        g = Rng(500 + seed).gen
        rgb = Tensor(g.random((1, 3, 16, 16), dtype=np.float32))
        dep = Tensor(g.random((1, 1, 16, 16), dtype=np.float32))
        s_full, _ = full.forward(rgb, dep, training=False)
        s_master, _ = master.forward(rgb, training=False)
        worst = max(worst, float(np.abs(s_full.data - s_master.data).max()))
    _report("5 (alpha-off equivalence)", worst < 1e-6, f"max |diff| = {worst:.2e}")


def test_criterion_6_freeze_contract(tmp_path):
    easy = SceneConfig(size=16, color_contrast=0.8, depth_contrast=0.8, noise_std=0.0)
    samples = [gen_sample(easy, 600 + i) for i in range(10)]
    split = DatasetSplit(train=samples[:8], test=samples[8:])
    prior, _, _ = pretrain_master(TrainConfig(epochs=2, seed=0), split.train, TINY)
    prior_path = tmp_path / "prior.pdnc"
    save_checkpoint(prior, prior_path)
    _, _, _, _, prior_records = read_records(prior_path)
    model, _, _ = train_pdnet(TrainConfig(epochs=3, seed=1), split,
                              make_variant("PDNet"), master_config=TINY,
                              subnet_config=TINY_SUB, prior_path=prior_path)
    ok = True
    count = 0
    for name, t in model.named_params():
        if name.startswith("master.enc"):
            ok &= np.array_equal(t.data, prior_records[name][0])
            count += 1
    for name, layer, attr in model.named_buffers():
        if name.startswith("master.enc"):
            got = getattr(layer, attr)
            ok &= np.array_equal(got, prior_records[name][0].reshape(got.shape))
            count += 1
    _report("6 (freeze contract)", ok and count > 0,
            f"{count} encoder tensors bit-identical to the prior")


def test_criterion_7_determinism(tmp_path):
    import os
    easy = SceneConfig(size=16, color_contrast=0.8, depth_contrast=0.8, noise_std=0.02)
    samples = [gen_sample(easy, 700 + i) for i in range(8)]
    split = DatasetSplit(train=samples[:6], test=samples[6:])
    dirs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        run_ablation(TrainConfig(epochs=1, seed=5), split, out,
                     master_config=TINY, subnet_config=TINY_SUB,
                     seeds=(0,), alphas_lt=(0.3,), alphas_gt=(1.5,),
                     pretrain_epochs=1)
        dirs.append(out)
    files = sorted(os.listdir(dirs[0]))
    ok = files == sorted(os.listdir(dirs[1])) and len(files) > 0
    for f in files:
        ok &= (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()
    _report("7 (determinism)", ok, f"{len(files)} artifacts byte-identical across reruns")


@pytest.mark.slow
def test_criterion_8_trend_reproduction(tmp_path):
    t0 = time.perf_counter()
    means, rows = depth_benefit_benchmark(tmp_path, seeds=(0, 1, 2), jobs=2)
    elapsed = time.perf_counter() - t0
    fb = {k: v[0] for k, v in means.items()}
    pd_ok = fb["PDNet"] >= max(fb.values()) - 0.02
    dn_ok = fb["DNet"] >= fb["MNet"]
    detail = (f"mean fbeta: MNet {fb['MNet']:.4f}, PNet {fb['PNet']:.4f}, "
              f"DNet {fb['DNet']:.4f}, PDNet {fb['PDNet']:.4f}; "
              f"{elapsed/60:.1f} min (budget 120)")
    _report("8 (trend reproduction)", pd_ok and dn_ok and elapsed < 7200, detail)


def test_criterion_9_alpha_sweep_shape(tmp_path):
    easy = SceneConfig(size=16, color_contrast=0.7, depth_contrast=0.7, noise_std=0.02)
    samples = [gen_sample(easy, 800 + i) for i in range(10)]
    split = DatasetSplit(train=samples[:8], test=samples[8:])
    rows, summary = run_ablation(
        TrainConfig(epochs=1, seed=0), split, tmp_path,
        master_config=TINY, subnet_config=TINY_SUB,
        seeds=(0,), pretrain_epochs=1)  # default alpha groups
    names = [r[0] for r in summary]
    want = ["MNet", "PNet", "DNet_alpha1", "PDNet_alpha1",
            "PDNet_alpha_lt1", "PDNet_alpha_gt1"]
    alphas_run = sorted({r[1] for r in rows if r[0] == "PDNet" and r[1] not in (None, 1.0)})
    ok = (names == want
          and alphas_run == [0.3, 0.5, 0.7, 0.9, 1.3, 1.5, 1.7, 1.9]
          and all(np.isfinite(r[1]) and np.isfinite(r[2]) for r in summary))
    _report("9 (alpha-sweep shape)", ok,
            f"rows: {names}; alphas: {alphas_run}")
