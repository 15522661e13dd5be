import numpy as np
import pytest

from pdnet import ops
from pdnet.model import (ConfigError, FusionSpec, MasterConfig, PDNet,
                         SubNetConfig, bce_loss, compute_alpha, freeze_prior,
                         fuse_features, total_loss)
from pdnet.optim import AdamState, adam_step
from pdnet.tensor import Rng, ShapeError, Tape, Tensor, backward

TINY = MasterConfig(stage_channels=(4, 8), convs_per_block=(1, 1), input_size=16)
TINY_SUB = SubNetConfig(stage_channels=(4, 8), convs_per_block=(1, 1), fusion_stage=1)


def shape_walk_count(mc: MasterConfig, sc: SubNetConfig | None = None,
                     concat_fusion: bool = False) -> int:
    """Independent parameter count from the declared layer shapes.

    Convs feeding a BatchNorm are bias-free; side heads, side upsamplers and
    the final head keep biases; upsampling tconvs are bias-free.
    """
    total = 0

    def conv(cin, cout, k, bias):
        return cout * cin * k * k + (cout if bias else 0)

    def bn(c):
        return 2 * c

    cin = mc.input_channels
    for c, n in zip(mc.stage_channels, mc.convs_per_block):
        for i in range(n):
            total += conv(cin if i == 0 else c, c, 3, bias=False) + bn(c)
        cin = c

    blocks = len(mc.stage_channels)
    extra = sc.stage_channels[sc.fusion_stage] if (sc and concat_fusion) else 0
    for i in reversed(range(blocks)):
        cskip = mc.stage_channels[i]
        cdeep = (mc.stage_channels[i] + extra) if i == blocks - 1 else mc.stage_channels[i + 1]
        total += cdeep * cskip * 2 * 2            # upsampling tconv, no bias
        total += conv(2 * cskip, cskip, 3, bias=False) + bn(cskip)
        if mc.side_outputs:
            total += conv(cskip, 1, 3, bias=True)  # side head
            f = 1 << i
            if f > 1:
                total += 1 * 1 * f * f + 1         # side upsampler tconv + bias
    final_in = blocks if mc.side_outputs else mc.stage_channels[0]
    total += conv(final_in, 1, 3, bias=True)

    if sc is not None:
        cin = sc.input_channels
        for i in range(sc.fusion_stage + 1):
            c = sc.stage_channels[i]
            for j in range(sc.convs_per_block[i]):
                total += conv(cin if j == 0 else c, c, 3, bias=False) + bn(c)
            cin = c
    return total


class TestBuildMaster:
    @pytest.mark.parametrize("convs", [(2, 2, 3, 3), (2, 2, 4, 4)])
    def test_param_count_matches_shape_walk(self, convs):
        mc = MasterConfig(convs_per_block=convs)
        net = PDNet(mc, None, None, Rng(0))
        got = sum(t.data.size for _, t in net.named_params())
        assert got == shape_walk_count(mc)

    def test_param_count_with_subnet(self):
        mc = MasterConfig()
        sc = SubNetConfig()
        net = PDNet(mc, sc, FusionSpec("gate", 1.0), Rng(0))
        got = sum(t.data.size for _, t in net.named_params())
        assert got == shape_walk_count(mc, sc)

    def test_param_count_concat_fusion(self):
        mc = MasterConfig()
        sc = SubNetConfig()
        net = PDNet(mc, sc, FusionSpec("concat", 1.0), Rng(0))
        got = sum(t.data.size for _, t in net.named_params())
        assert got == shape_walk_count(mc, sc, concat_fusion=True)

    def test_forward_on_zeros_in_unit_interval(self):
        net = PDNet(TINY, None, None, Rng(0))
        s, sides = net.forward(Tensor(np.zeros((1, 3, 16, 16), np.float32)), training=False)
        assert np.all(np.isfinite(s.data))
        assert np.all((s.data > 0) & (s.data < 1))

    @pytest.mark.parametrize("size", [32, 64])
    def test_resolution_preserved(self, size):
        net = PDNet(MasterConfig(input_size=size), SubNetConfig(),
                    FusionSpec("gate", 1.0), Rng(1))
        rgb = Tensor(Rng(2).gen.random((1, 3, size, size), dtype=np.float32))
        dep = Tensor(Rng(3).gen.random((1, 1, size, size), dtype=np.float32))
        s, sides = net.forward(rgb, dep, training=False)
        assert s.shape == (1, 1, size, size)
        assert np.all((s.data > 0) & (s.data < 1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            MasterConfig(input_channels=5).validate()
        with pytest.raises(ConfigError, match="power of two"):
            MasterConfig(input_size=48).validate()
        with pytest.raises(ConfigError, match="bottleneck"):
            MasterConfig(input_size=16).validate()  # 4 blocks need >= 32
        with pytest.raises(ConfigError):
            MasterConfig(convs_per_block=(2, 2)).validate()


class TestSubNet:
    def test_output_shape_default(self):
        net = PDNet(MasterConfig(), SubNetConfig(), FusionSpec("gate", 1.0), Rng(0))
        d = Tensor(Rng(1).gen.random((2, 1, 64, 64), dtype=np.float32))
        out = net.subnet.forward(d, training=False)
        assert out.shape == (2, 128, 4, 4)

    def test_zero_depth_constant_per_channel_at_init(self):
        # at init (biases absent, BN beta 0, eval stats fresh) a constant input
        # stays spatially constant through every conv/BN/relu/pool stage
        net = PDNet(MasterConfig(), SubNetConfig(), FusionSpec("gate", 1.0), Rng(0))
        d = Tensor(np.zeros((1, 1, 64, 64), np.float32))
        out = net.subnet.forward(d, training=False).data
        assert np.all(np.isfinite(out))
        spatial_spread = out.max(axis=(2, 3)) - out.min(axis=(2, 3))
        assert spatial_spread.max() < 1e-6

    def test_same_seed_identical_params(self):
        a = PDNet(MasterConfig(), SubNetConfig(), FusionSpec("gate", 1.0), Rng(5))
        b = PDNet(MasterConfig(), SubNetConfig(), FusionSpec("gate", 1.0), Rng(5))
        for (n1, t1), (n2, t2) in zip(a.named_params(), b.named_params()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

    def test_depth_range_contract(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(0))
        bad = Tensor(np.full((1, 1, 16, 16), 1.5, np.float32))
        with pytest.raises(ValueError, match="outside"):
            net.subnet.forward(bad, training=False)

    def test_channel_mismatch_rejected_for_gate(self):
        sc = SubNetConfig(stage_channels=(4, 4), convs_per_block=(1, 1), fusion_stage=1)
        with pytest.raises(ConfigError, match="matching channels"):
            PDNet(TINY, sc, FusionSpec("gate", 1.0), Rng(0))

    def test_concat_allows_mismatch_and_widens(self):
        sc = SubNetConfig(stage_channels=(4, 4), convs_per_block=(1, 1), fusion_stage=1)
        net = PDNet(TINY, sc, FusionSpec("concat", 1.0), Rng(0))
        rgb = Tensor(Rng(1).gen.random((1, 3, 16, 16), dtype=np.float32))
        dep = Tensor(Rng(2).gen.random((1, 1, 16, 16), dtype=np.float32))
        s, _ = net.forward(rgb, dep, training=False)
        assert s.shape == (1, 1, 16, 16)


class TestFusion:
    def test_alpha_zero_identity(self):
        g = Rng(0).gen
        a = Tensor(g.standard_normal((1, 4, 2, 2)).astype(np.float32))
        b = Tensor(g.standard_normal((1, 4, 2, 2)).astype(np.float32))
        for mode in ("gate", "add"):
            out = fuse_features(a, b, FusionSpec(mode, 0.0))
            assert np.array_equal(out.data, a.data)

    def test_gate_all_twos(self):
        ones = Tensor(np.ones((1, 2, 2, 2), np.float32))
        out = fuse_features(ones, Tensor(np.ones((1, 2, 2, 2), np.float32)),
                            FusionSpec("gate", 1.0))
        assert np.all(out.data == 2.0)

    def test_concat_channel_arithmetic(self):
        g = Rng(0).gen
        a = Tensor(g.random((1, 128, 4, 4), dtype=np.float32))
        b = Tensor(g.random((1, 128, 4, 4), dtype=np.float32))
        out = fuse_features(a, b, FusionSpec("concat", 0.5))
        assert out.shape == (1, 256, 4, 4)
        assert np.allclose(out.data[:, 128:], 0.5 * b.data)

    def test_compute_alpha(self):
        assert compute_alpha(128, 128) == 1.0
        assert compute_alpha(64, 128) == 0.5
        mc, sc = MasterConfig(), SubNetConfig()
        assert compute_alpha(sc.stage_channels[sc.fusion_stage],
                             mc.stage_channels[sc.fusion_stage]) == 1.0

    def test_fusion_spec_validation(self):
        with pytest.raises(ConfigError):
            FusionSpec("blend", 1.0).validate()
        with pytest.raises(ConfigError):
            FusionSpec("gate", -0.5).validate()


class TestForwardPDNet:
    def test_alpha_off_equals_master_only(self):
        full = PDNet(TINY, TINY_SUB, FusionSpec("gate", 0.0), Rng(4))
        master = PDNet(TINY, None, None, Rng(4))
        g = Rng(9).gen
        rgb = Tensor(g.random((2, 3, 16, 16), dtype=np.float32))
        dep = Tensor(g.random((2, 1, 16, 16), dtype=np.float32))
        s_full, _ = full.forward(rgb, dep, training=False)
        s_master, _ = master.forward(rgb, training=False)
        assert np.abs(s_full.data - s_master.data).max() < 1e-6

    def test_depth_absent_skips_fusion(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(4))
        master = PDNet(TINY, None, None, Rng(4))
        rgb = Tensor(Rng(9).gen.random((1, 3, 16, 16), dtype=np.float32))
        s_no_depth, _ = net.forward(rgb, None, training=False)
        s_master, _ = master.forward(rgb, training=False)
        assert np.abs(s_no_depth.data - s_master.data).max() < 1e-6

    def test_depth_without_subnet_error(self):
        net = PDNet(TINY, None, None, Rng(0))
        rgb = Tensor(np.zeros((1, 3, 16, 16), np.float32))
        dep = Tensor(np.zeros((1, 1, 16, 16), np.float32))
        with pytest.raises(ShapeError, match="no subnet"):
            net.forward(rgb, dep)

    def test_resolution_mismatch_error(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(0))
        rgb = Tensor(np.zeros((1, 3, 16, 16), np.float32))
        dep = Tensor(np.zeros((1, 1, 32, 32), np.float32))
        with pytest.raises(ShapeError, match="resolution"):
            net.forward(rgb, dep)

    def test_identical_batch_rows_identical_in_eval(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(0))
        g = Rng(2).gen
        one_rgb = g.random((1, 3, 16, 16), dtype=np.float32)
        one_dep = g.random((1, 1, 16, 16), dtype=np.float32)
        rgb = Tensor(np.concatenate([one_rgb, one_rgb]))
        dep = Tensor(np.concatenate([one_dep, one_dep]))
        s, _ = net.forward(rgb, dep, training=False)
        assert np.array_equal(s.data[0], s.data[1])


class TestLosses:
    def test_half_gives_ln2(self):
        s = Tensor(np.full((2, 1, 4, 4), 0.5, np.float32))
        g = Tensor((Rng(0).gen.random((2, 1, 4, 4)) > 0.5).astype(np.float32))
        assert bce_loss(s, g).item() == pytest.approx(np.log(2.0), abs=1e-6)

    def test_perfect_prediction_near_zero(self):
        g = (Rng(1).gen.random((1, 1, 8, 8)) > 0.5).astype(np.float32)
        s = Tensor(np.clip(g, 1e-7, 1 - 1e-7))
        assert bce_loss(s, Tensor(g)).item() < 1e-6

    def test_matches_direct_oracle(self):
        gen = Rng(2).gen
        for _ in range(20):
            s = gen.random((2, 1, 4, 4))
            g = (gen.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
            got = bce_loss(Tensor(s), Tensor(g)).item()
            p = np.clip(s, 1e-7, 1 - 1e-7)
            want = 0.0
            for n in range(2):
                want += -(g[n] * np.log(p[n]) + (1 - g[n]) * np.log(1 - p[n])).sum() / 16.0
            want /= 2
            assert got == pytest.approx(want, abs=1e-6)

    def test_loss_nonnegative(self):
        gen = Rng(3).gen
        for _ in range(10):
            s = Tensor(gen.random((1, 1, 4, 4)))
            g = Tensor((gen.random((1, 1, 4, 4)) > 0.3).astype(np.float64))
            assert bce_loss(s, g).item() >= 0.0

    def test_non_binary_mask_rejected(self):
        s = Tensor(np.full((1, 1, 2, 2), 0.5, np.float32))
        with pytest.raises(ValueError, match="binary"):
            bce_loss(s, Tensor(np.full((1, 1, 2, 2), 0.5, np.float32)))

    def test_total_loss_side_weight_zero(self):
        gen = Rng(4).gen
        s = Tensor(gen.random((1, 1, 4, 4), dtype=np.float32))
        g = Tensor((gen.random((1, 1, 4, 4)) > 0.5).astype(np.float32))
        sides = [Tensor(gen.standard_normal((1, 1, 4, 4)).astype(np.float32))]
        assert total_loss(s, sides, g, 0.0).item() == bce_loss(s, g).item()

    def test_total_loss_perfect_everything(self):
        g = (Rng(5).gen.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
        s = Tensor(np.clip(g, 1e-7, 1 - 1e-7))
        sides = [Tensor(np.where(g > 0.5, 50.0, -50.0).astype(np.float32))
                 for _ in range(3)]
        assert total_loss(s, sides, Tensor(g), 0.5).item() < 1e-6

    def test_total_loss_matches_hand_sum(self):
        gen = Rng(6).gen
        s = Tensor(gen.random((1, 1, 4, 4), dtype=np.float32))
        g = Tensor((gen.random((1, 1, 4, 4)) > 0.5).astype(np.float32))
        sides = [Tensor(gen.standard_normal((1, 1, 4, 4)).astype(np.float32))
                 for _ in range(2)]
        got = total_loss(s, sides, g, 0.7).item()
        want = bce_loss(s, g).item() + 0.7 * np.mean(
            [bce_loss(ops.sigmoid(raw), g).item() for raw in sides])
        assert got == pytest.approx(want, abs=1e-6)


class TestFreeze:
    def _one_step(self, net):
        params = list(net.named_params())
        g = Rng(8).gen
        rgb = Tensor(g.random((2, 3, 16, 16), dtype=np.float32))
        dep = Tensor(g.random((2, 1, 16, 16), dtype=np.float32))
        gt = Tensor((g.random((2, 1, 16, 16)) > 0.5).astype(np.float32))
        net.zero_grads()
        with Tape() as tape:
            s, sides = net.forward(rgb, dep, training=True)
            backward(total_loss(s, sides, gt, 0.5), tape)
        adam_step(params, AdamState(), 1e-3)

    def test_encoder_frozen_decoder_trains(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(0))
        freeze_prior(net)
        groups = net.param_groups()
        enc_before = {n: t.data.copy() for n, t in groups["master_encoder"]}
        dec_before = {n: t.data.copy() for n, t in groups["master_decoder"]}
        self._one_step(net)
        for n, t in groups["master_encoder"]:
            assert np.array_equal(t.data, enc_before[n]), n
        changed = any(not np.array_equal(t.data, dec_before[n])
                      for n, t in groups["master_decoder"])
        assert changed

    def test_freeze_flags_exactly_encoder(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(0))
        freeze_prior(net)
        for name, t in net.named_params():
            assert t.frozen == name.startswith("master.enc"), name

    def test_idempotent(self):
        net = PDNet(TINY, TINY_SUB, FusionSpec("gate", 1.0), Rng(0))
        freeze_prior(net)
        first = [(n, t.frozen) for n, t in net.named_params()]
        freeze_prior(net)
        assert first == [(n, t.frozen) for n, t in net.named_params()]

    def test_frozen_count_matches_shape_walk(self):
        mc = MasterConfig()
        net = PDNet(mc, None, None, Rng(0))
        freeze_prior(net)
        frozen = sum(t.data.size for _, t in net.named_params() if t.frozen)
        enc_only = 0
        cin = mc.input_channels
        for c, n in zip(mc.stage_channels, mc.convs_per_block):
            for i in range(n):
                enc_only += c * (cin if i == 0 else c) * 9 + 2 * c
            cin = c
        assert frozen == enc_only
