import numpy as np
import pytest

from pdnet.checkpoint import (CheckpointError, load_checkpoint, load_prior,
                              save_checkpoint)
from pdnet.model import FusionSpec, MasterConfig, PDNet, SubNetConfig, freeze_prior
from pdnet.tensor import Rng, Tensor

TINY = MasterConfig(stage_channels=(4, 8), convs_per_block=(1, 1), input_size=16)
TINY_SUB = SubNetConfig(stage_channels=(4, 8), convs_per_block=(1, 1), fusion_stage=1)


def _tiny_pdnet(seed=0, mode="gate"):
    return PDNet(TINY, TINY_SUB, FusionSpec(mode, 1.0), Rng(seed))


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        net = _tiny_pdnet(3)
        p1, p2 = tmp_path / "a.pdnc", tmp_path / "b.pdnc"
        save_checkpoint(net, p1)
        again = load_checkpoint(p1)
        save_checkpoint(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_and_configs_restored(self, tmp_path):
        net = _tiny_pdnet(7, mode="add")
        path = tmp_path / "m.pdnc"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.master_config == net.master_config
        assert back.subnet_config == net.subnet_config
        assert back.fusion == net.fusion
        for (n1, t1), (n2, t2) in zip(net.named_params(), back.named_params()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)

    def test_frozen_flags_survive(self, tmp_path):
        net = _tiny_pdnet(1)
        freeze_prior(net)
        path = tmp_path / "f.pdnc"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        for name, t in back.named_params():
            assert t.frozen == name.startswith("master.enc")

    def test_buffers_round_trip(self, tmp_path):
        net = _tiny_pdnet(2)
        # make running stats non-trivial
        rgb = Tensor(Rng(5).gen.random((2, 3, 16, 16), dtype=np.float32))
        dep = Tensor(Rng(6).gen.random((2, 1, 16, 16), dtype=np.float32))
        net.forward(rgb, dep, training=True)
        path = tmp_path / "b.pdnc"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        for (n1, l1, a1), (n2, l2, a2) in zip(net.named_buffers(), back.named_buffers()):
            assert n1 == n2
            assert np.array_equal(getattr(l1, a1), getattr(l2, a2))


class TestCorruption:
    def test_tampered_magic(self, tmp_path):
        net = _tiny_pdnet()
        path = tmp_path / "m.pdnc"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_tampered_version(self, tmp_path):
        net = _tiny_pdnet()
        path = tmp_path / "m.pdnc"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        net = _tiny_pdnet()
        path = tmp_path / "m.pdnc"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 7])
        with pytest.raises(CheckpointError, match="truncated|record"):
            load_checkpoint(path)


class TestPriorTransfer:
    def test_prior_initializes_master_keeps_subnet_fresh(self, tmp_path):
        prior = PDNet(TINY, None, None, Rng(11))
        path = tmp_path / "prior.pdnc"
        save_checkpoint(prior, path)

        net = _tiny_pdnet(22)
        fresh_subnet = {n: t.data.copy() for n, t in net.param_groups()["subnet"]}
        load_prior(net, path)
        prior_params = dict(prior.named_params())
        for name, t in net.named_params():
            if name.startswith("master."):
                assert np.array_equal(t.data, prior_params[name].data), name
            else:
                assert np.array_equal(t.data, fresh_subnet[name]), name

    def test_prior_must_be_master_only(self, tmp_path):
        not_prior = _tiny_pdnet(0)
        path = tmp_path / "x.pdnc"
        save_checkpoint(not_prior, path)
        with pytest.raises(CheckpointError, match="master-only"):
            load_prior(_tiny_pdnet(1), path)

    def test_incompatible_config_rejected(self, tmp_path):
        prior = PDNet(MasterConfig(stage_channels=(8, 16), convs_per_block=(1, 1),
                                   input_size=16), None, None, Rng(0))
        path = tmp_path / "p.pdnc"
        save_checkpoint(prior, path)
        with pytest.raises(CheckpointError, match="does not match"):
            load_prior(_tiny_pdnet(0), path)

    def test_concat_fusion_widened_decoder_stays_fresh(self, tmp_path):
        prior = PDNet(TINY, None, None, Rng(11))
        path = tmp_path / "prior.pdnc"
        save_checkpoint(prior, path)
        net = _tiny_pdnet(5, mode="concat")
        widened_before = {n: t.data.copy() for n, t in net.named_params()
                          if n.startswith("master.dec0.up")}
        load_prior(net, path)
        for n, t in net.named_params():
            if n.startswith("master.dec0.up"):
                assert np.array_equal(t.data, widened_before[n])
            elif n.startswith("master.enc"):
                assert np.array_equal(t.data, dict(prior.named_params())[n].data)
