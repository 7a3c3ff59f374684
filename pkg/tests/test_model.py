"""Staged classifier: construction, forward contracts, freezing, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ueforge import autodiff as ad
from ueforge.autodiff import Tape, Tensor, no_grad
from ueforge.errors import FormatError, InputError, UsageError
from ueforge.model import (COMPONENTS, STAGE_NAMES, FreezeMask, StagedNet,
                           apply_freeze, aux_forward, forward, forward_from,
                           load_checkpoint, save_checkpoint, shallow_forward)


@pytest.fixture
def net():
    return StagedNet(seed=0)


class TestConstruction:
    def test_parameter_count_desk_scale(self, net):
        # stem + 4 stages x 2 convs + head, widths (8, 16, 32, 64)
        assert net.param_count() == 74308

    def test_parameter_names_cover_components(self, net):
        comps = {net.component_of(name) for name in net.params}
        assert comps == set(COMPONENTS)

    def test_biases_start_at_zero(self, net):
        for name, p in net.params.items():
            if name.endswith(".b"):
                assert not p.data.any()

    def test_same_seed_same_weights(self):
        a, b = StagedNet(seed=3), StagedNet(seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_different_weights(self):
        a, b = StagedNet(seed=3), StagedNet(seed=4)
        assert not np.array_equal(a.params["stem.w"].data, b.params["stem.w"].data)

    def test_aux_heads_do_not_shift_trunk_init(self):
        plain = StagedNet(seed=5)
        with_aux = StagedNet(seed=5, aux_stages=("S1", "S2"))
        for name in plain.params:
            np.testing.assert_array_equal(plain.params[name].data,
                                          with_aux.params[name].data)
        assert "aux.S1.w" in with_aux.params
        assert "aux.S1.w" not in plain.params

    def test_bad_aux_stage_rejected(self):
        with pytest.raises(InputError):
            StagedNet(aux_stages=("stem",))

    def test_bad_widths_rejected(self):
        with pytest.raises(InputError):
            StagedNet(widths=(8, 16, 32))


class TestForward:
    def test_logit_shape(self, net):
        x = Tensor(np.zeros((5, 1, 16, 16)))
        logits, taps = forward(net, x)
        assert logits.shape == (5, 4)
        assert taps is None

    def test_tap_shapes_halve_from_s2(self, net):
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 16, 16)))
        _, taps = forward(net, x, capture=True)
        assert taps["S1"].shape == (2, 8, 16, 16)
        assert taps["S2"].shape == (2, 16, 8, 8)
        assert taps["S3"].shape == (2, 32, 4, 4)
        assert taps["S4"].shape == (2, 64, 2, 2)

    def test_forward_from_matches_full_pass(self, net):
        x = Tensor(np.random.default_rng(1).uniform(0, 1, (3, 1, 16, 16)))
        logits, taps = forward(net, x, capture=True)
        for stage in STAGE_NAMES:
            resumed = forward_from(net, stage, taps[stage])
            np.testing.assert_allclose(resumed.data, logits.data, rtol=1e-12)

    def test_shallow_forward_stops_early(self, net):
        x = Tensor(np.random.default_rng(2).uniform(0, 1, (2, 1, 16, 16)))
        taps = shallow_forward(net, x, upto="S2")
        assert "S1" in taps and "S2" in taps
        assert "S3" not in taps

    def test_shallow_forward_matches_full(self, net):
        x = Tensor(np.random.default_rng(3).uniform(0, 1, (2, 1, 16, 16)))
        _, full = forward(net, x, capture=True)
        shallow = shallow_forward(net, x, upto="S1")
        np.testing.assert_array_equal(shallow["S1"].data, full["S1"].data)

    def test_aux_forward_shapes(self):
        net = StagedNet(seed=0, aux_stages=("S1", "S2"))
        x = Tensor(np.random.default_rng(4).uniform(0, 1, (3, 1, 16, 16)))
        _, taps = forward(net, x, capture=True)
        outs = aux_forward(net, taps)
        assert len(outs) == 2
        assert all(o.shape == (3, 4) for o in outs)

    def test_aux_forward_without_heads_rejected(self, net):
        x = Tensor(np.zeros((1, 1, 16, 16)))
        _, taps = forward(net, x, capture=True)
        with pytest.raises(UsageError):
            aux_forward(net, taps)

    def test_unknown_stage_rejected(self, net):
        with pytest.raises(InputError):
            shallow_forward(net, Tensor(np.zeros((1, 1, 16, 16))), upto="S9")

    def test_gradients_reach_every_main_param(self, net):
        x = Tensor(np.random.default_rng(5).uniform(0, 1, (4, 1, 16, 16)))
        labels = np.array([0, 1, 2, 3])
        with Tape():
            logits, _ = forward(net, x)
            ad.backward(ad.cross_entropy(logits, labels))
        for name, p in net.main_params().items():
            assert p.grad is not None, f"no gradient reached {name}"
            assert np.isfinite(p.grad).all()


class TestFreezeMask:
    def test_parse_and_str_roundtrip(self):
        mask = FreezeMask.parse("stem,S1")
        assert "stem" in mask and "S1" in mask and "S2" not in mask
        assert str(mask) == "stem,S1"

    def test_parse_empty_forms(self):
        for text in ("", "-", "none"):
            assert str(FreezeMask.parse(text)) == "-"

    def test_str_orders_by_component(self):
        assert str(FreezeMask.parse("S1,stem")) == "stem,S1"

    def test_unknown_component_rejected(self):
        with pytest.raises(InputError):
            FreezeMask.parse("stem,S7")

    @settings(max_examples=20, deadline=None)
    @given(st.sets(st.sampled_from(COMPONENTS)))
    def test_apply_freeze_partitions_params(self, frozen):
        net = StagedNet(seed=0)
        apply_freeze(net, FreezeMask(frozenset(frozen)))
        for name, p in net.params.items():
            comp = net.component_of(name)
            assert p.requires_grad == (comp not in frozen)

    def test_refreeze_reenables(self):
        net = StagedNet(seed=0)
        apply_freeze(net, FreezeMask.parse("stem,S1"))
        assert not net.params["stem.w"].requires_grad
        apply_freeze(net, FreezeMask())
        assert net.params["stem.w"].requires_grad

    def test_frozen_params_get_no_gradient(self):
        net = StagedNet(seed=0)
        apply_freeze(net, FreezeMask.parse("stem"))
        x = Tensor(np.random.default_rng(6).uniform(0, 1, (2, 1, 16, 16)))
        with Tape():
            logits, _ = forward(net, x)
            ad.backward(ad.cross_entropy(logits, np.array([0, 1])))
        assert net.params["stem.w"].grad is None
        assert net.params["S1.c1.w"].grad is not None


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, net, tmp_path):
        path = str(tmp_path / "net.uewt")
        save_checkpoint(net, path)
        other = StagedNet(seed=99)
        load_checkpoint(other, path)
        for name in net.main_params():
            np.testing.assert_array_equal(other.params[name].data,
                                          net.params[name].data)

    def test_aux_excluded_by_default(self, tmp_path):
        net = StagedNet(seed=0, aux_stages=("S1",))
        path = str(tmp_path / "net.uewt")
        save_checkpoint(net, path)
        plain = StagedNet(seed=1)
        load_checkpoint(plain, path)  # loads cleanly: no aux tensors inside
        for name in net.main_params():
            np.testing.assert_array_equal(plain.params[name].data,
                                          net.params[name].data)

    def test_aux_included_on_request(self, tmp_path):
        net = StagedNet(seed=0, aux_stages=("S1",))
        path = str(tmp_path / "net.uewt")
        save_checkpoint(net, path, include_aux=True)
        other = StagedNet(seed=2, aux_stages=("S1",))
        load_checkpoint(other, path)
        np.testing.assert_array_equal(other.params["aux.S1.w"].data,
                                      net.params["aux.S1.w"].data)

    def test_magic_checked(self, net, tmp_path):
        path = str(tmp_path / "bogus.uewt")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(net, path)

    def test_truncation_detected(self, net, tmp_path):
        path = str(tmp_path / "net.uewt")
        save_checkpoint(net, path)
        with open(path, "rb") as fh:
            payload = fh.read()
        cut = str(tmp_path / "cut.uewt")
        with open(cut, "wb") as fh:
            fh.write(payload[: len(payload) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(StagedNet(seed=0), cut)

    def test_shape_mismatch_rejected_without_mutation(self, net, tmp_path):
        path = str(tmp_path / "wide.uewt")
        wide = StagedNet(seed=0, widths=(16, 16, 32, 64))
        save_checkpoint(wide, path)
        target = StagedNet(seed=1)
        before = {k: v.data.copy() for k, v in target.params.items()}
        with pytest.raises(FormatError):
            load_checkpoint(target, path)
        for name in before:
            np.testing.assert_array_equal(target.params[name].data, before[name])

    def test_loaded_net_reproduces_outputs(self, net, tmp_path):
        x = Tensor(np.random.default_rng(7).uniform(0, 1, (2, 1, 16, 16)))
        with no_grad():
            want, _ = forward(net, x)
        path = str(tmp_path / "net.uewt")
        save_checkpoint(net, path)
        other = StagedNet(seed=123)
        load_checkpoint(other, path)
        with no_grad():
            got, _ = forward(other, x)
        np.testing.assert_array_equal(got.data, want.data)
