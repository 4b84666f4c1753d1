"""Architecture builders, expansion oracle, and cost accounting."""

import numpy as np
import numpy.testing as npt
import pytest

from conftest import build_seeded, small_r2_spec, small_r3_spec
from rcnet.autodiff import Tape, backward
from rcnet import functional as F
from rcnet.networks import NetworkSpec, cost_report, expand_to_standard


def paper_r2_spec(n, bn_mode="independent"):
    return NetworkSpec(arch="r2", task="classify", bn_mode=bn_mode,
                       max_step=n, widths=(64, 256),
                       image_shape=(3, 32, 32), num_classes=10)


def r4_spec(n=3, bn_mode="double_independent", classes=100):
    return NetworkSpec(arch="r4", task="classify", bn_mode=bn_mode,
                       max_step=n, widths=(64, 128, 256, 512),
                       image_shape=(3, 32, 32), num_classes=classes)


class TestSpecValidation:
    def test_r2_width_must_quadruple(self):
        with pytest.raises(ValueError, match="quadruples"):
            NetworkSpec(arch="r2", task="classify", bn_mode="independent",
                        max_step=2, widths=(64, 128),
                        image_shape=(3, 32, 32), num_classes=10)

    def test_task_follows_arch(self):
        with pytest.raises(ValueError, match="implies task"):
            NetworkSpec(arch="r3", task="classify", bn_mode="independent",
                        max_step=2, widths=(8, 8, 8), image_shape=(1, 16, 16),
                        num_classes=3)

    def test_spec_dict_roundtrip(self):
        spec = paper_r2_spec(3)
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


class TestClassifierR2Accounting:
    def test_depth_column(self):
        assert [cost_report(paper_r2_spec(n)).unrolled_depth
                for n in (1, 2, 3, 4)] == [6, 10, 14, 18]

    def test_total_params_near_reported(self):
        total = cost_report(paper_r2_spec(4)).total_params
        assert abs(total - 1_263_000) / 1_263_000 < 0.05

    def test_conv_params_constant_in_n(self):
        convs = {cost_report(paper_r2_spec(n)).conv_params for n in (1, 4)}
        assert len(convs) == 1

    def test_report_matches_instantiated_network(self):
        for spec in (paper_r2_spec(2), small_r2_spec("double_independent"),
                     small_r3_spec(), r4_spec(2)):
            rep = cost_report(spec)
            net = build_seeded(spec)
            assert rep.total_params == sum(p.size for p in net.parameters())
            assert rep.total_params == (rep.conv_params + rep.bn_params
                                        + rep.other_params)

    def test_bn_param_formulas(self):
        # independent bank: 2*C*m*k learned scalars per cell
        rep1 = cost_report(paper_r2_spec(1))
        rep4 = cost_report(paper_r2_spec(4))
        assert rep4.bn_params - rep1.bn_params == 3 * 2 * 2 * (64 + 256)
        # double-independent: lower-triangle count, e.g. 2*64*10*2 = 2560
        di = NetworkSpec(arch="r2", task="classify",
                         bn_mode="double_independent", max_step=4,
                         widths=(64, 256), image_shape=(3, 32, 32),
                         num_classes=10)
        indep_cell1 = 2 * 64 * 4 * 2
        di_cell1 = 2 * 64 * 10 * 2
        assert di_cell1 == 2560
        delta = cost_report(di).bn_params - rep4.bn_params
        # cells move from m to m(m+1)/2 addresses; the head gains m-1 groups
        want = (di_cell1 - indep_cell1) + (2 * 256 * 10 * 2 - 2 * 256 * 4 * 2) \
            + 3 * 2 * 256
        assert delta == want

    def test_flops_strictly_increasing_and_frozen_values(self):
        rep = cost_report(paper_r2_spec(4))
        flops = [rep.flops_per_step[s] for s in (1, 2, 3, 4)]
        assert flops == sorted(flops) and len(set(flops)) == 4
        # independent oracle: per-layer MACs summed by hand
        assert flops == [152_766_976, 190_515_712, 341_510_656, 379_259_392]

    def test_purity_under_serialization(self):
        spec = paper_r2_spec(3)
        again = NetworkSpec.from_dict(spec.to_dict())
        assert cost_report(spec) == cost_report(again)


class TestR4Accounting:
    def test_depth_34_at_n3(self):
        assert cost_report(r4_spec(3)).unrolled_depth == 34

    def test_params_near_reported_and_constant_in_n(self):
        totals = [cost_report(r4_spec(n)).total_params for n in (1, 2, 3)]
        convs = {cost_report(r4_spec(n)).conv_params for n in (1, 2, 3)}
        assert len(convs) == 1                      # weight sharing
        assert abs(totals[2] - 11_250_000) / 11_250_000 < 0.05

    def test_n1_banks_degenerate(self):
        net = build_seeded(r4_spec(1))
        for cell in net.cells().values():
            assert cell.bank.n_addresses == 1

    def test_forward_and_expansion_small(self, rng):
        spec = NetworkSpec(arch="r4", task="classify",
                           bn_mode="double_independent", max_step=2,
                           widths=(4, 8, 16, 32), image_shape=(3, 16, 16),
                           num_classes=5)
        net = build_seeded(spec, seed=3)
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        for s in (1, 2):
            y = net.forward(x, s, training=False, update_stats=False)
            assert y.shape == (2, 5)
            exp = expand_to_standard(net, s)
            z = exp.forward(x, training=False)
            npt.assert_allclose(y.data, z.data, atol=1e-5, rtol=0)


class TestExpansion:
    def test_s1_structurally_identical(self):
        spec = small_r2_spec(max_step=1)
        net = build_seeded(spec)
        exp = expand_to_standard(net, 1)
        a = sum(p.size for p in net.parameters())
        b = sum(p.size for p in exp.parameters())
        assert a == b

    def test_expanded_param_count_near_s2n4(self):
        net = build_seeded(paper_r2_spec(4))
        exp = expand_to_standard(net, 4)
        total = sum(p.size for p in exp.parameters())
        assert abs(total - 5_023_000) / 5_023_000 < 0.05

    def test_values_copied_not_aliased(self):
        net = build_seeded(small_r2_spec(max_step=2))
        exp = expand_to_standard(net, 2)
        name, p = next(iter(exp.named_parameters().items()))
        before = net.named_parameters()["stem.weight"].data.copy()
        for q in exp.named_parameters().values():
            q.data[...] = 123.0
        npt.assert_array_equal(net.named_parameters()["stem.weight"].data,
                               before)

    def test_shared_and_none_modes_rejected(self):
        for mode in ("shared", "none"):
            net = build_seeded(small_r2_spec(bn_mode=mode))
            with pytest.raises(ValueError, match="cannot be expanded"):
                expand_to_standard(net, 1)

    def test_backward_equivalence_double_precision(self, rng):
        spec = small_r2_spec(max_step=3, precision="float64")
        net = build_seeded(spec, seed=5)
        x = rng.standard_normal((4, 3, 8, 8))
        labels = rng.integers(0, 3, 4)
        for s in (1, 2, 3):
            exp = expand_to_standard(net, s)
            for p in net.parameters():
                p.grad[...] = 0.0
            with Tape() as tape:
                loss = F.softmax_cross_entropy(
                    net.forward(x, s, training=True, update_stats=False),
                    labels)
            backward(tape, loss)
            with Tape() as tape:
                loss2 = F.softmax_cross_entropy(
                    exp.forward(x, training=True, update_stats=False), labels)
            backward(tape, loss2)
            npt.assert_allclose(float(loss.data), float(loss2.data),
                                atol=1e-12)
            eparams = exp.named_parameters()
            for cell_name, mod in net.modules:
                if not mod.recurrent:
                    continue
                for q, w in enumerate(mod.cell.body.convs):
                    summed = sum(
                        eparams[f"{cell_name}.depth{j}.conv{q}.weight"].grad
                        for j in range(1, s + 1))
                    npt.assert_allclose(w.grad, summed, atol=1e-10, rtol=0)


class TestDenoiserR3:
    def test_zeroed_head_residual_identity(self, rng):
        net = build_seeded(small_r3_spec())
        params = net.named_parameters()
        params["head.weight"].data[...] = 0.0
        params["head.bias"].data[...] = 0.0
        x = (rng.standard_normal((2, 1, 16, 16)) * 25 + 128) \
            .astype(np.float32)
        y = net.forward(x, 2, training=False, update_stats=False)
        npt.assert_array_equal(y.data, x)

    def test_depth_is_3n_plus_2(self):
        for n in (1, 2, 4):
            spec = small_r3_spec(max_step=n)
            assert cost_report(spec).unrolled_depth == 3 * n + 2

    def test_output_shape_matches_input(self, rng):
        net = build_seeded(small_r3_spec())
        x = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
        assert net.forward(x, 1, training=False).shape == x.shape
