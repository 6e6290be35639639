"""Quantization, memory accounting, and the deployment cost model."""

import numpy as np
import pytest

from edgeai.deploy import (LinkSpec, RPI_LINK, compare_reports, count_flops_trunk,
                           dequantize, make_devices, memory_footprint, plan_layer_split,
                           plan_nonn, plan_single, quantize, simple_footprint, simulate)
from edgeai.fan import Partition
from edgeai.nonn import NoNNHyper, TrunkTemplate, build_nonn
from edgeai.zoo import (WrnConfig, build_model, conv_activation_sizes, conv_trunk_spec,
                        count_flops, count_params, wrn_spec)


@pytest.fixture(scope="module")
def student_spec():
    return conv_trunk_spec([8, 16], [2, 2], 3, (3, 16, 16))


@pytest.fixture(scope="module")
def nonn():
    teacher = build_model(conv_trunk_spec([8, 12], [2, 2], 3, (3, 16, 16)), seed=0)
    part = Partition([[0, 1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11]], 0.0)
    return build_nonn(teacher, part, NoNNHyper(TrunkTemplate((8,), (2,))), seed=0)


class TestQuantize:
    def test_unit_range_bound(self):
        x = np.array([-1.0, 0.0, 1.0])
        q, scale = quantize(x, 8)
        assert scale == pytest.approx(1.0 / 127)
        assert np.abs(dequantize(q, scale) - x).max() <= (1.0 / 127) / 2 + 1e-12

    def test_all_zero_exact(self):
        q, scale = quantize(np.zeros(5), 8)
        assert scale == 1.0
        assert np.array_equal(dequantize(q, scale), np.zeros(5))

    def test_round_trip_error_within_half_scale_100_seeds(self):
        for seed in range(100):
            x = np.random.default_rng(seed).standard_normal(64) * (seed + 1)
            for bits in (8, 16):
                q, scale = quantize(x, bits)
                assert np.abs(dequantize(q, scale) - x).max() <= scale / 2 + 1e-12

    def test_invalid_bits(self):
        with pytest.raises(ValueError):
            quantize(np.ones(3), 4)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            quantize(np.array([1.0, np.inf]))


class TestMemoryFootprint:
    def test_430k_fits_500kb_but_teacher_does_not(self):
        assert simple_footprint(430_000, 8) <= 500_000
        assert simple_footprint(8_900_000, 8) > 500_000

    def test_zero_params_overhead_only(self):
        assert memory_footprint([0], 8) == 4
        assert memory_footprint([], 8) == 0

    def test_bits_scaling(self):
        assert memory_footprint([1000], 16) == 2000 + 4
        assert memory_footprint([1000, 1000], 8) == 2008


class TestPlans:
    def test_single_device_feasibility(self, student_spec):
        dev = make_devices(1)[0]
        plan = plan_single(student_spec, dev)
        assert plan.feasible
        assert plan.total_transfer_elements() == 0
        big = plan_single(wrn_spec(WrnConfig(40, 4)), dev)
        assert not big.feasible
        assert "B >" in big.violation

    def test_layer_split_transfer_closed_form(self, student_spec):
        sizes = conv_activation_sizes(student_spec)
        for d in (2, 4):
            plan = plan_layer_split(student_spec, d, make_devices(d))
            assert plan.total_transfer_elements() == (d - 1) * sum(sizes)
            assert plan.total_messages() == d * (d - 1) * len(sizes)

    def test_layer_split_d1_degenerates(self, student_spec):
        plan = plan_layer_split(student_spec, 1, make_devices(1))
        assert plan.total_transfer_elements() == 0
        assert plan.total_messages() == 0

    def test_boundary_example(self):
        # a 64-channel 8x8 boundary moves (d-1)*4096 elements
        spec = conv_trunk_spec([64], [1], 2, (3, 8, 8))
        plan2 = plan_layer_split(spec, 2, make_devices(2))
        assert plan2.stages[0].transfer_elements == 4096
        plan4 = plan_layer_split(spec, 4, make_devices(4))
        assert plan4.stages[0].transfer_elements == 12288

    def test_nonn_single_exchange(self, nonn):
        plan = plan_nonn(nonn, make_devices(2), aggregator=1)
        assert plan.total_transfer_elements() == nonn.feature_widths[0]
        assert plan.total_messages() == nonn.k - 1
        # no transfer happens before the final feature exchange
        assert all(s.transfer_elements == 0 for s in plan.stages[1:])

    def test_flops_conserved(self, nonn, student_spec):
        dev = make_devices(4)
        total = count_flops(student_spec)
        for plan in (plan_single(student_spec, dev[0]),
                     plan_layer_split(student_spec, 2, dev),
                     plan_layer_split(student_spec, 4, dev)):
            got = sum(sum(s.flops_per_device.values()) for s in plan.stages)
            assert got == pytest.approx(total, rel=1e-12)
        plan = plan_nonn(nonn, dev)
        got = sum(sum(s.flops_per_device.values()) for s in plan.stages)
        expected = sum(count_flops_trunk(nonn, s) for s in range(nonn.k)) \
            + 2 * nonn.head_w.size
        assert got == pytest.approx(expected, rel=1e-12)

    def test_device_count_validation(self, student_spec, nonn):
        with pytest.raises(ValueError):
            plan_layer_split(student_spec, 3, make_devices(2))
        with pytest.raises(ValueError):
            plan_nonn(nonn, make_devices(1))


class TestSimulate:
    def test_single_latency_closed_form(self, student_spec):
        dev = make_devices(1)[0]
        report = simulate(plan_single(student_spec, dev), [dev], RPI_LINK)
        assert report.latency_s == pytest.approx(
            count_flops(student_spec) / dev.flops_per_second, rel=1e-12)
        assert report.traffic_bytes == 0

    def test_layer_split_traffic_closed_form(self, student_spec):
        d = 2
        devices = make_devices(d)
        report = simulate(plan_layer_split(student_spec, d, devices), devices, RPI_LINK)
        expected = sum((d - 1) * a for a in conv_activation_sizes(student_spec)) * 8 / 8
        assert report.traffic_bytes == pytest.approx(expected, rel=1e-12)

    def test_pure_function(self, student_spec):
        devices = make_devices(2)
        a = simulate(plan_layer_split(student_spec, 2, devices), devices, RPI_LINK)
        b = simulate(plan_layer_split(student_spec, 2, devices), devices, RPI_LINK)
        assert a == b

    def test_bandwidth_monotonicity(self, student_spec):
        devices = make_devices(2)
        plan = plan_layer_split(student_spec, 2, devices)
        slow = simulate(plan, devices, LinkSpec(1e5, 1e-3, 1e-7))
        fast = simulate(plan, devices, LinkSpec(1e7, 1e-3, 1e-7))
        assert fast.latency_s < slow.latency_s

    def test_traffic_monotone_in_d(self, student_spec):
        devices = make_devices(4)
        t = [simulate(plan_layer_split(student_spec, d, devices), devices,
                      RPI_LINK).traffic_bytes for d in (1, 2, 3, 4)]
        assert t == sorted(t)

    def test_infeasible_plan_rejected(self):
        dev = make_devices(1)[0]
        plan = plan_single(wrn_spec(WrnConfig(40, 4)), dev)
        with pytest.raises(ValueError, match="infeasible"):
            simulate(plan, [dev], RPI_LINK)


class TestCompare:
    def test_identical_reports_unit_ratios(self, student_spec):
        dev = make_devices(1)[0]
        r = simulate(plan_single(student_spec, dev), [dev], RPI_LINK)
        rows = compare_reports([r, r], baseline=r.plan)
        for row in rows:
            for key in ("memory_gain", "flops_gain", "latency_gain", "energy_gain"):
                assert row[key] == pytest.approx(1.0)

    def test_paper_config_gain_ratios(self):
        teacher = count_params(wrn_spec(WrnConfig(40, 4)))
        student_total = 2 * 430_000
        assert abs(teacher / student_total - 20.7 / 2) / (20.7 / 2) < 0.1
        teacher_flops = count_flops(wrn_spec(WrnConfig(40, 4)))
        assert abs(teacher_flops / 167e6 - 15.5) / 15.5 < 0.25

    def test_needs_two_reports(self, student_spec):
        dev = make_devices(1)[0]
        r = simulate(plan_single(student_spec, dev), [dev], RPI_LINK)
        with pytest.raises(ValueError):
            compare_reports([r], baseline=r.plan)
