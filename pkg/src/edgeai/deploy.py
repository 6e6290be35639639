"""Analytic simulator for distributed CNN inference on memory-constrained
devices: quantized memory accounting, placement plans (single device,
horizontal layer-split, NoNN), and layer-synchronous latency/energy/traffic
estimates."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .nonn import NoNNModel
from .zoo import Conv, Dense, ModelSpec, Residual, count_flops, count_params


@dataclass
class DeviceSpec:
    id: str
    memory_bytes: int
    flops_per_second: float
    joules_per_flop: float

    def validate(self):
        if self.memory_bytes <= 0 or self.flops_per_second <= 0 or self.joules_per_flop <= 0:
            raise ValueError(f"device {self.id}: all fields must be positive")


@dataclass
class LinkSpec:
    bandwidth_bytes_per_second: float
    per_message_latency_s: float
    joules_per_byte: float

    def validate(self):
        if self.bandwidth_bytes_per_second <= 0:
            raise ValueError("bandwidth must be positive")


# Raspberry-Pi-like profile, frozen for the shipped comparisons.
RPI_DEVICE = dict(memory_bytes=500_000, flops_per_second=1e9, joules_per_flop=2e-9)
RPI_LINK = LinkSpec(bandwidth_bytes_per_second=1e6, per_message_latency_s=1e-3,
                    joules_per_byte=1e-7)


def make_devices(n: int, **overrides) -> list[DeviceSpec]:
    cfg = dict(RPI_DEVICE)
    cfg.update(overrides)
    return [DeviceSpec(id=f"dev{i}", **cfg) for i in range(n)]


# ---------------------------------------------------------------------------
# quantization and memory accounting


def quantize(x: np.ndarray, bits: int = 8):
    """Symmetric per-tensor quantization; returns (int array, scale)."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.abs(x).max()) if x.size else 0.0
    scale = amax / qmax if amax > 0 else 1.0
    dtype = np.int8 if bits == 8 else np.int16
    q = np.clip(np.round(x / scale), -qmax, qmax).astype(dtype)
    return q, scale


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


PER_TENSOR_SCALE_BYTES = 4


def memory_footprint(param_counts: list[int], bits: int = 8) -> int:
    """Bytes for a parameter group at the given width, plus one 4-byte scale
    per tensor."""
    return sum(int(np.ceil(c * bits / 8)) for c in param_counts) + \
        PER_TENSOR_SCALE_BYTES * len(param_counts)


def simple_footprint(num_params: int, bits: int = 8) -> int:
    return memory_footprint([num_params], bits)


# ---------------------------------------------------------------------------
# plans


@dataclass
class Stage:
    """One synchronous step: per-device FLOPs, then a transfer barrier."""
    flops_per_device: dict[str, float]
    transfer_elements: int
    messages: int


@dataclass
class DeploymentPlan:
    strategy: str                      # single | layer-split | nonn
    device_params: dict[str, int]      # trainable scalars per device
    stages: list[Stage]
    feasible: bool = True
    violation: str | None = None

    def total_transfer_elements(self) -> int:
        return sum(s.transfer_elements for s in self.stages)

    def total_messages(self) -> int:
        return sum(s.messages for s in self.stages)


def _conv_stages(spec: ModelSpec):
    """(flops, activation elements) per conv-bearing stage plus the trailing
    head flops (gap/dense layers after the last conv)."""
    stages = []
    head_flops = 0
    cur = tuple(spec.input_shape)
    seen_all_convs = False
    last_conv_idx = max(
        i for i, l in enumerate(spec.layers) if isinstance(l, (Conv, Residual))
    )
    from .zoo import _count_flops_layer

    for i, layer in enumerate(spec.layers):
        f, cur = _count_flops_layer(layer, cur)
        if isinstance(layer, (Conv, Residual)):
            stages.append((f, int(np.prod(cur))))
        elif i > last_conv_idx:
            head_flops += f
    return stages, head_flops


def plan_single(spec: ModelSpec, device: DeviceSpec, bits: int = 8,
                num_params: int | None = None) -> DeploymentPlan:
    n = count_params(spec) if num_params is None else num_params
    total = count_flops(spec)
    mem = simple_footprint(n, bits)
    plan = DeploymentPlan("single", {device.id: n},
                          [Stage({device.id: float(total)}, 0, 0)])
    if mem > device.memory_bytes:
        plan.feasible = False
        plan.violation = f"{mem} B > {device.memory_bytes} B on {device.id}"
    return plan


def plan_layer_split(spec: ModelSpec, d: int, devices: list[DeviceSpec],
                     bits: int = 8) -> DeploymentPlan:
    """Round-robin filter sharding across d devices.

    Every conv stage output must be all-gathered (each device sends its
    shard to every other device by unicast), so each boundary moves
    (d-1) * |A_l| elements in d*(d-1) messages. The gap+dense head runs on
    device 0 after the last gather.
    """
    if d < 1 or d > len(devices):
        raise ValueError(f"need 1 <= d <= {len(devices)} devices, got {d}")
    conv_stages, head_flops = _conv_stages(spec)
    n_params = count_params(spec)
    # parameters: conv filters round-robin; head params on device 0
    shard = {dev.id: n_params // d for dev in devices[:d]}
    shard[devices[0].id] += n_params - d * (n_params // d)
    stages = []
    for flops, elements in conv_stages:
        per_dev = {dev.id: flops / d for dev in devices[:d]}
        transfer = (d - 1) * elements if d > 1 else 0
        messages = d * (d - 1) if d > 1 else 0
        stages.append(Stage(per_dev, transfer, messages))
    if head_flops:
        stages.append(Stage({devices[0].id: float(head_flops)}, 0, 0))
    plan = DeploymentPlan(f"layer-split({d})", shard, stages)
    for dev in devices[:d]:
        mem = simple_footprint(shard[dev.id], bits)
        if mem > dev.memory_bytes:
            plan.feasible = False
            plan.violation = f"{mem} B > {dev.memory_bytes} B on {dev.id}"
    return plan


def plan_nonn(nonn: NoNNModel, devices: list[DeviceSpec], aggregator: int = 0,
              bits: int = 8) -> DeploymentPlan:
    """Trunk s on device s; the only transfers are the non-aggregator
    trunks' pooled feature vectors, sent once per inference."""
    k = nonn.k
    if k > len(devices):
        raise ValueError(f"{k} trunks but only {len(devices)} devices")
    if not (0 <= aggregator < k):
        raise ValueError(f"aggregator must be one of the {k} trunk devices")
    trunk_flops = [count_flops_trunk(nonn, s) for s in range(k)]
    head_flops = 2 * nonn.head_w.size
    params = {devices[s].id: nonn.trunk_param_count(s) for s in range(k)}
    params[devices[aggregator].id] += nonn.head_w.size + nonn.head_b.size
    stage1 = Stage({devices[s].id: float(trunk_flops[s]) for s in range(k)},
                   transfer_elements=sum(w for s, w in enumerate(nonn.feature_widths)
                                         if s != aggregator),
                   messages=k - 1)
    stage2 = Stage({devices[aggregator].id: float(head_flops)}, 0, 0)
    plan = DeploymentPlan("nonn", params, [stage1, stage2])
    for s in range(k):
        mem = simple_footprint(params[devices[s].id], bits)
        if mem > devices[s].memory_bytes:
            plan.feasible = False
            plan.violation = f"{mem} B > {devices[s].memory_bytes} B on {devices[s].id}"
    return plan


def count_flops_trunk(nonn: NoNNModel, s: int) -> int:
    """Trunk FLOPs excluding the unused per-trunk dense stub."""
    spec = nonn.trunks[s].spec
    from .zoo import _count_flops_layer

    total = 0
    cur = tuple(spec.input_shape)
    for layer in spec.layers:
        f, cur = _count_flops_layer(layer, cur)
        if not isinstance(layer, Dense):
            total += f
    return total


# ---------------------------------------------------------------------------
# simulation


@dataclass
class CostReport:
    plan: str
    per_device_memory: dict[str, int]
    per_device_flops: dict[str, float]
    traffic_bytes: float
    latency_s: float
    energy_j: float
    feasible: bool
    violation: str | None = None

    def total_flops(self) -> float:
        return sum(self.per_device_flops.values())

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def simulate(plan: DeploymentPlan, devices: list[DeviceSpec], link: LinkSpec,
             activation_bits: int = 8) -> CostReport:
    """Layer-synchronous cost model, no compute/communication overlap:
    latency = sum over stages of max-device compute + wire time + message
    latencies; energy = flops * e_flop + bytes * e_byte."""
    link.validate()
    dev_by_id = {d.id: d for d in devices}
    for d in devices:
        d.validate()
    if not plan.feasible:
        raise ValueError(f"infeasible plan: {plan.violation}")
    latency = 0.0
    energy = 0.0
    traffic = 0.0
    flops_total: dict[str, float] = {}
    for stage in plan.stages:
        compute = 0.0
        for dev_id, flops in stage.flops_per_device.items():
            compute = max(compute, flops / dev_by_id[dev_id].flops_per_second)
            energy += flops * dev_by_id[dev_id].joules_per_flop
            flops_total[dev_id] = flops_total.get(dev_id, 0.0) + flops
        bytes_moved = stage.transfer_elements * activation_bits / 8
        latency += compute + bytes_moved / link.bandwidth_bytes_per_second \
            + stage.messages * link.per_message_latency_s
        energy += bytes_moved * link.joules_per_byte
        traffic += bytes_moved
    memory = {dev_id: simple_footprint(n) for dev_id, n in plan.device_params.items()}
    return CostReport(plan.strategy, memory, flops_total, traffic, latency, energy,
                      feasible=True)


def compare_reports(reports: list[CostReport], baseline: str) -> list[dict]:
    """Ratio table against the named baseline plan (baseline / other)."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    base = next(r for r in reports if r.plan == baseline)

    def ratio(a, b):
        return a / b if b else float("inf")

    rows = []
    for r in reports:
        rows.append({
            "plan": r.plan,
            "memory_gain": ratio(max(base.per_device_memory.values()),
                                 max(r.per_device_memory.values())),
            "flops_gain": ratio(max(base.per_device_flops.values()),
                                max(r.per_device_flops.values())),
            "latency_gain": ratio(base.latency_s, r.latency_s),
            "energy_gain": ratio(base.energy_j, r.energy_j),
            "traffic_bytes": r.traffic_bytes,
        })
    return rows


def write_comparison_csv(rows: list[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)
