"""Network-of-Neural-Networks student: one independent conv trunk per
teacher-filter partition, joined only by the final dense head, so each trunk
can live on its own device and inference needs a single feature exchange."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, split_batches
from .distill import KdHyper, TrainHyper, _lr_at, at_loss, kd_loss
from .fan import Partition
from .tensor import DivergenceError, Tape, Tensor
from .zoo import Conv, Dense, GlobalAvgPool, Model, ModelSpec, Relu, build_model


@dataclass
class TrunkTemplate:
    """Width/stride schedule for one trunk; the final conv width is forced to
    the partition's filter count."""
    hidden_widths: tuple = (16,)
    hidden_strides: tuple = (2,)
    final_stride: int = 2


@dataclass
class NoNNHyper:
    template: TrunkTemplate = field(default_factory=TrunkTemplate)
    gamma: float = 100.0            # partition-mimic (attention) weight
    budget_params: int | None = None

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


class BudgetError(ValueError):
    pass


def trunk_spec(template: TrunkTemplate, final_filters: int, input_shape,
               num_classes: int) -> ModelSpec:
    layers: list = []
    for w, s in zip(template.hidden_widths, template.hidden_strides):
        layers += [Conv(w, 3, s, 1, bias=True), Relu()]
    layers += [Conv(final_filters, 3, template.final_stride, 1, bias=True), Relu(),
               GlobalAvgPool(), Dense(num_classes)]
    # the trunk's own dense layer exists only to make the spec a valid model;
    # NoNN forward stops at avg_pool and uses the shared head instead
    return ModelSpec(layers, tuple(input_shape), num_classes)


class NoNNModel:
    """k disjoint trunks + one shared dense head over concatenated features."""

    def __init__(self, trunks: list[Model], head_w: Tensor, head_b: Tensor,
                 partition: Partition):
        self.trunks = trunks
        self.head_w = head_w
        self.head_b = head_b
        self.partition = partition

    @property
    def k(self) -> int:
        return len(self.trunks)

    @property
    def feature_widths(self) -> list[int]:
        return [len(c) for c in self.partition.communities]

    def trunk_params(self, s: int) -> list[Tensor]:
        # exclude the trunk's unused dense stub from the trainable set
        return [p for p, name in zip(self.trunks[s].params, self.trunks[s].param_names)
                if ".dense." not in name]

    def params(self) -> list[Tensor]:
        out = []
        for s in range(self.k):
            out.extend(self.trunk_params(s))
        out += [self.head_w, self.head_b]
        return out

    def trunk_param_count(self, s: int) -> int:
        return sum(p.size for p in self.trunk_params(s))

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, batch, trunk_order=None):
        """Returns (logits, per-trunk features, per-trunk final_conv maps).

        Trunks are evaluated independently in any order; results are
        concatenated positionally, so the order cannot affect the logits.
        """
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        order = list(trunk_order) if trunk_order is not None else list(range(self.k))
        feats: list = [None] * self.k
        maps: list = [None] * self.k
        for s in order:
            rec = _trunk_forward(self.trunks[s], batch)
            feats[s] = rec[1]
            maps[s] = rec[0]
        joint = T.concat(feats, axis=1)
        logits = T.dense(joint, self.head_w, self.head_b)
        return logits, feats, maps

    # -- serialization ------------------------------------------------------
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "k": self.k,
            "feature_widths": self.feature_widths,
            "partition": self.partition.to_json(),
            "trunk_specs": [t.spec.to_json() for t in self.trunks],
            "trunk_seeds": [t.seed for t in self.trunks],
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
        for s, trunk in enumerate(self.trunks):
            np.savez(d / f"trunk_{s}.npz",
                     **{name: p.data for name, p in zip(trunk.param_names, trunk.params)})
        np.savez(d / "head.npz", w=self.head_w.data, b=self.head_b.data)

    @staticmethod
    def load(directory) -> "NoNNModel":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        trunks = []
        for s in range(manifest["k"]):
            spec = ModelSpec.from_json(manifest["trunk_specs"][s])
            trunk = build_model(spec, seed=manifest["trunk_seeds"][s])
            blob = np.load(d / f"trunk_{s}.npz")
            for name, p in zip(trunk.param_names, trunk.params):
                p.data = blob[name].copy()
            trunks.append(trunk)
        head = np.load(d / "head.npz")
        part = Partition.from_json(manifest["partition"])
        return NoNNModel(trunks, Tensor(head["w"], requires_grad=True),
                         Tensor(head["b"], requires_grad=True), part)


def _trunk_forward(trunk: Model, batch: Tensor):
    """Run a trunk up to (final_conv, avg_pool), skipping its dense stub."""
    x = batch
    final_conv = None
    for entry in trunk._bound:
        if entry[0] == "dense":
            break
        if entry[0] == "global_avg_pool":
            final_conv = x
        x = trunk._run([entry], x)
    return final_conv, x


def build_nonn(teacher: Model, part: Partition, h: NoNNHyper, seed: int = 0) -> NoNNModel:
    """One trunk per partition group; trunk s's final conv width equals the
    group's filter count so its maps can mimic those teacher channels."""
    h.validate()
    L = teacher.spec.num_classes
    input_shape = teacher.spec.input_shape
    trunks = []
    for s, comm in enumerate(part.communities):
        spec = trunk_spec(h.template, len(comm), input_shape, L)
        trunks.append(build_model(spec, seed=seed * 100 + s))
    widths = [len(c) for c in part.communities]
    rng = np.random.default_rng(seed + 7)
    head_w = T.he_normal((sum(widths), L), sum(widths), rng)
    head_b = Tensor(np.zeros(L), requires_grad=True)
    model = NoNNModel(trunks, head_w, head_b, part)
    if h.budget_params is not None:
        for s in range(model.k):
            n = model.trunk_param_count(s)
            if n >= h.budget_params:
                raise BudgetError(
                    f"trunk {s} has {n} parameters, budget is {h.budget_params}"
                )
    return model


def train_nonn(teacher: Model, nonn: NoNNModel, ds: Dataset, h: TrainHyper,
               k: KdHyper, gamma: float = 100.0, test_ds: Dataset | None = None,
               verbose: bool = False):
    """Joint training of all trunks + head: KD on the combined logits plus a
    per-trunk attention term against the teacher channels of its partition."""
    from .distill import evaluate as _eval  # local to avoid cycle at import time

    h.validate()
    k.validate()
    teacher.freeze()
    opt = T.SGD(nonn.params(), h.lr, h.momentum, h.weight_decay)
    history = []
    for epoch in range(h.epochs):
        opt.lr = _lr_at(h, epoch)
        losses, correct, seen = [], 0, 0
        for images, labels in split_batches(ds, h.batch_size, h.seed * 10_000 + epoch):
            t_rec = teacher.forward(Tensor(images))
            with Tape() as tape:
                logits, _, maps = nonn.forward(images)
                loss = kd_loss(logits, t_rec.logits.data, labels, k)
                if gamma > 0:
                    for s, comm in enumerate(nonn.partition.communities):
                        t_maps = t_rec.final_conv.data[:, comm]
                        loss = loss + at_loss(t_maps, maps[s]) * gamma
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite NoNN loss at epoch {epoch}")
                T.backward(tape, loss)
            opt.step()
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                        "accuracy": correct / seen})
        if test_ds is not None:
            history.append({"epoch": epoch, "split": "test", "loss": float("nan"),
                            "accuracy": evaluate_nonn(nonn, test_ds)})
        if verbose:
            print(f"nonn epoch {epoch}: loss={history[-1 if test_ds is None else -2]['loss']:.4f}")
    return nonn, history


def infer_nonn(nonn: NoNNModel, batch, trunk_order=None):
    """Inference-only forward; returns (logits ndarray, list of per-trunk
    feature ndarrays)."""
    logits, feats, _ = nonn.forward(batch, trunk_order=trunk_order)
    return logits.data, [f.data for f in feats]


def evaluate_nonn(nonn: NoNNModel, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(ds), batch_size):
        logits, _ = infer_nonn(nonn, ds.images[i : i + batch_size])
        correct += int((logits.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return correct / len(ds)


def check_trunk_isolation(nonn: NoNNModel) -> bool:
    """Taint-propagation proof that no tensor upstream of the feature
    concatenation depends on more than one trunk.

    Runs a recorded forward pass and walks the tape: every node's taint is
    the union of its parents' taints (trunk parameters seed the taint sets).
    The first multi-tainted tensor must be the concatenation output itself.
    """
    taint: dict[int, frozenset] = {}
    for s in range(nonn.k):
        for p in nonn.trunk_params(s):
            p.requires_grad = True
            taint[id(p)] = frozenset([s])
    x = np.zeros((1,) + tuple(nonn.trunks[0].spec.input_shape), dtype=np.float32)
    with Tape() as tape:
        logits, feats, _ = nonn.forward(x)
    concat_output = None
    for node in tape.nodes:
        union = frozenset().union(*[taint.get(id(p), frozenset()) for p in node.parents])
        taint[id(node.output)] = union
        if len(union) > 1 and concat_output is None:
            concat_output = node.output
            # the merge point must be the concatenated feature tensor: its
            # parents are exactly the per-trunk feature vectors
            parent_ids = {id(p) for p in node.parents}
            if parent_ids != {id(f) for f in feats}:
                return False
    return True
