"""Command-line orchestration with reproducible run configs.

Every command resolves a JSON config against the defaults, hashes it, and
writes its artifacts into a run directory together with the config snapshot.
Artifacts record the producing config hash; downstream commands refuse to
mix artifacts from a different hash unless --force is given.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import load_dataset, save_dataset
from .deploy import (LinkSpec, compare_reports, make_devices, plan_layer_split,
                     plan_nonn, simulate, write_comparison_csv)
from .distill import KdHyper, TrainHyper, evaluate, train_kd, write_history_csv
from .dream import (DreamMetadata, SynthHyper, extract_metadata, gen_targets,
                    save_synthetic, synthesize_images)
from .experiments import (DeskPreset, fig_datafree_comparison, make_datasets,
                          table_counts, train_teacher)
from .fan import FilterGraph, balance_partitions, build_fan, detect_communities
from .nonn import NoNNHyper, NoNNModel, TrunkTemplate, build_nonn, train_nonn
from .tensor import DivergenceError
from .zoo import build_model, conv_trunk_spec, load_model, save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "num_classes": 10,
        "image_size": 24,
        "per_class_train": 200,
        "per_class_test": 40,
        "noise": 0.05,
    },
    "teacher": {
        "widths": [16, 32, 64],
        "strides": [1, 2, 2],
        "epochs": 15,
        "batch_size": 64,
        "lr": 0.05,
        "decay_epochs": [10],
    },
    "student": {
        "widths": [8, 16, 32],
        "strides": [1, 2, 2],
        "epochs": 10,
        "batch_size": 64,
        "lr": 0.05,
        "decay_epochs": [7],
    },
    "kd": {"temperature": 4.0, "alpha": 0.9, "beta": 0.0},
    "datafree": {
        "epochs": 40,
        "batch_size": 64,
        "lr": 0.02,
        "decay_epochs": [30],
    },
    "dream": {
        "fraction": 0.5,
        "k": 4,
        "p": 8,
        "targets_per_cluster": 25,
        "noise_scale": 1.0,
        "steps": 60,
        "step_size": 0.05,
        "init_std": 0.2,
        "tv_weight": 1e-3,
        "jitter": 1,
    },
    "fan": {"resolution": 1.0},
    "nonn": {
        "hidden_widths": [16],
        "hidden_strides": [2],
        "final_stride": 2,
        "gamma": 10.0,
        "devices": 2,
    },
    "devices": {
        "count": 2,
        "memory_bytes": 500_000,
        "flops_per_second": 1e9,
        "joules_per_flop": 2e-9,
        "bandwidth_bytes_per_second": 1e6,
        "per_message_latency_s": 1e-3,
        "joules_per_byte": 1e-7,
        "activation_bits": 8,
    },
}


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}")
        if not isinstance(given, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, given)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def preset_from_config(cfg: dict) -> DeskPreset:
    d, t, s = cfg["dataset"], cfg["teacher"], cfg["student"]
    seed = cfg["seed"]
    dm, nn = cfg["dream"], cfg["nonn"]
    return DeskPreset(
        num_classes=d["num_classes"], image_size=d["image_size"],
        per_class_train=d["per_class_train"], per_class_test=d["per_class_test"],
        noise=d["noise"], train_seed=seed + 1, test_seed=seed + 2,
        teacher_widths=tuple(t["widths"]), teacher_strides=tuple(t["strides"]),
        teacher_train=TrainHyper(epochs=t["epochs"], batch_size=t["batch_size"],
                                 lr=t["lr"], decay_epochs=tuple(t["decay_epochs"]),
                                 seed=seed),
        student_widths=tuple(s["widths"]), student_strides=tuple(s["strides"]),
        student_train=TrainHyper(epochs=s["epochs"], batch_size=s["batch_size"],
                                 lr=s["lr"], decay_epochs=tuple(s["decay_epochs"]),
                                 seed=seed),
        kd=KdHyper(temperature=cfg["kd"]["temperature"], alpha=cfg["kd"]["alpha"],
                   beta=cfg["kd"]["beta"]),
        datafree_train=TrainHyper(
            epochs=cfg["datafree"]["epochs"],
            batch_size=cfg["datafree"]["batch_size"], lr=cfg["datafree"]["lr"],
            decay_epochs=tuple(cfg["datafree"]["decay_epochs"]), seed=seed),
        meta_fraction=dm["fraction"], meta_k=dm["k"], meta_p=dm["p"],
        targets_per_cluster=dm["targets_per_cluster"],
        target_noise_scale=dm["noise_scale"],
        synth=SynthHyper(steps=dm["steps"], step_size=dm["step_size"],
                         init_std=dm["init_std"], tv_weight=dm["tv_weight"],
                         jitter=dm["jitter"], seed=seed),
        trunk_template=TrunkTemplate(tuple(nn["hidden_widths"]),
                                     tuple(nn["hidden_strides"]),
                                     nn["final_stride"]),
        nonn_gamma=nn["gamma"], nonn_devices=nn["devices"],
    )


def link_from_config(cfg: dict) -> LinkSpec:
    d = cfg["devices"]
    return LinkSpec(d["bandwidth_bytes_per_second"], d["per_message_latency_s"],
                    d["joules_per_byte"])


def devices_from_config(cfg: dict, count: int | None = None):
    d = cfg["devices"]
    return make_devices(count if count is not None else d["count"],
                        memory_bytes=d["memory_bytes"],
                        flops_per_second=d["flops_per_second"],
                        joules_per_flop=d["joules_per_flop"])


# ---------------------------------------------------------------------------
# run directories and the artifact registry


class Run:
    def __init__(self, out: str | None, cfg: dict, command: str):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        if out is not None:
            self.dir = Path(out)
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            self.dir = Path("runs") / f"{stamp}-{self.hash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        snapshot = dict(cfg)
        snapshot["config_hash"] = self.hash
        (self.dir / "config.json").write_text(json.dumps(snapshot, indent=2,
                                                         sort_keys=True))
        self._log = self.dir / "log.txt"
        self.log(f"command: {command} (config {self.hash})")

    def log(self, msg: str):
        with open(self._log, "a") as f:
            f.write(msg + "\n")
        print(msg)

    # -- artifact registry --------------------------------------------------
    def _registry(self) -> dict:
        path = self.dir / "artifacts.json"
        return json.loads(path.read_text()) if path.exists() else {}

    def register(self, name: str):
        reg = self._registry()
        reg[name] = self.hash
        (self.dir / "artifacts.json").write_text(json.dumps(reg, indent=2,
                                                            sort_keys=True))

    def require(self, name: str, force: bool = False) -> Path:
        path = self.dir / name
        if not path.exists():
            raise MissingArtifactError(
                f"missing upstream artifact: {path} (run the producing command first)")
        produced_by = self._registry().get(name)
        if produced_by is not None and produced_by != self.hash and not force:
            raise ConfigError(
                f"artifact {name} was produced by config {produced_by}, current "
                f"config is {self.hash}; pass --force to mix")
        return path


def _write_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run, args):
    preset = preset_from_config(run.cfg)
    train, test = make_datasets(preset)
    save_dataset(train, run.dir / "train.edai")
    save_dataset(test, run.dir / "test.edai")
    run.register("train.edai")
    run.register("test.edai")
    run.log(f"wrote train.edai ({len(train)} images) and test.edai ({len(test)})")


def cmd_train_teacher(run: Run, args):
    preset = preset_from_config(run.cfg)
    train = load_dataset(run.require("train.edai", args.force))
    teacher, history = train_teacher(train, preset, verbose=False)
    save_model(teacher, run.dir / "teacher")
    run.register("teacher")
    write_history_csv(history, run.dir / "teacher_history.csv")
    run.register("teacher_history.csv")
    run.log(f"teacher final train accuracy {history[-1]['accuracy']:.4f}")


def cmd_distill(run: Run, args):
    preset = preset_from_config(run.cfg)
    train = load_dataset(run.require("train.edai", args.force))
    test = load_dataset(run.require("test.edai", args.force))
    teacher = load_model(run.require("teacher", args.force))
    spec = conv_trunk_spec(list(preset.student_widths), list(preset.student_strides),
                           preset.num_classes,
                           (3, preset.image_size, preset.image_size))
    result = train_kd(teacher, build_model(spec, seed=preset.student_train.seed),
                      train, preset.student_train, preset.kd, labeled=True)
    save_model(result.student, run.dir / "student")
    run.register("student")
    write_history_csv(result.history, run.dir / "student_history.csv")
    run.register("student_history.csv")
    run.log(f"student test accuracy {evaluate(result.student, test):.4f}")


def cmd_extract_metadata(run: Run, args):
    cfg = run.cfg["dream"]
    train = load_dataset(run.require("train.edai", args.force))
    teacher = load_model(run.require("teacher", args.force))
    meta = extract_metadata(teacher, train, fraction=cfg["fraction"], k=cfg["k"],
                            p=cfg["p"], seed=run.cfg["seed"])
    (run.dir / "dream_meta.json").write_text(meta.to_json())
    run.register("dream_meta.json")
    run.log(f"metadata: {meta.num_scalars()} scalars "
            f"({len(meta.clusters)} classes x {cfg['k']} clusters)")


def cmd_dream(run: Run, args):
    preset = preset_from_config(run.cfg)
    teacher = load_model(run.require("teacher", args.force))
    test = load_dataset(run.require("test.edai", args.force))
    meta = DreamMetadata.from_json(
        run.require("dream_meta.json", args.force).read_text())
    targets = gen_targets(meta, preset.targets_per_cluster,
                          preset.target_noise_scale, seed=run.cfg["seed"])
    synth = synthesize_images(teacher, targets, preset.synth)
    save_synthetic(synth, run.dir / "dream.edai", run.dir / "dream_sidecar.json")
    run.register("dream.edai")
    run.register("dream_sidecar.json")
    spec = conv_trunk_spec(list(preset.student_widths), list(preset.student_strides),
                           preset.num_classes,
                           (3, preset.image_size, preset.image_size))
    result = train_kd(teacher, build_model(spec, seed=preset.datafree_train.seed),
                      synth.dataset, preset.datafree_train, preset.kd, labeled=False)
    save_model(result.student, run.dir / "dream_student")
    run.register("dream_student")
    run.log(f"dream student test accuracy {evaluate(result.student, test):.4f}")


def cmd_build_fan(run: Run, args):
    train = load_dataset(run.require("train.edai", args.force))
    teacher = load_model(run.require("teacher", args.force))
    graph = build_fan(teacher, train)
    (run.dir / "fan.json").write_text(graph.to_json())
    run.register("fan.json")
    graph.write_edge_list(run.dir / "fan_edges.txt")
    run.register("fan_edges.txt")
    run.log(f"fan: {len(graph.nodes)} live filters, {len(graph.dead)} dead")


def cmd_partition(run: Run, args):
    cfg = run.cfg
    graph = FilterGraph.from_json(run.require("fan.json", args.force).read_text())
    part = detect_communities(graph, resolution=cfg["fan"]["resolution"],
                              seed=cfg["seed"])
    k = cfg["nonn"]["devices"]
    budget = int(np.ceil(0.6 * len(graph.nodes)))
    balanced = balance_partitions(graph, part, k, budget)
    (run.dir / "partition.json").write_text(balanced.to_json())
    run.register("partition.json")
    run.log(f"partition sizes {balanced.sizes()} modularity {balanced.modularity:.4f}")


def cmd_train_nonn(run: Run, args):
    from .fan import Partition

    preset = preset_from_config(run.cfg)
    train = load_dataset(run.require("train.edai", args.force))
    test = load_dataset(run.require("test.edai", args.force))
    teacher = load_model(run.require("teacher", args.force))
    part = Partition.from_json(run.require("partition.json", args.force).read_text())
    nonn = build_nonn(teacher, part, NoNNHyper(preset.trunk_template),
                      seed=run.cfg["seed"])
    nonn, history = train_nonn(teacher, nonn, train, preset.student_train,
                               preset.kd, gamma=preset.nonn_gamma)
    nonn.save(run.dir / "nonn")
    run.register("nonn")
    write_history_csv(history, run.dir / "nonn_history.csv")
    run.register("nonn_history.csv")
    from .nonn import evaluate_nonn

    run.log(f"nonn test accuracy {evaluate_nonn(nonn, test):.4f}")


def cmd_simulate(run: Run, args):
    from .experiments import match_monolithic_spec

    preset = preset_from_config(run.cfg)
    nonn = NoNNModel.load(run.require("nonn", args.force))
    d = run.cfg["nonn"]["devices"]
    devices = devices_from_config(run.cfg, max(d, nonn.k))
    link = link_from_config(run.cfg)
    bits = run.cfg["devices"]["activation_bits"]
    mono_spec = match_monolithic_spec(nonn.param_count(), preset)
    reports = [
        simulate(plan_nonn(nonn, devices), devices, link, bits),
        simulate(plan_layer_split(mono_spec, d, devices), devices, link, bits),
    ]
    for report in reports:
        name = f"cost_{report.plan.replace('(', '_').replace(')', '')}.json"
        (run.dir / name).write_text(report.to_json())
        run.register(name)
    (run.dir / "cost_reports.json").write_text(
        json.dumps([json.loads(r.to_json()) for r in reports], indent=2))
    run.register("cost_reports.json")
    run.log(f"latencies: " + ", ".join(f"{r.plan}={r.latency_s * 1e3:.2f}ms"
                                       for r in reports))


def cmd_compare(run: Run, args):
    from .deploy import CostReport

    docs = json.loads(run.require("cost_reports.json", args.force).read_text())
    reports = [CostReport(**doc) for doc in docs]
    baseline = next(r.plan for r in reports if r.plan.startswith("layer-split"))
    rows = compare_reports(reports, baseline=baseline)
    write_comparison_csv(rows, run.dir / "comparison.csv")
    run.register("comparison.csv")
    run.log(f"wrote comparison.csv against baseline {baseline}")


def cmd_reproduce_fig2d(run: Run, args):
    preset = preset_from_config(run.cfg)
    train, test = make_datasets(preset)
    teacher, _ = train_teacher(train, preset)
    rows = fig_datafree_comparison(teacher, train, test, preset)
    acc = {r["source"]: r["test_accuracy"] for r in rows}
    ok = (acc["random"] < acc["dream"]
          and acc["dream"] >= 0.8 * acc["real"]
          and acc["alternate"] >= acc["dream"] - 0.03)
    for r in rows:
        r["ordering_ok"] = ok
    _write_csv(run.dir / "fig2d.csv", rows)
    run.register("fig2d.csv")
    run.log("accuracies: " + ", ".join(f"{k}={v:.4f}" for k, v in acc.items()))
    run.log(f"ordering verdict: {'pass' if ok else 'FAIL'}")
    if not ok:
        raise DivergenceError("data-free ordering not reproduced")


def cmd_reproduce_table1_counts(run: Run, args):
    rows = table_counts()
    _write_csv(run.dir / "table1_counts.csv", rows)
    run.register("table1_counts.csv")
    for r in rows:
        run.log(f"{r['name']}: computed {r['computed']} vs {r['published']} "
                f"({'pass' if r['ok'] else 'FAIL'})")
    if not all(r["ok"] for r in rows):
        raise DivergenceError("analytic counts outside tolerance")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "extract-metadata": cmd_extract_metadata,
    "dream": cmd_dream,
    "build-fan": cmd_build_fan,
    "partition": cmd_partition,
    "train-nonn": cmd_train_nonn,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "reproduce-fig2d": cmd_reproduce_fig2d,
    "reproduce-table1-counts": cmd_reproduce_table1_counts,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeai", description="Desk-scale edge-AI distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None,
                       help="run directory (default: runs/<timestamp>-<hash>)")
        p.add_argument("--force", action="store_true",
                       help="allow mixing artifacts from different config hashes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(args.out, cfg, args.command)
        COMMANDS[args.command](run, args)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
