"""Experiment orchestration: pretrain, stage loop, metrics, CSV/JSON artifacts, ablation sweeps."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .backbone import BackboneState, pretrain_backbone
from .checkpoint import save_checkpoint
from .config import RunConfig
from .datagen import Dataset, generate_stream, write_manifest
from .engine import (
    IncrementalState,
    PrototypeStore,
    SequentialFinetune,
    TrainReport,
    accuracy_after_stage,
    extract_prototypes,
    run_stage,
    synthesize_old_prototypes,
)
from .errors import ConfigurationError, DrlabError, ProtocolViolationError

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["method", "fusion_mode", "attention_mode", "loss", "A_bar", "A_T"]
METRICS_HEADER = ["stage", "classes_seen", "test_samples", "correct", "accuracy"]


def average_accuracy(accuracies) -> float:
    accuracies = list(accuracies)
    if not accuracies:
        raise ConfigurationError("average accuracy of an empty sequence")
    return sum(accuracies) / len(accuracies)


@dataclass
class MetricsTable:
    accuracies: list[float]
    classes_seen: list[int] = field(default_factory=list)
    test_samples: list[int] = field(default_factory=list)
    correct: list[int] = field(default_factory=list)

    @property
    def A_T(self) -> float:
        return self.accuracies[-1]

    @property
    def A_bar(self) -> float:
        return average_accuracy(self.accuracies)

    def add(self, accuracy: float, classes_seen: int = 0, test_samples: int = 0) -> None:
        self.accuracies.append(accuracy)
        self.classes_seen.append(classes_seen)
        self.test_samples.append(test_samples)
        self.correct.append(int(round(accuracy * test_samples / 100.0)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for t, row in enumerate(zip(self.classes_seen, self.test_samples, self.correct, self.accuracies), start=1):
                writer.writerow([t, row[0], row[1], row[2], repr(row[3])])

    @classmethod
    def read_csv(cls, path) -> "MetricsTable":
        table = cls([])
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                table.accuracies.append(float(row["accuracy"]))
                table.classes_seen.append(int(row["classes_seen"]))
                table.test_samples.append(int(row["test_samples"]))
                table.correct.append(int(row["correct"]))
        return table

    def to_dict(self) -> dict:
        return {"A_t": self.accuracies, "A_T": self.A_T, "A_bar": self.A_bar}


def summary_row(config: RunConfig, metrics: MetricsTable) -> list[str]:
    loss = config.loss if config.method == "drl" else "ce"
    return [
        config.method,
        config.fusion_mode,
        config.attention_mode,
        loss,
        f"{metrics.A_bar:.4f}",
        f"{metrics.A_T:.4f}",
    ]


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)


# -- backbone cache --------------------------------------------------------------

_BACKBONES: dict[str, BackboneState] = {}


def _backbone_key(config: RunConfig) -> str:
    parts = [config.backbone.model_dump_json(), config.stream_spec.model_dump_json(), config.pretrain.model_dump_json()]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def get_backbone(config: RunConfig, base: Dataset | None = None) -> BackboneState:
    """Pretrained, frozen backbone for ``config``; memoised per process (read-only after freezing)."""
    key = _backbone_key(config)
    if key not in _BACKBONES:
        if base is None:
            base = generate_stream(config.stream_spec)[0].train
        _BACKBONES[key] = pretrain_backbone(base.images, base.labels, config.backbone, config.pretrain, config.seed)
    return _BACKBONES[key]


# -- experiments -----------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: RunConfig
    metrics: MetricsTable
    out_dir: Path
    state: IncrementalState | None = None
    store: PrototypeStore | None = None
    reports: list[TrainReport] = field(default_factory=list)


def dump_embeddings(state: IncrementalState, dataset: Dataset, path) -> int:
    """One CSV row per sample: id, label, stage of the label, then F_t."""
    images, labels = dataset.read()
    features = state.forward(images).features
    header = ["sample_id", "label", "stage"] + [f"f{i}" for i in range(features.shape[1])]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for sid, label, row in zip(dataset.ids.tolist(), labels.tolist(), features):
                writer.writerow([sid, label, state.class_registry.get(label, 0)] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return len(labels)


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    features = np.array([[float(v) for v in r[3:]] for r in rows])
    return ids, labels, features


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_experiment(config: RunConfig, backbone: BackboneState | None = None, keep_state: bool = True) -> ExperimentResult:
    """Pretrain (or reuse) the backbone, run every stage, and write artifacts to ``config.out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ProtocolViolationError(f"{out} is owned by another process") from None
    try:
        return _run_locked(config, backbone, keep_state, out)
    finally:
        lock.release()


def _run_locked(config, backbone, keep_state, out: Path) -> ExperimentResult:
    (out / "config.json").write_text(config.to_json() + "\n")
    base, stages = generate_stream(config.stream_spec)
    write_manifest([base] + stages, out / "manifest.csv")
    if backbone is None:
        backbone = get_backbone(config, base.train)
    metrics = MetricsTable([])
    result = ExperimentResult(config, metrics, out)

    if config.method == "finetune":
        learner = SequentialFinetune(backbone, config)
        for t, stage in enumerate(stages, start=1):
            learner.learn(stage)
            seen = [s.test for s in stages[:t]]
            metrics.add(learner.accuracy(seen), sum(len(s.classes) for s in stages[:t]), sum(len(d) for d in seen))
    else:
        state = IncrementalState(backbone)
        store = PrototypeStore()
        for t, stage in enumerate(stages, start=1):
            try:
                report = run_stage(state, stage, config)
                extract_prototypes(state, stage, store)
                save_checkpoint(state, store, out / f"stage_{t}.ckpt", config)
                synthesize_old_prototypes(store, state, config.tau)
                seen = [s.test for s in stages[:t]]
                acc = accuracy_after_stage(state, store, seen)
            except DrlabError as exc:
                raise type(exc)(f"stage {t}: {exc}") from exc
            metrics.add(acc, len(store), sum(len(d) for d in seen))
            result.reports.append(report)
            _write_json(out / f"stage_{t}_report.json", report.to_dict())
            log.info("stage %d: A_t = %.2f%%", t, acc)
        dump_embeddings(state, Dataset.concat([s.test for s in stages]), out / "embeddings.csv")
        if keep_state:
            result.state, result.store = state, store

    metrics.write_csv(out / "metrics.csv")
    _write_json(out / "metrics.json", metrics.to_dict())
    write_summary(out / "summary.csv", [summary_row(config, metrics)])
    return result


def ablate(
    config: RunConfig,
    fusion_modes=("sum", "gate_part", "gate_adapt"),
    attention_modes=("n_att", "r_att"),
    losses=("das",),
    seeds=(0, 1, 2, 3, 4),
    out_dir=None,
) -> list[dict]:
    """Cartesian sweep; writes per-run rows and a seed-averaged summary table."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for fusion, attention, loss in itertools.product(fusion_modes, attention_modes, losses):
        for seed in seeds:
            cfg = config.model_copy(
                update={
                    "fusion_mode": fusion,
                    "attention_mode": attention,
                    "loss": loss,
                    "seed": seed,
                    "out_dir": str(out / f"{fusion}-{attention}-{loss}" / f"seed{seed}"),
                }
            )
            result = run_experiment(cfg, keep_state=False)
            runs.append(
                {
                    "fusion_mode": fusion,
                    "attention_mode": attention,
                    "loss": loss,
                    "seed": seed,
                    "A_bar": result.metrics.A_bar,
                    "A_T": result.metrics.A_T,
                }
            )
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "fusion_mode", "attention_mode", "loss", "seed", "A_bar", "A_T"])
        for r in runs:
            writer.writerow(
                [config.method, r["fusion_mode"], r["attention_mode"], r["loss"], r["seed"], f"{r['A_bar']:.4f}", f"{r['A_T']:.4f}"]
            )
    rows = []
    for (fusion, attention, loss), group in itertools.groupby(runs, key=lambda r: (r["fusion_mode"], r["attention_mode"], r["loss"])):
        group = list(group)
        rows.append(
            [
                config.method,
                fusion,
                attention,
                loss,
                f"{average_accuracy(r['A_bar'] for r in group):.4f}",
                f"{average_accuracy(r['A_T'] for r in group):.4f}",
            ]
        )
    write_summary(out / "summary.csv", rows)
    return runs
