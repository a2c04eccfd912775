import copy
import csv
import json

import numpy as np
import pytest
from filelock import FileLock

from conftest import tiny_config
from drlab import engine
from drlab.bench import (
    SUMMARY_HEADER,
    MetricsTable,
    average_accuracy,
    dump_embeddings,
    read_embeddings,
    run_experiment,
)
from drlab.checkpoint import (
    MAGIC,
    checkpoint_bytes,
    inspect_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from drlab.cli import main
from drlab.config import PRESETS, RunConfig, build_config, config_schema, load_config
from drlab.datagen import Dataset, generate_stream
from drlab.engine import PrototypeStore, accuracy_after_stage, classify_batch
from drlab.errors import (
    BadMagicError,
    ConfigurationError,
    CorruptCheckpointError,
    ProtocolViolationError,
    TruncatedCheckpointError,
    VersionMismatchError,
)


@pytest.fixture(scope="module")
def tiny_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    return run_experiment(tiny_config(out_dir=str(out)))


# -- metrics ------------------------------------------------------------------------


def test_average_accuracy_examples():
    assert average_accuracy([100.0, 50.0]) == 75.0
    assert average_accuracy([33.3] * 7) == pytest.approx(33.3, abs=1e-12)
    table = MetricsTable([61.25])
    assert table.A_bar == table.A_T == 61.25
    with pytest.raises(ConfigurationError):
        average_accuracy([])


def test_metrics_csv_round_trip_is_exact(tmp_path):
    table = MetricsTable([])
    for acc, seen, n in ((100.0, 2, 40), (83.75, 4, 80), (2 / 3 * 100, 6, 120)):
        table.add(acc, seen, n)
    table.write_csv(tmp_path / "m.csv")
    back = MetricsTable.read_csv(tmp_path / "m.csv")
    assert back.accuracies == table.accuracies
    assert back.correct == [40, 67, 80]
    assert back.A_bar == table.A_bar and back.A_T == table.A_T


def test_run_artifacts(tiny_result):
    out = tiny_result.out_dir
    for name in ("config.json", "manifest.csv", "metrics.csv", "metrics.json", "summary.csv", "embeddings.csv"):
        assert (out / name).exists(), name
    assert (out / "stage_1.ckpt").exists() and (out / "stage_2.ckpt").exists()
    assert len(tiny_result.metrics.accuracies) == 2
    table = MetricsTable.read_csv(out / "metrics.csv")
    assert table.A_bar == sum(table.accuracies) / len(table.accuracies)
    assert [100 * c / n for c, n in zip(table.correct, table.test_samples)] == table.accuracies
    rows = list(csv.reader(open(out / "summary.csv")))
    assert rows[0] == SUMMARY_HEADER
    assert rows[1][:4] == ["drl", "gate_adapt", "r_att", "das"]
    assert rows[1][4] == f"{table.A_bar:.4f}" and len(rows[1][5].split(".")[1]) == 4
    report = json.loads((out / "stage_2_report.json").read_text())
    assert report["trainable_params"] == report["closed_form_params"]


def test_runs_are_reproducible(tiny_result, tmp_path):
    again = run_experiment(tiny_config(out_dir=str(tmp_path)))
    first = tiny_result.out_dir
    for name in ("metrics.csv", "summary.csv", "embeddings.csv", "manifest.csv", "stage_1.ckpt", "stage_2.ckpt"):
        assert (first / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_accuracy_trivial_cases(tiny_result):
    state, store = tiny_result.state, tiny_result.store
    _, stages = generate_stream(tiny_result.config.stream_spec)
    tests = [s.test for s in stages]
    base = accuracy_after_stage(state, store, tests)
    assert base == tiny_result.metrics.A_T
    assert accuracy_after_stage(state, store, tests[::-1]) == base
    single = PrototypeStore()
    single.set_segment(4, 0, np.ones(16))
    for s in (1, 2):
        single.set_segment(4, s, np.ones(16))
    only = Dataset(tests[0].images[:6], np.full(6, 4), tests[0].ids[:6])
    assert accuracy_after_stage(state, single, [only]) == 100.0
    with pytest.raises(ProtocolViolationError):
        accuracy_after_stage(state, PrototypeStore(), tests)


def test_ce_and_das_runs_differ_only_in_supervision(tmp_path, tiny_backbone, monkeypatch):
    seen = {}
    original = engine.train_stream

    def audit(module, head, ptm, prev, targets, config, rng, loss=None, alpha=None):
        key = (config.loss, module.stage)
        seen[key] = (engine.params_digest(module.params()), ptm.tokens.tobytes(), targets.tobytes())
        return original(module, head, ptm, prev, targets, config, rng, loss, alpha)

    monkeypatch.setattr(engine, "train_stream", audit)
    for loss in ("das", "ce"):
        run_experiment(tiny_config(loss=loss, out_dir=str(tmp_path / loss)), backbone=tiny_backbone)
    for stage in (1, 2):
        assert seen[("das", stage)][2] == seen[("ce", stage)][2]
    # identical initial stream and identical inputs at stage 1; only the loss path differs
    assert seen[("das", 1)] == seen[("ce", 1)]


def test_finetune_method_runs(tmp_path, tiny_backbone):
    result = run_experiment(tiny_config(method="finetune", out_dir=str(tmp_path)), backbone=tiny_backbone)
    assert len(result.metrics.accuracies) == 2
    assert list(csv.reader(open(tmp_path / "summary.csv")))[1][0] == "finetune"
    assert not (tmp_path / "stage_1.ckpt").exists()


def test_output_directory_is_locked(tmp_path):
    lock = FileLock(str(tmp_path / ".lock"))
    with lock.acquire(timeout=0):
        with pytest.raises(ProtocolViolationError):
            run_experiment(tiny_config(out_dir=str(tmp_path)))


# -- embeddings ---------------------------------------------------------------------


def test_dump_embeddings_round_trip(tiny_result, tmp_path):
    state, store = tiny_result.state, tiny_result.store
    _, stages = generate_stream(tiny_result.config.stream_spec)
    data = Dataset.concat([s.test for s in stages])
    rows = dump_embeddings(state, data, tmp_path / "e.csv")
    assert rows == len(data)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == len(data) + 1
    ids, labels, feats = read_embeddings(tmp_path / "e.csv")
    assert feats.shape[1] == (state.stage_index + 1) * 16
    assert np.array_equal(ids, data.ids) and np.array_equal(labels, data.labels)
    expected, _, _ = classify_batch(state.forward(data.images).features, store)
    assert np.array_equal(classify_batch(feats, store)[0], expected)


def test_dump_embeddings_io_error_names_path(tiny_result, tmp_path):
    _, stages = generate_stream(tiny_result.config.stream_spec)
    target = tmp_path / "missing" / "e.csv"
    with pytest.raises(OSError, match="missing"):
        dump_embeddings(tiny_result.state, stages[0].test, target)


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_fixpoint_and_forward(tiny_result, tmp_path):
    path = tiny_result.out_dir / "stage_2.ckpt"
    state, store, config = load_checkpoint(path)
    assert config.digest() == tiny_result.config.digest()
    assert config == tiny_result.config.model_copy(update={"out_dir": RunConfig().out_dir})
    save_checkpoint(state, store, tmp_path / "again.ckpt", config)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    probe = np.random.default_rng(0).uniform(size=(5, 8, 8))
    before = tiny_result.state.forward(probe).features
    assert state.forward(probe).features.tobytes() == before.tobytes()
    # stage checkpoints are written before old-class synthesis, so old classes lack the newest segment
    assert store.num_segments(4) == 2 and store.num_segments(6) == 3
    for c in store.classes:
        for s, seg in enumerate(store.segments[c]):
            assert seg.tobytes() == tiny_result.store.segments[c][s].tobytes()
            assert store.provenance[c][s] == tiny_result.store.provenance[c][s]


def test_inspect_checkpoint(tiny_result):
    info = inspect_checkpoint(tiny_result.out_dir / "stage_1.ckpt")
    assert info["stage"] == 1 and info["format_version"] == 1
    assert info["config_digest"] == tiny_result.config.digest().hex()


def _blob(tiny_result):
    return (tiny_result.out_dir / "stage_2.ckpt").read_bytes()


def test_truncated_checkpoint(tiny_result):
    blob = _blob(tiny_result)
    for cut in (2, 20, 60, len(blob) // 2, len(blob) - 1):
        with pytest.raises(TruncatedCheckpointError):
            parse_checkpoint(blob[:cut])


def test_bad_magic_and_version(tiny_result):
    blob = _blob(tiny_result)
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatchError):
        parse_checkpoint(MAGIC + (2).to_bytes(2, "little") + blob[6:])


def test_corrupt_checkpoint(tiny_result):
    blob = bytearray(_blob(tiny_result))
    blob[-100] ^= 0xFF
    with pytest.raises(CorruptCheckpointError):
        parse_checkpoint(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        parse_checkpoint(_blob(tiny_result) + b"\x00")


def test_failed_save_leaves_previous_file(tiny_result, tmp_path, monkeypatch):
    path = tmp_path / "c.ckpt"
    save_checkpoint(tiny_result.state, tiny_result.store, path)
    good = path.read_bytes()
    import drlab.checkpoint as ckpt

    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(ckpt.os, "replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(tiny_result.state, tiny_result.store, path)
    assert path.read_bytes() == good


def test_checkpoint_bytes_are_deterministic(tiny_result):
    state = copy.deepcopy(tiny_result.state)
    assert checkpoint_bytes(state, tiny_result.store) == checkpoint_bytes(tiny_result.state, tiny_result.store)


# -- configuration -------------------------------------------------------------------


def test_config_json_round_trip():
    cfg = tiny_config(seed=2**64 - 1, fusion_mode="gate_extra", das={"k_plus": 2.0, "k_minus": 1.0})
    assert load_config(cfg.to_json()) == cfg
    assert load_config(cfg.to_json()).digest() == cfg.digest()


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ValueError):
        RunConfig.model_validate({"lr": 0.1})
    (tmp_path / "c.json").write_text(json.dumps({"optimizer": {"epochz": 3}}))
    with pytest.raises(ConfigurationError):
        build_config(tmp_path / "c.json")


def test_presets():
    default = build_config(preset="drl-default")
    best = build_config(preset="drl-table-best")
    assert (default.alpha, default.gamma, default.das.k, default.das.lambda_p, default.das.lambda_n) == (0.5, 0.9, 1.0, 3.0, 1.0)
    assert (best.alpha, best.das.lambda_p, best.das.lambda_n) == (0.5, 1.0, 2.0)
    assert set(PRESETS) == {"drl-default", "drl-table-best"}
    with pytest.raises(ConfigurationError):
        build_config(preset="nope")


def test_default_hyperparameters():
    cfg = RunConfig()
    assert cfg.optimizer.epochs == 20 and cfg.optimizer.base_lr == 0.01
    assert cfg.optimizer.momentum == 0.9 and cfg.optimizer.weight_decay == 5e-4 and cfg.optimizer.batch_size == 48
    assert cfg.bottleneck == 16 and cfg.tau == 0.1 and cfg.alpha == 0.5


def test_seed_precedence(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3}))
    assert build_config(tmp_path / "c.json").seed == 3
    monkeypatch.setenv("DRL_SEED", "11")
    assert build_config(tmp_path / "c.json").seed == 11
    assert build_config(tmp_path / "c.json", seed=5).seed == 5
    assert build_config(tmp_path / "c.json").stream_spec.seed == 11
    monkeypatch.setenv("DRL_SEED", "eleven")
    with pytest.raises(ConfigurationError):
        build_config()
    monkeypatch.setenv("DRL_SEED", str(2**64))
    with pytest.raises(ConfigurationError):
        build_config()


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        build_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        build_config(tmp_path / "bad.json")


def test_schema_lists_fields():
    props = config_schema()["properties"]
    for key in ("fusion_mode", "attention_mode", "loss", "das", "alpha", "gamma", "tau", "seed", "optimizer"):
        assert key in props


# -- command line ---------------------------------------------------------------------


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(tiny_config().model_dump_json(exclude={"out_dir"}))
    return path


def test_cli_run_inspect_and_dump(tiny_config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(tiny_config_file), "--seed", "0", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "stage 2: A_t = " in printed and "A_bar = " in printed
    assert main(["inspect", str(out / "stage_2.ckpt")]) == 0
    assert json.loads(capsys.readouterr().out)["stage"] == 2
    assert main(["dump-embeddings", str(out / "stage_2.ckpt"), "--out", str(tmp_path / "e.csv")]) == 0
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 2 * 2 * 6 + 1


def test_cli_ablate(tiny_config_file, tmp_path, capsys):
    out = tmp_path / "abl"
    args = ["ablate", "--config", str(tiny_config_file), "--out", str(out), "--fusion", "sum,gate_adapt", "--attention", "r_att", "--seeds", "0,1"]
    assert main(args) == 0
    rows = list(csv.reader(open(out / "summary.csv")))
    assert rows[0] == SUMMARY_HEADER
    assert [r[1] for r in rows[1:]] == ["sum", "gate_adapt"]
    assert len(list(csv.reader(open(out / "ablation_runs.csv")))) == 5


def test_cli_errors(tmp_path, monkeypatch, capsys):
    assert main(["inspect", str(tmp_path / "missing.ckpt")]) == 1
    (tmp_path / "x.ckpt").write_bytes(b"nope" * 20)
    assert main(["inspect", str(tmp_path / "x.ckpt")]) == 1
    assert "BadMagicError" in capsys.readouterr().err
    monkeypatch.setenv("DRL_SEED", "x")
    assert main(["run", "--out", str(tmp_path / "r")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--seed", "-1"])
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_cli_schema(capsys):
    assert main(["schema"]) == 0
    assert "properties" in json.loads(capsys.readouterr().out)
