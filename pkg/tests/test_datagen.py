import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drlab.datagen import (
    StreamSpec,
    class_template,
    generate_stream,
    load_pgm_folder,
    read_pgm,
    split_b0_inc_n,
    write_manifest,
    write_pgm,
)
from drlab.errors import ConfigurationError

# Nearest-class-mean on raw pixels, base test split, default spec at seed 0:
# pilot accuracy 0.775 (seeds 1-4: 0.815, 0.815, 0.845, 0.84). The bar stays at 0.60.
NCM_THRESHOLD = 0.60


@pytest.fixture(scope="module")
def default_stream():
    return generate_stream(StreamSpec())


def test_same_seed_is_bit_identical(default_stream):
    base, stages = default_stream
    base2, stages2 = generate_stream(StreamSpec())
    assert base.train.images.tobytes() == base2.train.images.tobytes()
    for a, b in zip(stages, stages2):
        assert a.train.images.tobytes() == b.train.images.tobytes()
        assert a.test.images.tobytes() == b.test.images.tobytes()
        assert np.array_equal(a.train.ids, b.train.ids)


def test_different_seed_changes_data():
    a, _ = generate_stream(StreamSpec(seed=0, incremental_classes=2))
    b, _ = generate_stream(StreamSpec(seed=1, incremental_classes=2))
    assert not np.array_equal(a.train.images, b.train.images)


def test_default_stream_arithmetic(default_stream):
    base, stages = default_stream
    assert base.classes == list(range(10))
    assert len(stages) == 5
    for t, stage in enumerate(stages, start=1):
        assert stage.stage == t and len(stage.classes) == 2
        assert len(stage.train) == 80 and len(stage.test) == 40
        assert stage.train.images.shape[1:] == (16, 16)


def test_stage_class_sets_disjoint(default_stream):
    base, stages = default_stream
    sets = [set(base.classes)] + [set(s.classes) for s in stages]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            assert not sets[i] & sets[j]


def test_no_sample_in_two_splits_or_stages(default_stream):
    base, stages = default_stream
    ids = np.concatenate([d.ids for s in [base] + stages for d in (s.train, s.test)])
    assert len(np.unique(ids)) == len(ids)


def test_pixels_in_unit_interval(default_stream):
    base, stages = default_stream
    for s in [base] + stages:
        for d in (s.train, s.test):
            assert d.images.min() >= 0.0 and d.images.max() <= 1.0


def test_templates_differ_between_classes():
    templates = [class_template(c, 0, 16) for c in range(20)]
    for i in range(20):
        for j in range(i + 1, 20):
            assert not np.allclose(templates[i], templates[j])


def test_raw_pixel_nearest_class_mean_is_learnable(default_stream):
    base, _ = default_stream
    x = base.train.images.reshape(len(base.train), -1)
    means = np.stack([x[base.train.labels == c].mean(axis=0) for c in base.classes])
    xt = base.test.images.reshape(len(base.test), -1)
    pred = np.asarray(base.classes)[((xt[:, None] - means[None]) ** 2).sum(-1).argmin(axis=1)]
    assert (pred == base.test.labels).mean() >= NCM_THRESHOLD


def test_spec_validation():
    with pytest.raises(ValueError):
        StreamSpec(incremental_classes=9, inc_n=2)
    with pytest.raises(ValueError):
        StreamSpec(seed=-1)
    with pytest.raises(ValueError):
        StreamSpec(seed=2**64)
    assert StreamSpec(seed=2**64 - 1).seed == 2**64 - 1


# -- split ------------------------------------------------------------------------------


def test_split_examples():
    assert split_b0_inc_n(range(10), 2) == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    assert split_b0_inc_n(range(6), 6) == [list(range(6))]


@pytest.mark.parametrize("n", [0, 3, -2])
def test_split_rejects_non_divisible(n):
    with pytest.raises(ConfigurationError):
        split_b0_inc_n(range(10), n)


@given(st.integers(1, 8), st.integers(1, 6))
def test_split_is_an_ordered_partition(n, stages):
    classes = list(range(100, 100 + n * stages))
    parts = split_b0_inc_n(classes, n)
    assert len(parts) == stages
    assert [c for p in parts for c in p] == classes
    assert all(len(p) == n for p in parts)


# -- manifest and PGM ingestion ---------------------------------------------------------


def test_manifest_rows(tmp_path, default_stream):
    base, stages = default_stream
    path = tmp_path / "manifest.csv"
    write_manifest([base] + stages, path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * 20
    assert rows[0] == {"class_id": "0", "stage": "0", "split": "train", "sample_count": "40"}
    assert {r["sample_count"] for r in rows if r["split"] == "test"} == {"20"}


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(16, 16)) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_comments_and_sixteen_bit(tmp_path):
    pixels = np.array([[0, 1000], [65535, 7]], dtype=">u2")
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + pixels.tobytes())
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), pixels.astype(float) / 65535)


@pytest.mark.parametrize(
    "raw",
    [b"P2\n2 2\n255\n0 0 0 0", b"P5\n2 2\n255\n\x00", b"P5\n2 2\n0\n\x00\x00\x00\x00", b"P5\n2"],
)
def test_bad_pgm_files_rejected(tmp_path, raw):
    (tmp_path / "bad.pgm").write_bytes(raw)
    with pytest.raises(ConfigurationError):
        read_pgm(tmp_path / "bad.pgm")


def test_pgm_folder_loading(tmp_path):
    rng = np.random.default_rng(1)
    for name, count in (("cats", 3), ("dogs", 2)):
        (tmp_path / name).mkdir()
        for i in range(count):
            write_pgm(tmp_path / name / f"{i}.pgm", rng.uniform(size=(8, 8)))
    ds = load_pgm_folder(tmp_path, first_class_id=20, image_side=8)
    assert ds.images.shape == (5, 8, 8)
    assert ds.labels.tolist() == [20, 20, 20, 21, 21]
    assert len(set(ds.ids.tolist())) == 5
    with pytest.raises(ConfigurationError):
        load_pgm_folder(tmp_path, image_side=16)
    with pytest.raises(ConfigurationError):
        load_pgm_folder(tmp_path / "cats")


def test_read_logs_access(default_stream):
    _, stages = default_stream
    ds = stages[0].test
    ds.access_log.clear()
    ds.read(np.array([1, 3]))
    assert ds.access_log == ds.ids[[1, 3]].tolist()
    ds.access_log.clear()
