import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cass.data import (LabeledImageDataset, class_sizes, load_image_folder, round_half_up, save_image_folder,
                       split, split_sizes, synth_dataset)
from cass.errors import ConfigError, ContractError, InvalidInputError


def _ds(labels):
    labels = np.asarray(labels)
    return LabeledImageDataset([None] * len(labels), labels, [str(c) for c in range(labels.max() + 1)])


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 19.8, 9.9)] == [1, 2, 3, 20, 10]


@pytest.mark.parametrize("n,expected", [(100, (70, 10, 20)), (99, (69, 10, 20)), (10, (7, 1, 2)), (15, (10, 2, 3))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected
    ds = split(_ds(np.arange(n) % 3), seed=0)
    assert tuple(len(ds.indices(s)) for s in ("train", "val", "test")) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 300), st.integers(1, 5), st.integers(0, 1000))
def test_split_partition_and_determinism(n, classes, seed):
    labels = np.arange(n) % classes
    a = split(_ds(labels), seed)
    b = split(_ds(labels), seed)
    assert np.array_equal(a.split_assignment, b.split_assignment)
    parts = [set(a.indices(s).tolist()) for s in ("train", "val", "test")]
    assert sum(map(len, parts)) == n
    assert set().union(*parts) == set(range(n))


def test_split_is_stratified():
    labels = np.repeat([0, 1, 2, 3], 50)
    ds = split(_ds(labels), seed=5)
    assert np.array_equal(ds.class_counts("test"), [10, 10, 10, 10])
    assert np.array_equal(ds.class_counts("val"), [5, 5, 5, 5])


def test_split_seed_changes_assignment():
    labels = np.arange(100) % 4
    assert not np.array_equal(split(_ds(labels), 0).split_assignment, split(_ds(labels), 1).split_assignment)


def test_split_too_small():
    with pytest.raises(ConfigError):
        split(_ds(np.arange(5) % 2), 0)


def test_predefined_test_split_is_kept():
    labels = np.arange(50) % 2
    assign = np.array(["test"] * 10 + [""] * 40, dtype=object)
    ds = LabeledImageDataset([None] * 50, labels, ["a", "b"], split_assignment=assign, predefined=True)
    split(ds, 0)
    assert np.array_equal(ds.indices("test"), np.arange(10))
    # 40 pooled samples at the 70:10 ratio
    assert len(ds.indices("val")) == 5 and len(ds.indices("train")) == 35


def test_class_sizes():
    assert class_sizes(200, 5).tolist() == [40] * 5
    assert class_sizes(200, 2, 10.0).tolist() == [182, 18]
    with pytest.raises(ConfigError):
        class_sizes(2, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 400), st.floats(1.0, 20.0))
def test_class_sizes_sum(classes, extra, ratio):
    n = classes + extra
    c = class_sizes(n, classes, ratio)
    assert c.sum() == n and (c >= 1).all()
    assert all(a >= b for a, b in zip(c, c[1:]))


def test_synth_dataset_contract():
    ds = synth_dataset(200, 5, 32, structure_seed=0)
    assert len(ds) == 200 and ds.num_classes == 5
    assert np.bincount(ds.labels).tolist() == [40] * 5
    img = ds.images[0]
    assert img.dtype == torch.uint8 and img.shape == (3, 32, 32)
    again = synth_dataset(200, 5, 32, structure_seed=0)
    assert all(torch.equal(a, b) for a, b in zip(ds.images, again.images))
    other = synth_dataset(200, 5, 32, structure_seed=1)
    assert not all(torch.equal(a, b) for a, b in zip(ds.images, other.images))


def test_synth_multilabel_and_imbalance():
    ds = synth_dataset(100, 2, 16, imbalance_ratio=4.0)
    assert np.bincount(ds.labels).tolist() == class_sizes(100, 2, 4.0).tolist()
    ml = synth_dataset(40, 3, 16, task_kind="multilabel")
    assert ml.labels.shape == (40, 3) and set(np.unique(ml.labels)) <= {0, 1}


def test_dataset_contract_errors():
    with pytest.raises(ContractError):
        LabeledImageDataset([None], np.array([0, 1]), ["a", "b"])
    with pytest.raises(ContractError):
        LabeledImageDataset([None], np.array([0]), ["a"], task_kind="multilabel")


def test_image_folder_round_trip(tmp_path):
    ds = synth_dataset(12, 3, 16, structure_seed=2)
    save_image_folder(ds, tmp_path / "imgs")
    back = load_image_folder(tmp_path / "imgs")
    assert back.class_names == ds.class_names
    assert sorted(back.labels.tolist()) == sorted(ds.labels.tolist())
    assert not back.predefined
    originals = {(int(y), bytes(im.numpy())) for im, y in zip(ds.images, ds.labels)}
    loaded = {(int(y), bytes(im.numpy())) for im, y in zip(back.images, back.labels)}
    assert originals == loaded


def test_image_folder_predefined_layout(tmp_path):
    ds = synth_dataset(20, 2, 16)
    save_image_folder(LabeledImageDataset(ds.images[:14], ds.labels[:14], ds.class_names), tmp_path / "train")
    save_image_folder(LabeledImageDataset(ds.images[14:], ds.labels[14:], ds.class_names), tmp_path / "test")
    back = load_image_folder(tmp_path, load_size=8)
    assert back.predefined
    assert (back.split_assignment == "test").sum() == 6
    assert back.images[0].shape == (3, 8, 8)
    split(back, 0)
    assert len(back.indices("test")) == 6


def test_image_folder_multilabel_csv(tmp_path):
    ds = synth_dataset(6, 2, 16)
    save_image_folder(ds, tmp_path / "imgs")
    table = tmp_path / "labels.csv"
    stems = sorted(p.stem for p in (tmp_path / "imgs").rglob("*.png"))
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "x", "y"])
        for i, s in enumerate(stems):
            w.writerow([s, i % 2, 1])
    back = load_image_folder(tmp_path / "imgs", labels_csv=table)
    assert back.task_kind == "multilabel" and back.class_names == ["x", "y"]
    assert back.labels[:, 1].tolist() == [1] * 6
    with open(table, "a") as fh:
        fh.write("nope,0,1\n")
    with pytest.raises(InvalidInputError):
        load_image_folder(tmp_path / "imgs", labels_csv=table)


def test_image_folder_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        load_image_folder(tmp_path / "missing")
    with pytest.raises(InvalidInputError):
        load_image_folder(tmp_path)
