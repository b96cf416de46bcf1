import numpy as np
import pytest

from orthounlearn.data import (
    Dataset,
    default_schedule,
    dumps_csv,
    gen_synthetic,
    load_csv,
    partition_tasks,
    save_csv,
)
from orthounlearn.errors import (
    ClassNotInDataset,
    InvalidConfig,
    MeanPlacementFailed,
    MissingClassInSplit,
    NonContiguousLabels,
    NothingRemains,
    OverlappingSchedule,
    ParseError,
)


def test_default_dataset_frozen_values():
    ds = gen_synthetic(20, 32, 200, 8.0, 42)
    assert ds.features.shape == (4000, 32)
    assert (ds.split == "train").sum() == 3200
    np.testing.assert_allclose(ds.features[0, :3], [-0.977689426472286, -1.0643297137247751, 3.3252434007333536])
    for c in range(20):
        assert (ds.labels[ds.split == "train"] == c).sum() == 160


def test_same_seed_same_data():
    a, b = gen_synthetic(5, 4, 10, 3.0, 9), gen_synthetic(5, 4, 10, 3.0, 9)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.split, b.split)


def test_mean_gap_respected():
    ds = gen_synthetic(20, 32, 50, 8.0, 1)
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(20)])
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(20, 1)]
    # sample means wander by about sqrt(32/50) from the true means
    assert gaps.min() > 4.0 - 2 * 0.8 * 2


def test_far_separated_two_class_is_linearly_separable():
    ds = gen_synthetic(2, 8, 100, 20.0, 0)
    x, y = ds.select("train")
    X = np.vstack([x, np.ones(x.shape[1])]).T
    w = np.linalg.lstsq(X, 2.0 * y - 1, rcond=None)[0]
    xt, yt = ds.select("test")
    pred = (np.vstack([xt, np.ones(xt.shape[1])]).T @ w > 0).astype(int)
    assert (pred == yt).all()


@pytest.mark.parametrize("args", [(1, 4, 10, 1.0), (3, 1, 10, 1.0), (3, 4, 10, 0.0), (3, 4, 1, 1.0)])
def test_invalid_generator_args(args):
    with pytest.raises(InvalidConfig):
        gen_synthetic(*args, seed=0)


def test_mean_placement_can_fail():
    # 50 unit-ish means in 2-D cannot keep pairwise gaps of separation / 2
    with pytest.raises(MeanPlacementFailed):
        gen_synthetic(50, 2, 2, 1.0, 0)


def test_csv_round_trip(tmp_path):
    ds = gen_synthetic(3, 4, 10, 5.0, 2)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.provenance == "csv"
    # without split tags a stratified split is drawn from the seed
    save_csv(ds, path, include_split=False)
    a, b = load_csv(path, seed=4), load_csv(path, seed=4)
    np.testing.assert_array_equal(a.split, b.split)
    assert dumps_csv(ds).splitlines()[0] == "label,f0,f1,f2,f3,split"


@pytest.mark.parametrize(
    "body, exc, where",
    [
        ("label,f0\n0,1.0\n1,abc\n", ParseError, "line 3, column f0"),
        ("label,f0\n0,1.0\nx,2\n", ParseError, "line 3, column label"),
        ("label,f0\n0,1.0\n1,nan\n", ParseError, "non-finite"),
        ("label,f0\n0,1.0,2\n", ParseError, "line 2"),
        ("y,f0\n0,1\n", ParseError, "line 1"),
        ("label,f0,split\n0,1,train\n1,2,dev\n", ParseError, "column split"),
        ("label,f0\n0,1\n0,2\n2,3\n2,4\n", NonContiguousLabels, "not contiguous"),
        ("label,f0,split\n0,1,train\n0,2,test\n1,3,train\n1,4,train\n", MissingClassInSplit, "test"),
    ],
)
def test_csv_errors(tmp_path, body, exc, where):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(exc, match=where):
        load_csv(path)


def test_dataset_rejects_non_finite():
    with pytest.raises(InvalidConfig):
        Dataset(np.array([[np.inf], [0.0]]), np.array([0, 0]), np.array(["train", "test"]), 1)


def test_default_partition():
    ds = gen_synthetic(20, 32, 20, 8.0, 42)
    tasks = partition_tasks(ds, default_schedule())
    assert [len(t.remaining_classes) for t in tasks] == [16, 12, 8, 4]
    prev = set(range(20))
    for t in tasks:
        assert not t.forgetting_classes & t.remaining_classes
        assert t.forgetting_classes <= prev
        assert t.remaining_classes == prev - t.forgetting_classes
        assert set(t.y_r_train.tolist()) == t.remaining_classes
        assert t.x_f_train.shape == (32, 16 * len(t.forgetting_classes))
        prev = set(t.remaining_classes)
    assert tasks[2].forgotten_before == frozenset(range(8))


@pytest.mark.parametrize(
    "schedule, exc",
    [
        ([[0], [0]], OverlappingSchedule),
        ([[25]], ClassNotInDataset),
        ([[]], InvalidConfig),
        ([list(range(20))], NothingRemains),
    ],
)
def test_partition_errors(schedule, exc):
    ds = gen_synthetic(20, 4, 5, 8.0, 0)
    with pytest.raises(exc):
        partition_tasks(ds, schedule)
