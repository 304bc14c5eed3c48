import numpy as np
import pytest

from tcl.data import SyntheticGroupDataset, split_by_tasks


def test_within_group_generators_are_closer_than_cross_group():
    ds = SyntheticGroupDataset(n_groups=3, classes_per_group=4, input_dim=32, seed=5)
    within, across = [], []
    for i in range(ds.num_classes):
        for j in range(i + 1, ds.num_classes):
            (within if ds.group_of(i) == ds.group_of(j) else across).append(ds.generator_w2(i, j))
    assert max(within) < min(across)
    # equal covariances: W2 is the distance between the means
    assert within[0] == pytest.approx(ds.class_radius * np.sqrt(2), rel=1e-9)
    assert across[-1] == pytest.approx(np.sqrt(2 * ds.group_radius ** 2 + 2 * ds.class_radius ** 2), rel=1e-9)


def test_input_dim_too_small():
    with pytest.raises(ValueError):
        SyntheticGroupDataset(n_groups=3, classes_per_group=4, input_dim=14)


@pytest.mark.parametrize("mode", ["random", "by_group", "interleaved"])
def test_class_order_is_a_permutation(mode):
    ds = SyntheticGroupDataset(input_dim=32)
    order = ds.class_order(4, mode)
    assert sorted(order.tolist()) == list(range(ds.num_classes))
    groups = [ds.group_of(k) for k in order]
    if mode == "by_group":
        assert all(len(set(groups[g * 4:(g + 1) * 4])) == 1 for g in range(3))
    if mode == "interleaved":
        assert all(len(set(groups[r * 3:(r + 1) * 3])) == 3 for r in range(4))


def test_tasks_partition_classes_and_are_seeded():
    ds = SyntheticGroupDataset(n_train=10, n_test=5, input_dim=32, seed=2)
    a, b = ds.tasks(3, order_seed=1), ds.tasks(3, order_seed=1)
    assert sorted(c for t in a for c in t.classes) == sorted(ds.class_names)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.x_train, tb.x_train)
        assert ta.x_train.shape == (40, 32) and ta.x_test.shape == (20, 32)
        assert set(ta.y_train) == set(ta.classes)
        assert sorted(ta.taxonomy.classes()) == sorted(ta.classes)
        assert all(ta.taxonomy.group_id_of(c).endswith("group_" + c[1]) for c in ta.classes)
    with pytest.raises(ValueError):
        ds.tasks(5)
    with pytest.raises(ValueError):
        ds.class_order(0, "sideways")


def test_split_by_tasks():
    x = np.arange(40, dtype=float).reshape(20, 2)
    y = np.array(["a"] * 10 + ["b"] * 5 + ["c"] * 5)
    tasks = split_by_tasks(x, y, [["a"], ["b", "c"]], test_fraction=0.2, seed=0)
    assert [len(t.y_train) for t in tasks] == [8, 8]
    assert [len(t.y_test) for t in tasks] == [2, 2]
    rows = np.concatenate([t.x_train[:, 0] for t in tasks] + [t.x_test[:, 0] for t in tasks])
    assert sorted(rows.tolist()) == sorted(x[:, 0].tolist())
    with pytest.raises(ValueError):
        split_by_tasks(x, y, [["zebra"]])
