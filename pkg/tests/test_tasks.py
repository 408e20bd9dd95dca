import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashback.tasks import (
    CSVFormatError,
    SyntheticSpec,
    Task,
    TaskStream,
    batches,
    epoch_batches,
    generate_synthetic,
    load_csv,
    write_csv,
)


class TestSynthetic:
    def test_class_partition(self):
        s = generate_synthetic(SyntheticSpec(T=5, K=2))
        assert [t.classes for t in s.tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
        s.validate()

    def test_shapes(self):
        s = generate_synthetic(SyntheticSpec(T=2, K=3, n=7, train_per_class=4, test_per_class=5))
        assert s.tasks[0].x_train.shape == (12, 7)
        assert s.tasks[1].x_test.shape == (15, 7)
        assert s.in_dim == 7

    def test_deterministic(self):
        spec = SyntheticSpec(seed=11)
        assert generate_synthetic(spec).equals(generate_synthetic(spec))
        assert not generate_synthetic(spec).equals(generate_synthetic(SyntheticSpec(seed=12)))

    def test_linear_probe_separates_one_task(self):
        s = generate_synthetic(SyntheticSpec(T=1, K=2, separation=6.0, seed=3))
        task = s.tasks[0]

        def design(x):
            return np.hstack([x, np.ones((len(x), 1))])

        target = np.where(task.y_train == task.classes[0], -1.0, 1.0)
        w, *_ = np.linalg.lstsq(design(task.x_train), target, rcond=None)
        pred = np.where(design(task.x_test) @ w > 0, task.classes[1], task.classes[0])
        assert np.mean(pred == task.y_test) >= 0.99

    def test_rejects_bad_settings(self):
        with pytest.raises(ValueError):
            SyntheticSpec(T=0)
        with pytest.raises(ValueError):
            SyntheticSpec(separation=0.0)

    @settings(max_examples=20, deadline=None)
    @given(T=st.integers(1, 6), K=st.integers(1, 4), seed=st.integers(0, 10_000))
    def test_class_sets_disjoint(self, T, K, seed):
        s = generate_synthetic(SyntheticSpec(T=T, K=K, n=3, train_per_class=2, test_per_class=2, seed=seed))
        sets = [set(t.classes) for t in s.tasks]
        for i in range(T):
            for j in range(i + 1, T):
                assert not sets[i] & sets[j]


class TestCSV:
    def test_four_rows_two_tasks(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("0,1.0,2.0\n1,3.0,4.0\n0,5.0,6.0\n1,7.0,8.0\n")
        s = load_csv(path, [[0], [1]])
        assert s.T == 2
        assert [len(t) for t in s.tasks] == [2, 2]
        np.testing.assert_array_equal(s.tasks[1].x_train, [[3.0, 4.0], [7.0, 8.0]])

    def test_header_is_skipped(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("label,a,b\n0,1,2\n1,3,4\n")
        assert load_csv(path, [[0, 1]]).tasks[0].x_train.shape == (2, 2)

    def test_overlapping_partition(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("0,1\n1,2\n")
        with pytest.raises(ValueError):
            load_csv(path, [[0, 1], [1]])

    @pytest.mark.parametrize(
        "body",
        ["0,1,2\n1,3\n", "0,a,2\n", "0,1\nx,1\n", "0.5,1\n", "0\n", "0,nan\n", "7,1\n"],
    )
    def test_malformed(self, tmp_path, body):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(CSVFormatError):
            load_csv(path, [[0], [1]])

    def test_roundtrip(self, tmp_path):
        s = generate_synthetic(SyntheticSpec(T=3, K=2, n=4, train_per_class=5, test_per_class=6, seed=1))
        write_csv(s, tmp_path / "train.csv", "train")
        write_csv(s, tmp_path / "test.csv", "test")
        back = load_csv(tmp_path / "train.csv", [[0, 1], [2, 3], [4, 5]], tmp_path / "test.csv")
        assert back.equals(s)


class TestBatches:
    def test_sizes(self):
        sizes = [len(b) for b in batches(10, 4, np.random.default_rng(0))]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        a = [b.tolist() for b in batches(13, 5, np.random.default_rng(42))]
        b = [b.tolist() for b in batches(13, 5, np.random.default_rng(42))]
        assert a == b

    def test_epoch_batches_cover_task(self):
        s = generate_synthetic(SyntheticSpec(T=1, K=3, n=2, train_per_class=7, seed=0))
        task = s.tasks[0]
        ys = np.concatenate([y for _, y in epoch_batches(task, 4, 9)])
        assert sorted(ys.tolist()) == sorted(task.y_train.tolist())

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(0, 200), bs=st.integers(1, 64), seed=st.integers(0, 2**31))
    def test_each_sample_once_per_epoch(self, n, bs, seed):
        idx = [i for b in batches(n, bs, np.random.default_rng(seed)) for i in b.tolist()]
        assert sorted(idx) == list(range(n))


def test_validate_rejects_reused_classes():
    x = np.zeros((1, 2))
    t = Task((0,), x, np.array([0]), x, np.array([0]))
    with pytest.raises(ValueError):
        TaskStream([t, t]).validate()
