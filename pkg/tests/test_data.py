import gzip
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mnn.data import (BatchIterator, DataError, Dataset, distance_to_axes, gen_sign_product,
                      load_csv_regression, load_idx, split_and_batch, standardize_fit_apply,
                      train_test_split, write_idx)


class TestSignProduct:
    def test_sign_rule(self):
        d = gen_sign_product(5000, 0)
        prod = d.inputs[:, 0] * d.inputs[:, 1]
        assert np.array_equal(d.targets == 0, prod >= 0)

    def test_deterministic(self):
        a, b = gen_sign_product(50, 3), gen_sign_product(50, 3)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    @pytest.mark.parametrize("seed", range(5))
    def test_balance(self, seed):
        n = 2000
        assert abs(gen_sign_product(n, seed).targets.sum() - n / 2) <= 3 * math.sqrt(n)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            gen_sign_product(0, 0)


class TestDistance:
    @pytest.mark.parametrize("x,d", [((3, -0.5), 0.5), ((0, 7), 0.0), ((-2, -2), 2.0)])
    def test_examples(self, x, d):
        assert distance_to_axes(x) == d

    def test_vectorized(self):
        np.testing.assert_array_equal(distance_to_axes([[3, -0.5], [0, 7]]), [0.5, 0.0])


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx(images, labels, ip, lp)
    return ip, lp, images, labels


class TestIdx:
    def test_fixture(self, idx_files):
        ip, lp, images, labels = idx_files
        d = load_idx(ip, lp)
        assert d.inputs.shape == (4, 784) and d.targets.tolist() == labels.tolist()
        assert d.inputs[0, 0] == 1.0
        np.testing.assert_array_equal(d.inputs * 255, images.reshape(4, -1))

    def test_gzip(self, idx_files, tmp_path):
        ip, lp, *_ = idx_files
        gz = tmp_path / "img.gz"
        gz.write_bytes(gzip.compress(ip.read_bytes()))
        np.testing.assert_array_equal(load_idx(gz, lp).inputs, load_idx(ip, lp).inputs)

    def test_wrong_magic(self, idx_files):
        ip, lp, *_ = idx_files
        with pytest.raises(DataError, match="images: magic"):
            load_idx(lp, lp)

    def test_truncated(self, idx_files):
        ip, lp, *_ = idx_files
        ip.write_bytes(ip.read_bytes()[:-10])
        with pytest.raises(DataError, match="images: payload truncated"):
            load_idx(ip, lp)

    def test_count_mismatch(self, idx_files, tmp_path):
        ip, _, images, _ = idx_files
        write_idx(images[:1], np.array([0, 1, 2], dtype=np.uint8), tmp_path / "a", tmp_path / "b")
        with pytest.raises(DataError, match="count"):
            load_idx(ip, tmp_path / "b")

    def test_label_range(self, idx_files, tmp_path):
        ip, _, images, _ = idx_files
        write_idx(images, np.array([0, 1, 2, 12], dtype=np.uint8), tmp_path / "a", tmp_path / "b")
        with pytest.raises(DataError, match="labels"):
            load_idx(ip, tmp_path / "b")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_idx(tmp_path / "nope", tmp_path / "nope")


class TestCsv:
    def write(self, tmp_path, text):
        p = tmp_path / "t.csv"
        p.write_text(text)
        return p

    def test_three_rows(self, tmp_path):
        p = self.write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
        d = load_csv_regression(p, ["y"])
        assert d.inputs.shape == (3, 2) and d.targets.shape == (3, 1)
        assert d.targets[:, 0].tolist() == [3, 6, 9]

    def test_exponent_notation(self, tmp_path):
        d = load_csv_regression(self.write(tmp_path, "a,y\n1e-3,2.5E2\n"))
        assert d.inputs[0, 0] == 1e-3 and d.targets[0, 0] == 250.0

    def test_missing_target(self, tmp_path):
        with pytest.raises(DataError, match="target column"):
            load_csv_regression(self.write(tmp_path, "a,b\n1,2\n"), ["MEDV"])

    def test_ragged(self, tmp_path):
        with pytest.raises(DataError, match="row 2"):
            load_csv_regression(self.write(tmp_path, "a,b\n1,2\n3\n"))

    def test_non_numeric(self, tmp_path):
        with pytest.raises(DataError, match="row 1"):
            load_csv_regression(self.write(tmp_path, "a,b\nx,2\n"))

    def test_reparse_identical(self, tmp_path):
        p = self.write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n")
        a, b = load_csv_regression(p), load_csv_regression(p)
        np.testing.assert_array_equal(a.inputs, b.inputs)


class TestStandardize:
    def test_moments_and_constant_column(self):
        rng = np.random.default_rng(0)
        x = np.column_stack([rng.normal(3, 2, 200), np.full(200, 7.0), rng.uniform(size=200)])
        tr, (te,), stats = standardize_fit_apply(Dataset(x[:150], x[:150, :1]), [Dataset(x[150:], x[150:, :1])])
        np.testing.assert_allclose(tr.inputs[:, [0, 2]].mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(tr.inputs[:, [0, 2]].std(0), 1, atol=1e-12)
        assert stats.constant_inputs.tolist() == [False, True, False]
        np.testing.assert_array_equal(tr.inputs[:, 1], 7.0)
        np.testing.assert_allclose(tr.targets.std(), 1, atol=1e-12)
        assert te.stats is stats

    def test_classification_targets_untouched(self):
        d = gen_sign_product(20, 0)
        tr, _, stats = standardize_fit_apply(d)
        np.testing.assert_array_equal(tr.targets, d.targets)
        assert stats.y_mean is None

    @settings(max_examples=30)
    @given(arrays(float, (12, 3), elements=st.floats(-1e3, 1e3)))
    def test_roundtrip(self, x):
        _, _, stats = standardize_fit_apply(Dataset(x, np.zeros(12)))
        back = stats.invert_inputs(stats.apply_inputs(x))
        np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))

    def test_empty_train(self):
        with pytest.raises(ValueError):
            standardize_fit_apply(Dataset(np.zeros((0, 2)), np.zeros(0)))


class TestSplitAndBatch:
    data = Dataset(np.arange(200.0).reshape(100, 2), np.arange(100), n_classes=100)

    def test_ninety_ten(self):
        tr, te, _ = split_and_batch(self.data, 0.1, 16, 0)
        assert (len(tr), len(te)) == (90, 10)
        assert not set(tr.targets) & set(te.targets)

    def test_same_seed(self):
        a, b = train_test_split(self.data, 0.1, 5), train_test_split(self.data, 0.1, 5)
        np.testing.assert_array_equal(a[1].targets, b[1].targets)

    def test_batches_cover_train_once_per_epoch(self):
        tr, _, batches = split_and_batch(self.data, 0.1, 16, 0)
        for _ in range(2):
            seen = np.concatenate([b.targets for b in batches])
            assert sorted(seen.tolist()) == sorted(tr.targets.tolist())
        assert len(batches) == 6

    def test_epochs_reshuffle(self):
        it = BatchIterator(self.data, 100, 1)
        first, second = next(iter(it)).targets, next(iter(it)).targets
        assert not np.array_equal(first, second)

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, f):
        with pytest.raises(ValueError):
            train_test_split(self.data, f, 0)


class TestDataset:
    def test_count_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2)), np.zeros(2))

    def test_label_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 2)), [0, 2], n_classes=2)
