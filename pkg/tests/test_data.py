"""Tests for CSV ingestion, preprocessing and synthetic data."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu, norm

from dpaudit.core import Dataset
from dpaudit.data import (
    DataError,
    Normalize,
    PreprocessSpec,
    RawTable,
    load_csv,
    load_dataset,
    nonsphericity,
    preprocess,
    save_dataset,
    synth_blobs,
)
from dpaudit.mechanisms import nonprivate_lr


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _numeric_table(n, seed=0, label_values=(0, 1)):
    rng = np.random.default_rng(seed)
    cols = {
        "a": rng.normal(size=n) * 5 + 3,
        "b": rng.uniform(-2, 7, size=n),
        "y": np.resize(np.array(label_values, dtype=float), n),
    }
    return RawTable(cols, {"a": "numeric", "b": "numeric", "y": "numeric"}, "y")


class TestLoadCsv:
    def test_numeric_fixture(self, tmp_path):
        t = load_csv(_write(tmp_path, "x1,x2,y\n1,2,0\n3,4,1\n5,6,0\n"), "y")
        assert t.n_rows == 3
        assert t.feature_columns == ["x1", "x2"]
        assert all(k == "numeric" for k in t.kinds.values())
        np.testing.assert_array_equal(t.columns["x2"], [2.0, 4.0, 6.0])

    def test_categorical_column(self, tmp_path):
        t = load_csv(_write(tmp_path, "color,v,y\nred,1,0\nblue,2,1\n"), "y")
        assert t.kinds["color"] == "categorical"
        assert t.kinds["v"] == "numeric"

    def test_quoted_fields(self, tmp_path):
        t = load_csv(_write(tmp_path, 'name,v,y\n"a, b",1,0\n"c",2,1\n'), "y")
        assert list(t.columns["name"]) == ["a, b", "c"]

    def test_missing_header_names_file(self, tmp_path):
        p = _write(tmp_path, "1,2,0\n3,4,1\n", "nohead.csv")
        with pytest.raises(DataError, match="nohead.csv"):
            load_csv(p, "y")

    def test_missing_label_column(self, tmp_path):
        with pytest.raises(DataError, match="label column"):
            load_csv(_write(tmp_path, "a,b\n1,0\n"), "y")

    def test_ragged_row_reports_line(self, tmp_path):
        p = _write(tmp_path, "a,y\n1,0\n2,1\n3\n")
        with pytest.raises(DataError, match=r":4:"):
            load_csv(p, "y")

    def test_blank_value_reports_line(self, tmp_path):
        with pytest.raises(DataError, match=r":3: missing value"):
            load_csv(_write(tmp_path, "a,y\n1,0\n,1\n"), "y")

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            load_csv(_write(tmp_path, ""), "y")


class TestPreprocess:
    def test_subsample_to_max_rows(self):
        ds = preprocess(_numeric_table(2000), PreprocessSpec(max_rows=1000))
        assert ds.n == 1000
        assert set(np.unique(ds.labels)) == {0, 1}

    def test_minmax_bounds(self):
        ds = preprocess(_numeric_table(300), PreprocessSpec(normalize=Normalize.MINMAX01))
        assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0
        np.testing.assert_array_equal(ds.bounds, np.tile([0.0, 1.0], (ds.d, 1)))

    def test_standardize(self):
        ds = preprocess(_numeric_table(300), PreprocessSpec(normalize="standardize"))
        np.testing.assert_allclose(ds.features.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(ds.features.std(axis=0), 1.0, atol=1e-12)

    def test_subsample_deterministic(self):
        t = _numeric_table(1500)
        a = preprocess(t, PreprocessSpec(max_rows=200, subsample_seed=4))
        b = preprocess(t, PreprocessSpec(max_rows=200, subsample_seed=4))
        c = preprocess(t, PreprocessSpec(max_rows=200, subsample_seed=5))
        assert a.equals(b)
        assert not a.equals(c)

    def test_restricts_to_binary_classes(self):
        ds = preprocess(_numeric_table(90, label_values=(0, 1, 2)))
        assert ds.n == 60

    def test_string_labels(self):
        cols = {"v": np.arange(6.0), "y": np.array(["no", "yes", "no", "yes", "maybe", "no"], dtype=object)}
        ds = preprocess(RawTable(cols, {"v": "numeric", "y": "categorical"}, "y"))
        # first two levels in sorted order: "maybe" -> 0, "no" -> 1
        np.testing.assert_array_equal(ds.labels, [1, 1, 0, 1])

    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="one class"):
            preprocess(_numeric_table(10, label_values=(1, 2)))

    def test_one_hot_and_rf_drop(self, tmp_path):
        t = load_csv(_write(tmp_path, "c,v,y\nu,1,0\nw,2,1\nu,3,1\nw,5,0\n"), "y")
        ds = preprocess(t)
        assert ds.feature_names == ("c=u", "c=w", "v")
        assert ds.categorical == (True, True, False)
        np.testing.assert_array_equal(ds.features[:, :2].sum(axis=1), 1.0)
        rf = preprocess(t, PreprocessSpec(drop_categorical_for_rf=True))
        assert rf.feature_names == ("v",)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(20, 400), st.sampled_from(list(Normalize)), st.integers(0, 2**32 - 1))
    def test_idempotent_and_contained(self, n, mode, seed):
        spec = PreprocessSpec(max_rows=150, normalize=mode, subsample_seed=seed % 7)
        once = preprocess(_numeric_table(n, seed), spec)
        twice = preprocess(once, spec)
        assert once.equals(twice)
        x = once.features
        assert np.all(x >= once.bounds[:, 0]) and np.all(x <= once.bounds[:, 1])
        assert np.all(np.linalg.norm(x, axis=1) <= once.l2_radius + 1e-12)

    def test_rejects_tiny_max_rows(self):
        with pytest.raises(ValueError):
            PreprocessSpec(max_rows=1)


class TestNonsphericity:
    def test_isotropic(self):
        rng = np.random.default_rng(0)
        ds = Dataset.from_arrays(rng.standard_normal((10_000, 5)), np.arange(10_000) % 2)
        assert 1.0 <= nonsphericity(ds) <= 1.2

    def test_anisotropic(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((10_000, 2)) * [10.0, 1.0]
        ds = Dataset.from_arrays(x, np.arange(10_000) % 2)
        assert nonsphericity(ds) == pytest.approx(10.0, rel=0.1)

    def test_rank_deficient(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((50, 1))
        ds = Dataset.from_arrays(np.hstack([a, 2 * a]), np.arange(50) % 2)
        assert nonsphericity(ds) == math.inf


class TestSynthBlobs:
    @staticmethod
    def _auc(ds_train, ds_test):
        scores = nonprivate_lr(ds_train, 1.0).decision(ds_test.features)
        pos, neg = scores[ds_test.labels == 1], scores[ds_test.labels == 0]
        return mannwhitneyu(pos, neg).statistic / (len(pos) * len(neg))

    def test_deterministic(self):
        assert synth_blobs(100, 3, 2.0, 11).equals(synth_blobs(100, 3, 2.0, 11))
        assert not synth_blobs(100, 3, 2.0, 11).equals(synth_blobs(100, 3, 2.0, 12))

    def test_balanced_classes(self):
        np.testing.assert_array_equal(synth_blobs(101, 2, 1.0, 0).class_counts(), [51, 50])

    def test_no_separation_is_chance(self):
        auc = self._auc(synth_blobs(2000, 2, 0.0, 1), synth_blobs(4000, 2, 0.0, 2))
        assert abs(auc - 0.5) < 0.05

    def test_wide_separation_is_separable(self):
        train, test = synth_blobs(2000, 2, 5.0, 3), synth_blobs(20_000, 2, 5.0, 4)
        acc = np.mean((nonprivate_lr(train, 1.0).decision(test.features) > 0) == test.labels)
        bayes = norm.cdf(2.5)
        assert bayes > 0.99
        assert acc >= 0.99

    def test_scales_shape_checked(self):
        with pytest.raises(ValueError):
            synth_blobs(10, 2, 1.0, 0, scales=[1.0])


def test_snapshot_roundtrip(tmp_path):
    ds = preprocess(_numeric_table(40))
    path = tmp_path / "ds.json"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.equals(ds)
    assert back.categorical == ds.categorical


def test_snapshot_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "dpaudit-dataset/1"}')
    with pytest.raises((DataError, ValueError)):
        load_dataset(path)
