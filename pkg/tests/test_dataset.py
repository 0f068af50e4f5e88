import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agreenet.dataset import (
    MISSING,
    AnnotationSet,
    DataParseError,
    DataValidationError,
    agreement_targets,
    annotator_class_counts,
    load_annotations,
    majority_vote,
    save_csv,
    save_jsonl,
)


def _set(labels, d=2):
    labels = np.asarray(labels)
    feats = np.arange(labels.shape[0] * d, dtype=float).reshape(labels.shape[0], d)
    return AnnotationSet.from_arrays(feats, labels)


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def small_jsonl(tmp_path):
    return _write_jsonl(
        tmp_path / "small.jsonl",
        [
            {"id": "x1", "features": [0.1, 0.2], "labels": {"ann1": 1, "ann2": 0}},
            {"id": "x2", "features": [0.3, 0.4], "labels": {"ann1": 1, "ann2": None}},
            {"id": "x3", "features": [0.5, 0.6], "labels": {"ann1": 0, "ann2": 0}},
        ],
    )


class TestLoad:
    def test_readback(self, small_jsonl):
        a = load_annotations(small_jsonl, "jsonl")
        assert a.n_samples == 3
        assert a.n_annotators == 2
        assert int(a.present.sum()) == 5
        assert a.labels[1, 1] == MISSING
        assert a.ids == ("x1", "x2", "x3")
        np.testing.assert_array_equal(a.weights[a.present], 1.0)

    def test_absent_key_is_missing(self, tmp_path):
        p = _write_jsonl(
            tmp_path / "a.jsonl",
            [
                {"id": "1", "features": [1.0], "labels": {"a": 1, "b": 1}},
                {"id": "2", "features": [2.0], "labels": {"a": 0}},
            ],
        )
        a = load_annotations(p)
        assert a.labels.tolist() == [[1, 1], [0, MISSING]]

    def test_all_missing_row_names_sample(self, tmp_path):
        p = _write_jsonl(
            tmp_path / "a.jsonl",
            [
                {"id": "ok", "features": [1.0], "labels": {"a": 1, "b": 0}},
                {"id": "lonely", "features": [2.0], "labels": {"a": None, "b": None}},
            ],
        )
        with pytest.raises(DataValidationError) as exc:
            load_annotations(p)
        assert exc.value.sample_id == "lonely"
        assert exc.value.line == 2
        assert "lonely" in str(exc.value)

    def test_non_binary_label(self, tmp_path):
        p = _write_jsonl(tmp_path / "a.jsonl", [{"id": "1", "features": [1.0], "labels": {"a": 2, "b": 0}}])
        with pytest.raises(DataValidationError, match="not 0/1"):
            load_annotations(p)

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('{"id": "1", "features": [1.0], "labels": {"a": 1, "b": 0}}\n{"id": \n')
        with pytest.raises(DataParseError) as exc:
            load_annotations(p)
        assert exc.value.line == 2

    def test_ragged_features(self, tmp_path):
        p = _write_jsonl(
            tmp_path / "a.jsonl",
            [
                {"id": "1", "features": [1.0, 2.0], "labels": {"a": 1, "b": 0}},
                {"id": "2", "features": [1.0], "labels": {"a": 1, "b": 0}},
            ],
        )
        with pytest.raises(DataValidationError, match="dimensionality"):
            load_annotations(p)

    def test_csv(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("id,f1,f2,ann:r1,ann:r2,ann:r3\nu,0.5,1,1,,0\nv,2,3,,,1\n")
        a = load_annotations(p, "csv")
        assert a.annotator_ids == ("r1", "r2", "r3")
        assert a.labels.tolist() == [[1, MISSING, 0], [MISSING, MISSING, 1]]
        np.testing.assert_array_equal(a.features, [[0.5, 1.0], [2.0, 3.0]])

    def test_csv_wrong_field_count(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("id,f1,ann:r1,ann:r2\nu,0.5,1\n")
        with pytest.raises(DataParseError) as exc:
            load_annotations(p, "csv")
        assert exc.value.line == 2

    @pytest.mark.parametrize("fmt", ["jsonl", "csv"])
    def test_roundtrip(self, tmp_path, fmt):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, size=(20, 3))
        labels[rng.random((20, 3)) < 0.3] = MISSING
        labels[:, 0] = np.where((labels == MISSING).all(axis=1), 1, labels[:, 0])
        a = AnnotationSet.from_arrays(rng.standard_normal((20, 4)), labels)
        path = tmp_path / f"d.{fmt}"
        (save_jsonl if fmt == "jsonl" else save_csv)(a, path)
        b = load_annotations(path, fmt)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.features, b.features)
        assert a.ids == b.ids


def test_immutable():
    a = _set([[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        a.labels[0, 0] = 0


def test_needs_two_annotators():
    with pytest.raises(DataValidationError):
        _set([[1], [0]])


class TestAgreementTargets:
    @pytest.mark.parametrize(
        "row, expected",
        [([1, 1, 1], 1.0), ([0, 0, MISSING], 0.0), ([1, 1, 0], 2 / 3), ([1, MISSING, 0], 0.5)],
    )
    def test_values(self, row, expected):
        a = _set([row, [0, 1, 1]])
        assert agreement_targets(a)[0] == pytest.approx(expected, abs=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_matches_recount(self, data):
        n = data.draw(st.integers(1, 12))
        j = data.draw(st.integers(2, 6))
        rows = []
        for _ in range(n):
            row = data.draw(st.lists(st.sampled_from([0, 1, MISSING]), min_size=j, max_size=j))
            if all(v == MISSING for v in row):
                row[data.draw(st.integers(0, j - 1))] = data.draw(st.sampled_from([0, 1]))
            rows.append(row)
        a = _set(rows)
        alpha = agreement_targets(a)
        for i, row in enumerate(rows):
            present = [v for v in row if v != MISSING]
            assert Fraction(alpha[i]).limit_denominator(64) == Fraction(sum(present), len(present))
        perm = data.draw(st.permutations(range(j)))
        shuffled = _set(np.asarray(rows)[:, perm])
        np.testing.assert_array_equal(agreement_targets(shuffled), alpha)
        votes = majority_vote(a)
        assert np.all(votes[alpha > 0.5] == 1)
        assert np.all(votes[alpha < 0.5] == 0)

    def test_locality(self):
        a = _set([[1, 0, 1], [0, MISSING, 1], [1, 1, 1]])
        b = _set([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
        np.testing.assert_array_equal(agreement_targets(a)[[0, 2]], agreement_targets(b)[[0, 2]])


class TestMajorityVote:
    @pytest.mark.parametrize(
        "row, tie, expected",
        [
            ([1, 1, 0, MISSING], "negative", 1),
            ([1, 0, MISSING, MISSING], "negative", 0),
            ([1, 0, MISSING, MISSING], "positive", 1),
            ([0, 0, 0, 1], "negative", 0),
        ],
    )
    def test_votes(self, row, tie, expected):
        a = _set([row, [1, 1, 1, 1]])
        assert majority_vote(a, tie)[0] == expected

    def test_bad_tie_break(self):
        with pytest.raises(ValueError):
            majority_vote(_set([[1, 0]]), "coin")


class TestClassCounts:
    def test_with_missing(self):
        a = _set([[1, 0], [1, 0], [0, 1], [MISSING, 1]])
        assert annotator_class_counts(a, 0) == (2, 1, 3)

    def test_no_positives(self):
        a = _set([[0, 1]] * 5)
        assert annotator_class_counts(a, 0) == (0, 5, 5)

    def test_full_column(self):
        col = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        a = _set(np.stack([col, [1] * 10], axis=1))
        assert annotator_class_counts(a, 0) == (4, 6, 10)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            annotator_class_counts(_set([[1, 0]]), 2)
