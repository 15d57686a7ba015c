import logging
from collections import Counter

import pytest

from conftest import write_jsonl
from kinn.data import (
    SYNTHETIC_KINDS,
    DatasetRecord,
    Split,
    aggregate_users,
    assert_all_nouns,
    assign_splits,
    by_split,
    load_dataset,
    majority_vote,
    make_synthetic,
    save_dataset,
)
from kinn.errors import DataError, InputError
from kinn.metrics import Task
from kinn.tagging import tag_document


def test_loads_three_records(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [
        {"doc_id": "a", "text": "x", "label": 0},
        {"doc_id": "b", "text": "y", "label": 1, "split": "dev"},
        {"doc_id": "c", "text": "z", "label": 1, "user_id": 7, "timestamp": 3},
    ])
    recs = load_dataset(path, Task.BINARY, 2)
    assert [r.doc_id for r in recs] == ["a", "b", "c"]
    assert recs[1].split == Split.DEV
    assert recs[2].user_id == "7" and recs[2].timestamp == 3.0


def test_wrong_label_width_names_the_line(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [
        {"doc_id": "a", "text": "x", "label": [0] * 9},
        {"doc_id": "b", "text": "y", "label": [0] * 8},
    ])
    with pytest.raises(DataError, match=r"d\.jsonl:2: .*8 bits, expected 9"):
        load_dataset(path, Task.MULTILABEL, 9)


@pytest.mark.parametrize("row,msg", [
    ({"doc_id": "a", "text": "x"}, "missing"),
    ({"doc_id": "", "text": "x", "label": 0}, "doc_id"),
    ({"doc_id": "a", "text": "x", "label": 2}, "outside"),
    ({"doc_id": "a", "text": "x", "label": True}, "class index"),
    ({"doc_id": "a", "text": "x", "label": 0, "split": "holdout"}, "holdout"),
])
def test_bad_records(tmp_path, row, msg):
    path = write_jsonl(tmp_path / "d.jsonl", [row])
    with pytest.raises(DataError, match=msg):
        load_dataset(path, Task.BINARY, 2)


def test_malformed_json_and_duplicates(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"doc_id": "a", "text": "x", "label": 0}\n{oops\n')
    with pytest.raises(DataError, match=":2"):
        load_dataset(path, Task.BINARY, 2)
    write_jsonl(path, [{"doc_id": "a", "text": "x", "label": 0}] * 2)
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(path, Task.BINARY, 2)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.jsonl", Task.BINARY, 2)


def test_empty_file_warns(tmp_path, caplog):
    (tmp_path / "d.jsonl").write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_dataset(tmp_path / "d.jsonl", Task.BINARY, 2) == []
    assert "no records" in caplog.text


def test_save_load_round_trip(tmp_path):
    recs = [DatasetRecord("a", "t", (0, 1, 1), Split.TEST), DatasetRecord("b", "u", (1, 0, 0))]
    save_dataset(recs, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl", Task.MULTILABEL, 3) == recs


def test_splits_are_stratified_and_seeded():
    recs = [DatasetRecord(str(i), "t", i % 2) for i in range(200)]
    a, b = assign_splits(recs, 3), assign_splits(recs, 3)
    assert a == b
    counts = Counter((r.split, r.label) for r in a)
    assert counts[(Split.TRAIN, 0)] == counts[(Split.TRAIN, 1)] == 70
    assert counts[(Split.DEV, 0)] == counts[(Split.TEST, 1)] == 15
    assert assign_splits(recs, 4) != a


def test_existing_splits_are_kept():
    recs = [DatasetRecord("a", "t", 0, Split.TEST), DatasetRecord("b", "t", 1, Split.DEV)]
    assert assign_splits(recs, 0) == recs
    assert by_split(recs)[Split.TRAIN] == []


def test_user_aggregation_is_chronological():
    recs = [
        DatasetRecord("p2", "second", 1, user_id="u", timestamp=2),
        DatasetRecord("solo", "alone", 0),
        DatasetRecord("p1", "first", 1, user_id="u", timestamp=1),
    ]
    out = aggregate_users(recs)
    assert [(r.doc_id, r.text) for r in out] == [("solo", "alone"), ("u", "first\nsecond")]


def test_user_aggregation_rejects_label_conflicts():
    recs = [DatasetRecord("p1", "a", 1, user_id="u"), DatasetRecord("p2", "b", 0, user_id="u")]
    with pytest.raises(DataError):
        aggregate_users(recs)


def test_majority_vote():
    assert majority_vote(Task.MULTICLASS, [2, 1, 2, 1]) == 1
    assert majority_vote(Task.BINARY, [1, 1, 0]) == 1
    assert majority_vote(Task.MULTILABEL, [(1, 0), (0, 0), (1, 1), (0, 0)]) == (1, 0)
    with pytest.raises(InputError):
        majority_vote(Task.BINARY, [])


@pytest.mark.parametrize("kind", SYNTHETIC_KINDS)
def test_synthetic_corpus(kind):
    recs, lex = make_synthetic(kind, 60, seed=1)
    again, _ = make_synthetic(kind, 60, seed=1)
    assert recs == again
    assert len({r.doc_id for r in recs}) == 60
    for r in recs:
        assert_all_nouns(r.text)
    assert all(r.split is not None for r in recs)


def test_synthetic_binary_labels_follow_tagged_pairs():
    recs, lex = make_synthetic("binary", 80, seed=2)
    for r in recs:
        tagged = tag_document(r.doc_id, r.text, lex)
        assert bool(tagged.spans) == bool(r.label), r.text


def test_unknown_synthetic_kind():
    with pytest.raises((InputError, ValueError)):
        make_synthetic("regression")
