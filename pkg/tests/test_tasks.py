"""Task file formats, instance validation, and synthetic fixture properties."""

import pytest

from chargraft.fixtures import (
    SHAPE_LABELS,
    build_word_inventory,
    make_pretrain_corpus,
    make_ranking_fixture,
    make_sequence_classification_fixture,
    make_tagging_fixture,
    make_word_classification_fixture,
    shape_label,
)
from chargraft.tasks import (
    ClassificationInstance,
    EvalResult,
    RankingGroup,
    TaggingInstance,
    TaskSpec,
    WordClassificationInstance,
    load_task,
    parse_classification_file,
    parse_ranking_file,
    parse_tagging_file,
    parse_word_classification_file,
    write_classification_file,
    write_ranking_file,
    write_tagging_file,
    write_word_classification_file,
)


# --- formats round-trip through write + parse ---


def test_classification_round_trip(tmp_path):
    items = [ClassificationInstance("pos", "a fine day"),
             ClassificationInstance("neg", "rain again")]
    path = tmp_path / "cls.tsv"
    write_classification_file(path, items)
    assert parse_classification_file(path) == items


def test_tagging_round_trip(tmp_path):
    items = [TaggingInstance(["Ana", "went", "home"], ["B-NAME", "O", "O"]),
             TaggingInstance(["stop"], ["O"])]
    path = tmp_path / "tag.tsv"
    write_tagging_file(path, items)
    assert parse_tagging_file(path) == items


def test_word_classification_round_trip(tmp_path):
    items = [WordClassificationInstance("ing", 2, "the dog running fast"),
             WordClassificationInstance("other", 0, "cat sat")]
    path = tmp_path / "wc.tsv"
    write_word_classification_file(path, items)
    assert parse_word_classification_file(path) == items


def test_ranking_round_trip(tmp_path):
    items = [RankingGroup("q1", "who won", [("team a won", True),
                                            ("weather is dry", False)]),
             RankingGroup("q2", "best pie", [("apples", False),
                                             ("pie recipe", True)])]
    path = tmp_path / "rank.tsv"
    write_ranking_file(path, items)
    assert parse_ranking_file(path) == items


def test_parse_errors_name_the_line(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("pos\tok line\nno tab here\n")
    with pytest.raises(ValueError, match=":2:"):
        parse_classification_file(bad)
    bad.write_text("word\tO\nonly-one-field\n")
    with pytest.raises(ValueError, match=":2:"):
        parse_tagging_file(bad)
    bad.write_text("lab\tnot_an_int\tsome text\n")
    with pytest.raises(ValueError, match=":1:"):
        parse_word_classification_file(bad)
    bad.write_text("q1\t2\tquery\tpassage\n")
    with pytest.raises(ValueError, match=":1:"):
        parse_ranking_file(bad)


def test_ranking_parse_rejects_inconsistent_query(tmp_path):
    bad = tmp_path / "rank.tsv"
    bad.write_text("q1\t1\tquery one\tgold\nq1\t0\tDIFFERENT\tother\n")
    with pytest.raises(ValueError, match="q1"):
        parse_ranking_file(bad)


# --- instance validation ---


def test_tagging_instance_validates_lengths():
    with pytest.raises(ValueError):
        TaggingInstance(["a", "b"], ["O"])
    with pytest.raises(ValueError):
        TaggingInstance([], [])


def test_word_classification_index_range():
    with pytest.raises(ValueError):
        WordClassificationInstance("x", 2, "two words")
    with pytest.raises(ValueError):
        WordClassificationInstance("x", -1, "two words")


def test_ranking_group_needs_exactly_one_gold():
    with pytest.raises(ValueError):
        RankingGroup("q", "query", [("a", False), ("b", False)])
    with pytest.raises(ValueError):
        RankingGroup("q", "query", [("a", True), ("b", True)])
    group = RankingGroup("q", "query", [("a", False), ("b", True)])
    assert group.gold_index == 1


def test_task_spec_label_set_and_kinds():
    spec = TaskSpec("sequence_classification", {
        "train": [ClassificationInstance("b", "x"),
                  ClassificationInstance("a", "y")],
        "dev": [ClassificationInstance("c", "z")],
    })
    assert spec.label_set == ["a", "b", "c"]
    with pytest.raises(ValueError):
        TaskSpec("nonsense", {"train": []})


def test_load_task_reads_files_and_rejects_empty(tmp_path):
    train, dev = tmp_path / "train.tsv", tmp_path / "dev.tsv"
    write_classification_file(train, [ClassificationInstance("a", "x y")])
    write_classification_file(dev, [ClassificationInstance("b", "z")])
    spec = load_task("sequence_classification", train, dev)
    assert spec.label_set == ["a", "b"]
    assert "test" not in spec.partitions
    (tmp_path / "empty.tsv").write_text("\n")
    with pytest.raises(ValueError, match="empty"):
        load_task("sequence_classification", tmp_path / "empty.tsv", dev)


def test_eval_result_bounds_and_row():
    row = EvalResult("ranking", "none", "dev", "mrr", 0.5, 3, 7).as_row()
    assert row.split("\t") == ["ranking", "none", "dev", "mrr", "0.500000",
                               "3", "7"]
    with pytest.raises(ValueError):
        EvalResult("ranking", "none", "dev", "mrr", 1.5, 0, 0)


# --- fixtures ---


def test_shape_label_oracle():
    assert shape_label("running") == "ing"
    assert shape_label("jumped") == "ed"
    assert shape_label("fuzz") == "dbl"
    assert shape_label("cat") == "other"
    # "ing" outranks the double-letter rule
    assert shape_label("falling") == "ing"
    assert set(SHAPE_LABELS) == {"ing", "ed", "dbl", "other"}


def test_inventory_deterministic_and_lowercase():
    a = build_word_inventory(50, seed=3)
    b = build_word_inventory(50, seed=3)
    assert a == b
    assert a != build_word_inventory(50, seed=4)
    assert all(w.isalpha() and w == w.lower() for w in a)


def test_pretrain_corpus_size_and_determinism():
    lines = make_pretrain_corpus(seed=9, target_chars=20_000)
    # newlines count toward the budget
    assert sum(len(l) for l in lines) + len(lines) >= 20_000
    assert all(6 <= len(l.split()) <= 18 for l in lines)
    assert lines == make_pretrain_corpus(seed=9, target_chars=20_000)
    assert lines != make_pretrain_corpus(seed=10, target_chars=20_000)


def test_word_classification_fixture_properties():
    inventory = build_word_inventory(120, seed=99)
    fx = make_word_classification_fixture({"train": 40, "dev": 20}, seed=11,
                                          inventory=inventory)
    seen_targets = set()
    for part in ("train", "dev"):
        for inst in fx[part]:
            words = inst.text.split()
            target = words[inst.target_index]
            assert shape_label(target) == inst.label
            assert target not in inventory
            assert target not in seen_targets
            seen_targets.add(target)
            for i, w in enumerate(words):
                if i != inst.target_index:
                    assert shape_label(w) == "other"
    # the label cycle keeps classes balanced within one instance per class
    from collections import Counter

    counts = Counter(inst.label for inst in fx["train"])
    assert max(counts.values()) - min(counts.values()) <= 1
    again = make_word_classification_fixture({"train": 40, "dev": 20}, seed=11,
                                             inventory=inventory)
    assert fx == again


def test_sequence_classification_fixture_properties():
    fx = make_sequence_classification_fixture({"train": 30, "dev": 10}, seed=12,
                                              n_labels=5)
    labels = {inst.label for part in fx.values() for inst in part}
    assert len(labels) == 5
    assert all(inst.text.split() for part in fx.values() for inst in part)
    assert fx == make_sequence_classification_fixture({"train": 30, "dev": 10},
                                                      seed=12, n_labels=5)


def test_tagging_fixture_bio_well_formed():
    fx = make_tagging_fixture({"train": 25, "dev": 10}, seed=13)
    kinds = set()
    for part in fx.values():
        for inst in part:
            assert len(inst.words) == len(inst.labels)
            prev = "O"
            for word, lab in zip(inst.words, inst.labels):
                if lab.startswith("I-"):
                    assert prev in (f"B-{lab[2:]}", lab)
                if lab != "O":
                    kinds.add(lab.split("-", 1)[1])
                    assert word[0].isupper()
                else:
                    assert word == word.lower()
                prev = lab
    assert kinds == {"NAME", "PLACE"}
    assert fx == make_tagging_fixture({"train": 25, "dev": 10}, seed=13)


def test_ranking_fixture_gold_is_identifiable():
    fx = make_ranking_fixture({"train": 12, "dev": 6}, seed=14)
    qids = []
    for part in fx.values():
        for group in part:
            qids.append(group.query_id)
            keyword = group.query.split()[0]
            for pi, (passage, is_sel) in enumerate(group.passages):
                if pi == group.gold_index:
                    assert keyword in passage.split()
                else:
                    assert keyword not in passage.split()
                assert is_sel == (pi == group.gold_index)
    assert len(qids) == len(set(qids))
    assert fx == make_ranking_fixture({"train": 12, "dev": 6}, seed=14)
