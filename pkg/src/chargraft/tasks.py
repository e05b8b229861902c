"""Task definitions, file formats, and result rows for the downstream harness.

Four task kinds with plain-text formats:
  sequence_classification  one "label<TAB>text" per line
  sequence_tagging         "word<TAB>label" lines, blank line between sentences
  word_classification      "label<TAB>target_word_index<TAB>text" per line
  ranking                  "query_id<TAB>is_selected<TAB>query<TAB>passage"

Ranking rows sharing a query_id form one candidate group with exactly one
selected passage. Parsers and writers round-trip: parse(write(x)) == x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

TASK_KINDS = ("sequence_classification", "sequence_tagging",
              "word_classification", "ranking")
PARTITIONS = ("train", "dev", "test")


@dataclass
class ClassificationInstance:
    label: str
    text: str


@dataclass
class TaggingInstance:
    words: list
    labels: list

    def __post_init__(self):
        if len(self.words) != len(self.labels):
            raise ValueError(
                f"{len(self.words)} words but {len(self.labels)} labels")
        if not self.words:
            raise ValueError("empty tagging instance")


@dataclass
class WordClassificationInstance:
    label: str
    target_index: int
    text: str

    def __post_init__(self):
        n = len(self.text.split())
        if not 0 <= self.target_index < n:
            raise ValueError(
                f"target index {self.target_index} outside {n}-word text")


@dataclass
class RankingGroup:
    query_id: str
    query: str
    passages: list  # (passage_text, is_selected) pairs

    def __post_init__(self):
        if not self.passages:
            raise ValueError(f"query {self.query_id}: no passages")
        n_sel = sum(1 for _, s in self.passages if s)
        if n_sel != 1:
            raise ValueError(
                f"query {self.query_id}: {n_sel} selected passages, want 1")

    @property
    def gold_index(self) -> int:
        return next(i for i, (_, s) in enumerate(self.passages) if s)


@dataclass
class TaskSpec:
    kind: str
    partitions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")

    @property
    def label_set(self) -> list:
        """Sorted labels over all partitions (empty for ranking)."""
        labels = set()
        for instances in self.partitions.values():
            for inst in instances:
                if isinstance(inst, TaggingInstance):
                    labels.update(inst.labels)
                elif isinstance(inst, RankingGroup):
                    pass
                else:
                    labels.add(inst.label)
        return sorted(labels)

    def __getitem__(self, partition: str):
        return self.partitions[partition]


@dataclass
class EvalResult:
    task: str
    setup: str
    partition: str
    metric: str
    value: float
    epoch: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    def as_row(self) -> str:
        return "\t".join([self.task, self.setup, self.partition, self.metric,
                          f"{self.value:.6f}", str(self.epoch), str(self.seed)])

    ROW_HEADER = "task\tsetup\tpartition\tmetric\tvalue\tepoch\tseed"


# --- parsers -----------------------------------------------------------------------


def _read_lines(path):
    return Path(path).read_text(encoding="utf-8").splitlines()


def parse_classification_file(path) -> list:
    out = []
    for i, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{i}: want label<TAB>text, got {line!r}")
        out.append(ClassificationInstance(parts[0], parts[1]))
    return out


def parse_tagging_file(path) -> list:
    out, words, labels = [], [], []
    for i, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            if words:
                out.append(TaggingInstance(words, labels))
                words, labels = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{i}: want word<TAB>label, got {line!r}")
        words.append(parts[0])
        labels.append(parts[1])
    if words:
        out.append(TaggingInstance(words, labels))
    return out


def parse_word_classification_file(path) -> list:
    out = []
    for i, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(
                f"{path}:{i}: want label<TAB>index<TAB>text, got {line!r}")
        try:
            index = int(parts[1])
        except ValueError:
            raise ValueError(
                f"{path}:{i}: target index {parts[1]!r} is not an integer")
        out.append(WordClassificationInstance(parts[0], index, parts[2]))
    return out


def parse_ranking_file(path) -> list:
    groups = {}
    order = []
    queries = {}
    for i, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(
                f"{path}:{i}: want qid<TAB>selected<TAB>query<TAB>passage, "
                f"got {line!r}")
        qid, sel, query, passage = parts
        if sel not in ("0", "1"):
            raise ValueError(f"{path}:{i}: is_selected must be 0 or 1")
        if qid not in groups:
            groups[qid] = []
            order.append(qid)
            queries[qid] = query
        elif queries[qid] != query:
            raise ValueError(f"{path}:{i}: query text changed within {qid!r}")
        groups[qid].append((passage, sel == "1"))
    return [RankingGroup(qid, queries[qid], groups[qid]) for qid in order]


_PARSERS = {
    "sequence_classification": parse_classification_file,
    "sequence_tagging": parse_tagging_file,
    "word_classification": parse_word_classification_file,
    "ranking": parse_ranking_file,
}


def parse_partition(kind: str, path) -> list:
    """Read one partition file of the given task kind."""
    if kind not in _PARSERS:
        raise ValueError(f"unknown task kind {kind!r}")
    return _PARSERS[kind](path)


def load_task(kind: str, train, dev, test=None) -> TaskSpec:
    """Read a task's partitions from files; test may be omitted."""
    if kind not in _PARSERS:
        raise ValueError(f"unknown task kind {kind!r}")
    parse = _PARSERS[kind]
    partitions = {"train": parse(train), "dev": parse(dev)}
    if test is not None:
        partitions["test"] = parse(test)
    for name, data in partitions.items():
        if not data:
            raise ValueError(f"partition {name!r} is empty")
    return TaskSpec(kind, partitions)


# --- writers -----------------------------------------------------------------------


def write_classification_file(path, instances) -> None:
    lines = [f"{x.label}\t{x.text}" for x in instances]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_tagging_file(path, instances) -> None:
    blocks = ["\n".join(f"{w}\t{t}" for w, t in zip(x.words, x.labels))
              for x in instances]
    Path(path).write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


def write_word_classification_file(path, instances) -> None:
    lines = [f"{x.label}\t{x.target_index}\t{x.text}" for x in instances]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ranking_file(path, groups) -> None:
    lines = []
    for g in groups:
        for passage, selected in g.passages:
            lines.append(f"{g.query_id}\t{int(selected)}\t{g.query}\t{passage}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


WRITERS = {
    "sequence_classification": write_classification_file,
    "sequence_tagging": write_tagging_file,
    "word_classification": write_word_classification_file,
    "ranking": write_ranking_file,
}
