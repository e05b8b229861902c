"""Seeded synthetic fixtures: a pretraining corpus and four task datasets.

The corpus is Zipfian over a morphology-bearing word inventory (roots plus
familiar suffixes) with sticky topic clusters, so a small LM has both
frequency and context structure to learn, and BPE produces a realistic mix
of single- and multi-token words. Task fixtures are built from the same
inventory; every label is recoverable from the text by construction.
"""

from __future__ import annotations

import bisect
import itertools

import numpy as np

from .rng import substream
from .tasks import (
    ClassificationInstance,
    RankingGroup,
    TaggingInstance,
    WordClassificationInstance,
)

VOWELS = "aeiou"
CONSONANTS = "bcdfghjklmnprstvwz"
WORD_SUFFIXES = ("s", "ed", "ing", "ly", "er")
SHAPE_LABELS = ("ing", "ed", "dbl", "other")


def _root(rng) -> str:
    """A pronounceable consonant-vowel alternation, 3 to 7 characters."""
    length = int(rng.integers(3, 8))
    start_c = bool(rng.integers(0, 2))
    chars = []
    for i in range(length):
        pool = CONSONANTS if (i % 2 == 0) == start_c else VOWELS
        chars.append(pool[int(rng.integers(0, len(pool)))])
    return "".join(chars)


def build_word_inventory(n_roots: int, seed: int) -> list:
    """Distinct word types: each root plus a few suffixed forms."""
    rng = substream(seed, "inventory")
    seen = set()
    words = []
    while len(seen) < n_roots:
        root = _root(rng)
        if root in seen:
            continue
        seen.add(root)
        words.append(root)
        for suffix in WORD_SUFFIXES:
            if rng.random() < 0.35:
                formed = root + suffix
                if formed not in seen:
                    seen.add(formed)
                    words.append(formed)
    return words


class _ZipfClusters:
    """Sticky-topic word sampler: steep Zipf within clusters plus chained runs.

    Half the time a word is followed by its cluster's next-ranked word, so
    the text carries repeated local n-grams a small LM can actually predict;
    the rest is fresh Zipf draws with occasional topic switches.  The steep
    exponent keeps token-level unigram entropy well below log(vocab), so a
    short training run can visibly close the gap.
    """

    def __init__(self, inventory, n_clusters: int, rng):
        order = rng.permutation(len(inventory))
        self.clusters = [[] for _ in range(n_clusters)]
        for pos, idx in enumerate(order):
            self.clusters[pos % n_clusters].append(inventory[int(idx)])
        self.cum = []
        for words in self.clusters:
            weights = 1.0 / (np.arange(len(words)) + 2.0) ** 3.5
            self.cum.append(np.cumsum(weights / weights.sum()))
        self.n_clusters = n_clusters

    def sentence(self, length: int, rng) -> list:
        cluster = int(rng.integers(0, self.n_clusters))
        out = []
        prev = None
        for _ in range(length):
            if rng.random() >= 0.9:
                cluster = int(rng.integers(0, self.n_clusters))
                prev = None
            words = self.clusters[cluster]
            if prev is not None and rng.random() < 0.5:
                idx = (prev + 1) % len(words)
            else:
                idx = bisect.bisect_left(self.cum[cluster], rng.random())
            word = words[idx]
            # inflection across the whole frequency range keeps the common
            # suffixes frequent enough to become stable merge units
            if rng.random() < 0.10:
                word += WORD_SUFFIXES[int(rng.integers(0, len(WORD_SUFFIXES)))]
            out.append(word)
            prev = idx
        return out


def make_pretrain_corpus(seed: int, target_chars: int = 1_000_000,
                         n_roots: int = 900, n_clusters: int = 8) -> list:
    """Lines totalling at least target_chars characters."""
    inventory = build_word_inventory(n_roots, seed)
    rng = substream(seed, "corpus")
    sampler = _ZipfClusters(inventory, n_clusters, rng)
    lines = []
    total = 0
    while total < target_chars:
        line = " ".join(sampler.sentence(int(rng.integers(6, 19)), rng))
        lines.append(line)
        total += len(line) + 1
    return lines


# --- word-shape classification ------------------------------------------------------


def shape_label(word: str) -> str:
    """Deterministic label from the word's written form alone."""
    if word.endswith("ing"):
        return "ing"
    if word.endswith("ed"):
        return "ed"
    if len(word) >= 2 and word[-1] == word[-2]:
        return "dbl"
    return "other"


def _word_of_shape(label: str, rng, taken) -> str:
    while True:
        root = _root(rng)
        if label == "ing":
            word = root + "ing"
        elif label == "ed":
            word = root + "ed"
        elif label == "dbl":
            word = root + root[-1]
        else:
            word = root
        if shape_label(word) == label and word not in taken:
            return word


def make_word_classification_fixture(sizes, seed: int, inventory=None,
                                     context_len: int = 7) -> dict:
    """Partitions of word-shape instances; label = shape_label(target word).

    sizes maps partition name to instance count. Target words are freshly
    generated (disjoint from the context inventory and between partitions),
    so dev and test words are unseen in pretraining.
    """
    rng = substream(seed, "word-task")
    inventory = inventory or build_word_inventory(200, seed + 1)
    context = [w for w in inventory if shape_label(w) == "other"]
    taken = set(inventory)
    label_cycle = itertools.cycle(SHAPE_LABELS)
    partitions = {}
    for name, count in sizes.items():
        instances = []
        for _ in range(count):
            label = next(label_cycle)
            target = _word_of_shape(label, rng, taken)
            taken.add(target)
            words = [context[int(rng.integers(0, len(context)))]
                     for _ in range(context_len)]
            idx = int(rng.integers(0, len(words) + 1))
            words.insert(idx, target)
            instances.append(WordClassificationInstance(
                label, idx, " ".join(words)))
        partitions[name] = instances
    return partitions


# --- sequence classification ---------------------------------------------------------


def make_sequence_classification_fixture(sizes, seed: int, n_labels: int = 20,
                                         inventory=None) -> dict:
    """Each label owns three signature words; instances contain two of them."""
    rng = substream(seed, "seq-task")
    inventory = inventory or build_word_inventory(200, seed + 1)
    taken = set(inventory)
    signatures = {}
    for i in range(n_labels):
        sig = []
        while len(sig) < 3:
            w = _root(rng) + _root(rng)[:2]
            if w not in taken:
                taken.add(w)
                sig.append(w)
        signatures[f"label{i:02d}"] = sig
    labels = sorted(signatures)
    partitions = {}
    for name, count in sizes.items():
        instances = []
        for j in range(count):
            label = labels[j % n_labels]
            words = [inventory[int(rng.integers(0, len(inventory)))]
                     for _ in range(int(rng.integers(5, 11)))]
            sig = signatures[label]
            for w in rng.choice(sig, size=2, replace=False):
                words.insert(int(rng.integers(0, len(words) + 1)), str(w))
            instances.append(ClassificationInstance(label, " ".join(words)))
        partitions[name] = instances
    return partitions


# --- tagging ---------------------------------------------------------------------------


def make_tagging_fixture(sizes, seed: int, inventory=None,
                         n_names: int = 30, n_places: int = 30) -> dict:
    """NER-style sentences; entities are capitalized gazetteer words."""
    rng = substream(seed, "tag-task")
    inventory = inventory or build_word_inventory(200, seed + 1)

    def gazetteer(n, salt):
        grng = substream(seed, "gazetteer", salt)
        out = set()
        while len(out) < n:
            out.add(_root(grng).capitalize())
        return sorted(out)

    names, places = gazetteer(n_names, "names"), gazetteer(n_places, "places")
    partitions = {}
    for pname, count in sizes.items():
        instances = []
        for _ in range(count):
            words = [inventory[int(rng.integers(0, len(inventory)))]
                     for _ in range(int(rng.integers(4, 9)))]
            labels = ["O"] * len(words)
            for kind, pool in (("NAME", names), ("PLACE", places)):
                if rng.random() < 0.85:
                    span_len = int(rng.integers(1, 3))
                    entity = [pool[int(rng.integers(0, len(pool)))]
                              for _ in range(span_len)]
                    # never split an existing span: insertion must not land
                    # immediately before one of its I- continuations
                    spots = [i for i in range(len(words) + 1)
                             if i == len(words) or not labels[i].startswith("I-")]
                    at = spots[int(rng.integers(0, len(spots)))]
                    words[at:at] = entity
                    labels[at:at] = [f"B-{kind}"] + [f"I-{kind}"] * (span_len - 1)
            instances.append(TaggingInstance(words, labels))
        partitions[pname] = instances
    return partitions


# --- ranking -----------------------------------------------------------------------------


def make_ranking_fixture(sizes, seed: int, n_passages: int = 4,
                         inventory=None) -> dict:
    """The selected passage is the one containing the query's keyword."""
    rng = substream(seed, "rank-task")
    inventory = inventory or build_word_inventory(200, seed + 1)

    def filler(n, avoid=None):
        out = []
        while len(out) < n:
            w = inventory[int(rng.integers(0, len(inventory)))]
            if w != avoid:
                out.append(w)
        return out

    partitions = {}
    counter = 0
    for name, count in sizes.items():
        groups = []
        for _ in range(count):
            keyword = inventory[int(rng.integers(0, len(inventory)))]
            query = f"{keyword} {' '.join(filler(2))}"
            gold = int(rng.integers(0, n_passages))
            passages = []
            for i in range(n_passages):
                words = filler(int(rng.integers(4, 8)), avoid=keyword)
                if i == gold:
                    words.insert(int(rng.integers(0, len(words) + 1)), keyword)
                passages.append((" ".join(words), i == gold))
            groups.append(RankingGroup(f"q{counter:05d}", query, passages))
            counter += 1
        partitions[name] = groups
    return partitions


# --- the bundled set ---------------------------------------------------------------------

BUNDLED_SIZES = {"train": 240, "dev": 80, "test": 80}


def bundled_fixture_set(seed: int = 0) -> dict:
    """All four task datasets under their canonical sizes, keyed by task kind.

    Context words come from the head of the pretraining corpus inventory, so
    finetuning sees in-distribution text around each instance's signal.
    """
    inventory = build_word_inventory(900, seed)[:200]
    return {
        "word_classification": make_word_classification_fixture(
            BUNDLED_SIZES, seed + 11, inventory=inventory),
        "sequence_classification": make_sequence_classification_fixture(
            BUNDLED_SIZES, seed + 12, inventory=inventory),
        "sequence_tagging": make_tagging_fixture(
            BUNDLED_SIZES, seed + 13, inventory=inventory),
        "ranking": make_ranking_fixture(
            BUNDLED_SIZES, seed + 14, inventory=inventory),
    }
