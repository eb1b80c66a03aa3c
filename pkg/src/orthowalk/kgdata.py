"""Triple files, vocabularies, the known-triple index, and negative corruption.

Triple files are UTF-8 text, one triple per line, tab-separated:

    head_name<TAB>relation_name<TAB>tail_name

Classification splits carry a fourth field, the label `1` or `-1`.  Blank
lines are ignored; a trailing carriage return is tolerated so files written
on any platform parse identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

# (head, relation, tail) as integer ids.
Triple = tuple[int, int, int]

LabeledTriple = tuple[Triple, int]


class ParseError(ValueError):
    """Malformed line in a triple file."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class VocabularyError(LookupError):
    """Name not present in a frozen vocabulary, or duplicate on construction."""


@dataclass
class Vocabulary:
    """Bidirectional entity and relation name registries.

    Ids are assigned in first-appearance order, so the same input files read
    in the same order always produce the same assignment.
    """

    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    _entity_ids: dict[str, int] = field(default_factory=dict, repr=False)
    _relation_ids: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._entity_ids = {name: i for i, name in enumerate(self.entities)}
        self._relation_ids = {name: i for i, name in enumerate(self.relations)}
        if len(self._entity_ids) != len(self.entities):
            raise VocabularyError("duplicate entity name")
        if len(self._relation_ids) != len(self.relations):
            raise VocabularyError("duplicate relation name")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown relation {name!r}") from None

    def intern_entity(self, name: str) -> int:
        """Id for `name`, registering it if unseen."""
        existing = self._entity_ids.get(name)
        if existing is not None:
            return existing
        new_id = len(self.entities)
        self.entities.append(name)
        self._entity_ids[name] = new_id
        return new_id

    def intern_relation(self, name: str) -> int:
        existing = self._relation_ids.get(name)
        if existing is not None:
            return existing
        new_id = len(self.relations)
        self.relations.append(name)
        self._relation_ids[name] = new_id
        return new_id


def _split_line(raw: str, line_number: int, n_fields: int) -> list[str]:
    line = raw.rstrip("\r\n")
    parts = line.split("\t")
    if len(parts) != n_fields:
        raise ParseError(
            line_number,
            f"expected {n_fields} tab-separated fields, got {len(parts)}",
        )
    if any(p == "" for p in parts):
        raise ParseError(line_number, "empty field")
    return parts


def parse_triples(
    lines: Iterable[str] | IO[str],
    vocab: Vocabulary | None = None,
    *,
    frozen: bool = False,
) -> tuple[list[Triple], Vocabulary]:
    """Read id triples from text lines.

    In build mode (`frozen=False`) unseen names are added to `vocab`, which
    is created on the fly when not supplied.  In frozen mode every name must
    already be registered; unknown names raise VocabularyError naming the
    offending line.
    """
    if frozen and vocab is None:
        raise ValueError("frozen parsing requires a vocabulary")
    if vocab is None:
        vocab = Vocabulary()
    triples: list[Triple] = []
    for line_number, raw in enumerate(lines, start=1):
        if raw.strip() == "":
            continue
        head_name, rel_name, tail_name = _split_line(raw, line_number, 3)
        try:
            if frozen:
                h = vocab.entity_id(head_name)
                r = vocab.relation_id(rel_name)
                t = vocab.entity_id(tail_name)
            else:
                h = vocab.intern_entity(head_name)
                r = vocab.intern_relation(rel_name)
                t = vocab.intern_entity(tail_name)
        except VocabularyError as exc:
            raise VocabularyError(f"line {line_number}: {exc}") from None
        triples.append((h, r, t))
    return triples, vocab


def parse_labeled_triples(
    lines: Iterable[str] | IO[str],
    vocab: Vocabulary | None = None,
    *,
    frozen: bool = False,
) -> tuple[list[LabeledTriple], Vocabulary]:
    """Read (triple, label) pairs; the fourth field must be `1` or `-1`."""
    if frozen and vocab is None:
        raise ValueError("frozen parsing requires a vocabulary")
    if vocab is None:
        vocab = Vocabulary()
    labeled: list[LabeledTriple] = []
    for line_number, raw in enumerate(lines, start=1):
        if raw.strip() == "":
            continue
        head_name, rel_name, tail_name, label_text = _split_line(raw, line_number, 4)
        if label_text not in ("1", "-1"):
            raise ParseError(line_number, f"label must be 1 or -1, got {label_text!r}")
        try:
            if frozen:
                triple = (
                    vocab.entity_id(head_name),
                    vocab.relation_id(rel_name),
                    vocab.entity_id(tail_name),
                )
            else:
                triple = (
                    vocab.intern_entity(head_name),
                    vocab.intern_relation(rel_name),
                    vocab.intern_entity(tail_name),
                )
        except VocabularyError as exc:
            raise VocabularyError(f"line {line_number}: {exc}") from None
        labeled.append((triple, int(label_text)))
    return labeled, vocab


def write_triples(stream: IO[str], triples: Sequence[Triple], vocab: Vocabulary) -> None:
    """Inverse of parse_triples: one tab-separated name triple per line."""
    for h, r, t in triples:
        stream.write(f"{vocab.entities[h]}\t{vocab.relations[r]}\t{vocab.entities[t]}\n")


class KnownIndex:
    """Membership and slot-completion queries over all true triples.

    Backs filtered ranking: given (h, r, ?) the index returns every tail
    known to complete the pair across all splits, and symmetrically for
    (?, r, t).
    """

    def __init__(self, splits: Iterable[Sequence[Triple]]):
        self._members: set[Triple] = set()
        self._tails: dict[tuple[int, int], set[int]] = {}
        self._heads: dict[tuple[int, int], set[int]] = {}
        for split in splits:
            for triple in split:
                h, r, t = triple
                self._members.add((h, r, t))
                self._tails.setdefault((h, r), set()).add(t)
                self._heads.setdefault((r, t), set()).add(h)

    def __contains__(self, triple: Triple) -> bool:
        return tuple(triple) in self._members

    def __len__(self) -> int:
        return len(self._members)

    def tails(self, head: int, relation: int) -> frozenset[int]:
        """All known tails t such that (head, relation, t) is true."""
        return frozenset(self._tails.get((head, relation), ()))

    def heads(self, relation: int, tail: int) -> frozenset[int]:
        """All known heads h such that (h, relation, tail) is true."""
        return frozenset(self._heads.get((relation, tail), ()))


@dataclass
class Dataset:
    """A knowledge graph split into train/valid/test plus the known index.

    `known` covers every true triple in any split (including positives of the
    labeled classification splits) and is what filtered evaluation consults.
    Treat all fields as read-only after construction.
    """

    vocab: Vocabulary
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    known: KnownIndex
    labeled_valid: list[LabeledTriple] | None = None
    labeled_test: list[LabeledTriple] | None = None


def build_dataset(
    vocab: Vocabulary,
    train: list[Triple],
    valid: list[Triple],
    test: list[Triple],
    labeled_valid: list[LabeledTriple] | None = None,
    labeled_test: list[LabeledTriple] | None = None,
) -> Dataset:
    """Assemble a Dataset, deriving the known-triple index."""
    positive_splits: list[Sequence[Triple]] = [train, valid, test]
    for labeled in (labeled_valid, labeled_test):
        if labeled:
            positive_splits.append([t for t, lab in labeled if lab == 1])
    return Dataset(
        vocab=vocab,
        train=train,
        valid=valid,
        test=test,
        known=KnownIndex(positive_splits),
        labeled_valid=labeled_valid,
        labeled_test=labeled_test,
    )


def load_dataset(
    train_path: str | Path,
    valid_path: str | Path | None = None,
    test_path: str | Path | None = None,
    labeled_valid_path: str | Path | None = None,
    labeled_test_path: str | Path | None = None,
) -> Dataset:
    """Load a dataset from triple files.

    The vocabulary is built over the union of all provided files, scanned in
    the order train, valid, test, labeled valid, labeled test.  When a plain
    valid/test file is absent but a labeled one is present, the positives of
    the labeled split stand in for it, so link-prediction validation still
    works on classification datasets.
    """

    def read(path, parser):
        with open(path, "r", encoding="utf-8") as f:
            items, _ = parser(f, vocab)
        return items

    vocab = Vocabulary()
    train = read(train_path, parse_triples)
    valid = read(valid_path, parse_triples) if valid_path else []
    test = read(test_path, parse_triples) if test_path else []
    labeled_valid = (
        read(labeled_valid_path, parse_labeled_triples) if labeled_valid_path else None
    )
    labeled_test = (
        read(labeled_test_path, parse_labeled_triples) if labeled_test_path else None
    )
    if not valid and labeled_valid:
        valid = [t for t, lab in labeled_valid if lab == 1]
    if not test and labeled_test:
        test = [t for t, lab in labeled_test if lab == 1]
    return build_dataset(vocab, train, valid, test, labeled_valid, labeled_test)


def sample_negatives(
    positive: Triple,
    count: int,
    rng: np.random.Generator,
    n_entities: int,
) -> list[Triple]:
    """Corrupt `positive` into `count` negatives.

    Each negative replaces the head or the tail (chosen with probability 1/2)
    by an entity drawn uniformly from the vocabulary minus the replaced one.
    No filtering against known triples: a corruption that happens to be a
    true triple is kept, matching the training objective.
    """
    if n_entities < 2:
        raise ValueError("need at least 2 entities to corrupt a slot")
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    h, r, t = positive
    corrupt_head = rng.random(count) < 0.5
    original = np.where(corrupt_head, h, t)
    # Uniform over all entities except the original: draw from n-1 values
    # and shift past the excluded id.
    draws = rng.integers(0, n_entities - 1, size=count)
    replacements = draws + (draws >= original)
    out: list[Triple] = []
    for keep_head, rep in zip(corrupt_head, replacements):
        if keep_head:
            out.append((int(rep), r, t))
        else:
            out.append((h, r, int(rep)))
    return out


def sample_negative_batch(
    positives: np.ndarray,
    count: int,
    rng: np.random.Generator,
    n_entities: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized corruption for a (B, 3) batch of positives.

    Returns (replacement_ids, corrupt_head), both shaped (B, count).  Where
    corrupt_head[i, k] is True, negative k of positive i replaces the head
    with replacement_ids[i, k]; otherwise it replaces the tail.
    """
    if n_entities < 2:
        raise ValueError("need at least 2 entities to corrupt a slot")
    positives = np.asarray(positives)
    b = positives.shape[0]
    corrupt_head = rng.random((b, count)) < 0.5
    original = np.where(corrupt_head, positives[:, 0:1], positives[:, 2:3])
    draws = rng.integers(0, n_entities - 1, size=(b, count))
    replacements = draws + (draws >= original)
    return replacements, corrupt_head


def corruption_labeled(
    triples: Sequence[Triple],
    rng: np.random.Generator,
    n_entities: int,
) -> list[LabeledTriple]:
    """Labeled split built by pairing each positive with one corruption.

    Used when a classification dataset ships no explicit negatives.
    """
    out: list[LabeledTriple] = []
    for triple in triples:
        negative = sample_negatives(triple, 1, rng, n_entities)[0]
        out.append((triple, 1))
        out.append((negative, -1))
    return out
