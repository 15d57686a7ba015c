"""Dataset records, splits, per-user aggregation and the bundled synthetic corpora."""

from __future__ import annotations

import enum
import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, InputError
from .lexicon import Concept, Lexicon
from .metrics import Task
from .pos import NOUN_TAGS
from .tagging import tokenize_and_pos

logger = logging.getLogger(__name__)

SPLIT_RATIOS = (0.70, 0.15, 0.15)


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    DEV = "DEV"
    TEST = "TEST"


@dataclass(frozen=True)
class DatasetRecord:
    doc_id: str
    text: str
    label: object  # int, or tuple of 0/1 for multi-label
    split: Split | None = None
    user_id: str | None = None
    timestamp: float | None = None

    def to_dict(self) -> dict:
        d = {
            "doc_id": self.doc_id,
            "text": self.text,
            "label": list(self.label) if isinstance(self.label, tuple) else self.label,
        }
        if self.split is not None:
            d["split"] = self.split.value
        if self.user_id is not None:
            d["user_id"] = self.user_id
        if self.timestamp is not None:
            d["timestamp"] = self.timestamp
        return d


def check_label(label, task: Task, num_classes: int) -> object:
    """Validate a label against the task shape; returns its canonical form."""
    if task == Task.MULTILABEL:
        if not isinstance(label, (list, tuple)):
            raise InputError(f"multi-label label must be a list of {num_classes} bits")
        if len(label) != num_classes:
            raise InputError(f"label has {len(label)} bits, expected {num_classes}")
        if any(b not in (0, 1) or isinstance(b, bool) for b in label):
            raise InputError("multi-label bits must be 0 or 1")
        return tuple(int(b) for b in label)
    if isinstance(label, bool) or not isinstance(label, int):
        raise InputError(f"label must be a class index, got {label!r}")
    if not 0 <= label < num_classes:
        raise InputError(f"label {label} outside [0, {num_classes})")
    return label


def load_dataset(path: str | Path, task: Task | str, num_classes: int) -> list[DatasetRecord]:
    path = Path(path)
    task = Task(task)
    if not path.exists():
        raise DataError("dataset not found", str(path))
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON ({exc.msg})", str(path), lineno) from None
            if not isinstance(raw, dict):
                raise DataError("record must be an object", str(path), lineno)
            missing = {"doc_id", "text", "label"} - raw.keys()
            if missing:
                raise DataError(f"missing fields {sorted(missing)}", str(path), lineno)
            doc_id, text = raw["doc_id"], raw["text"]
            if not isinstance(doc_id, str) or not doc_id:
                raise DataError("doc_id must be a non-empty string", str(path), lineno)
            if not isinstance(text, str):
                raise DataError("text must be a string", str(path), lineno)
            if doc_id in seen:
                raise DataError(f"duplicate doc_id {doc_id!r}", str(path), lineno)
            seen.add(doc_id)
            try:
                label = check_label(raw["label"], task, num_classes)
                split = Split(str(raw["split"]).upper()) if raw.get("split") is not None else None
            except (InputError, ValueError) as exc:
                raise DataError(str(exc), str(path), lineno) from None
            ts = raw.get("timestamp")
            records.append(DatasetRecord(doc_id, text, label, split,
                                         None if raw.get("user_id") is None else str(raw["user_id"]),
                                         None if ts is None else float(ts)))
    if not records:
        logger.warning("%s contains no records", path)
    return records


def save_dataset(records: Iterable[DatasetRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def _strat_key(label) -> object:
    return label if not isinstance(label, tuple) else sum(label)


def assign_splits(records: Sequence[DatasetRecord], seed: int, ratios=SPLIT_RATIOS) -> list[DatasetRecord]:
    """Fill in missing splits, stratified by label (label count for multi-label).

    Records that already carry a split keep it.
    """
    if any(r.split is not None for r in records) and all(r.split is not None for r in records):
        return list(records)
    rng = random.Random(seed)
    groups: dict[object, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        if r.split is None:
            groups[_strat_key(r.label)].append(i)
    assigned: dict[int, Split] = {}
    for key in sorted(groups, key=repr):
        idx = groups[key]
        rng.shuffle(idx)
        n_train = round(len(idx) * ratios[0])
        n_dev = round(len(idx) * ratios[1])
        for j, i in enumerate(idx):
            assigned[i] = Split.TRAIN if j < n_train else Split.DEV if j < n_train + n_dev else Split.TEST
    return [r if r.split is not None else DatasetRecord(r.doc_id, r.text, r.label, assigned[i], r.user_id, r.timestamp)
            for i, r in enumerate(records)]


def by_split(records: Sequence[DatasetRecord]) -> dict[Split, list[DatasetRecord]]:
    out: dict[Split, list[DatasetRecord]] = {s: [] for s in Split}
    for r in records:
        out[r.split or Split.TRAIN].append(r)
    return out


def aggregate_users(records: Sequence[DatasetRecord]) -> list[DatasetRecord]:
    """Concatenate each user's posts chronologically into one document.

    Records without a user id pass through unchanged. All posts of a user must
    share the label and split.
    """
    users: dict[str, list[DatasetRecord]] = defaultdict(list)
    out: list[DatasetRecord] = []
    order: list[str] = []
    for r in records:
        if r.user_id is None:
            out.append(r)
            continue
        if r.user_id not in users:
            order.append(r.user_id)
        users[r.user_id].append(r)
    for uid in order:
        posts = users[uid]
        if len({p.label for p in posts}) > 1:
            raise DataError(f"user {uid!r} has posts with different labels")
        if len({p.split for p in posts}) > 1:
            raise DataError(f"user {uid!r} has posts in different splits")
        posts = sorted(posts, key=lambda p: (p.timestamp if p.timestamp is not None else float("inf")))
        text = "\n".join(p.text for p in posts)
        out.append(DatasetRecord(uid, text, posts[0].label, posts[0].split, uid, posts[0].timestamp))
    return out


def majority_vote(task: Task, labels: Sequence) -> object:
    """Per-user vote over post decisions; ties go to the lower class, 0.5 counts as positive."""
    if not labels:
        raise InputError("no labels to vote over")
    if task == Task.MULTILABEL:
        n = len(labels)
        width = len(labels[0])
        return tuple(int(2 * sum(lab[j] for lab in labels) >= n) for j in range(width))
    counts: dict[int, int] = defaultdict(int)
    for lab in labels:
        counts[int(lab)] += 1
    return min(counts, key=lambda c: (-counts[c], c))


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------
#
# Each planted concept is a two-noun phrase. A document always contains both
# words of every planted pair it uses; the label decides only whether the two
# words are adjacent and in lexicon order. Positive and negative documents
# therefore have the same multiset of words and punctuation, so a model that
# never sees tagged concepts (and has no positional encoding) cannot beat
# chance, while the tagger turns an adjacent pair into one concept unit.

PHQ9_LABELS = (
    "little interest or pleasure",
    "feeling down or hopeless",
    "sleep trouble",
    "tiredness or low energy",
    "appetite change",
    "feeling of failure",
    "trouble concentrating",
    "slowness or restlessness",
    "thoughts of self-harm",
)
CAMS_LABELS = ("No reason", "Bias or abuse", "Jobs and careers", "Medication", "Relationship", "Alienation")
BINARY_LABELS = ("non-depressed", "depressed")

PHQ9_PAIRS = (
    ("interest", "loss"),
    ("mood", "swings"),
    ("sleep", "problems"),
    ("energy", "crash"),
    ("appetite", "change"),
    ("guilt", "thoughts"),
    ("concentration", "issues"),
    ("restlessness", "episodes"),
    ("suicide", "ideation"),
)
CAMS_PAIRS = (
    ("routine", "boredom"),
    ("bias", "trauma"),
    ("career", "setback"),
    ("pill", "dosage"),
    ("partner", "breakup"),
    ("friend", "isolation"),
)
FILLER = (
    "coffee song weekend movie city garden kitchen window breakfast holiday phone laptop bus train "
    "street park book game dog cat dinner lunch rain snow office school class teacher neighbor "
    "sister brother cousin party beach river forest road car bike shop market"
).split()

SYNTHETIC_KINDS = ("binary", "multilabel", "multiclass")


def _slug(a: str, b: str) -> str:
    return f"dfo:{a}_{b}"


def synthetic_lexicon(kind: str) -> Lexicon:
    if kind == "multiclass":
        return Lexicon(Concept(_slug(a, b), f"{a} {b}", definition=f"cause: {CAMS_LABELS[i]}")
                       for i, (a, b) in enumerate(CAMS_PAIRS))
    return Lexicon(Concept(_slug(a, b), f"{a} {b}", phq9_category=i + 1, definition=PHQ9_LABELS[i])
                   for i, (a, b) in enumerate(PHQ9_PAIRS))


def _render(slots: list[str], seps: list[str]) -> str:
    out = []
    capital = True
    for word, sep in zip(slots, seps):
        out.append((word.capitalize() if capital else word) + sep)
        capital = sep == ". "
    return "".join(out).strip()


def _layout(rng: random.Random, n_words: int) -> list[str]:
    """Separators after each word: chunks of 2-4 words split by ', ' or '. '."""
    seps: list[str] = []
    while len(seps) < n_words:
        size = rng.randint(2, 4)
        seps.extend([" "] * (size - 1) + [rng.choice([", ", ". "])])
    seps = seps[:n_words]
    seps[-1] = "."
    return seps


def _adjacent(slots: list[str], seps: list[str], a: str, b: str) -> bool:
    return any(slots[i] == a and slots[i + 1] == b and seps[i] == " " for i in range(len(slots) - 1))


def _place(rng: random.Random, words: list[str], seps: list[str], pairs, positive) -> list[str]:
    """Shuffle ``words`` until every pair's adjacency equals its flag."""
    slots = list(words)
    pair_words = {w for p in pairs for w in p}
    for _ in range(10_000):
        rng.shuffle(slots)
        # pull each positive pair together at a random in-chunk position
        for (a, b), pos in zip(pairs, positive):
            if not pos:
                continue
            joints = [i for i in range(len(slots) - 1) if seps[i] == " "
                      and slots[i] not in pair_words and slots[i + 1] not in pair_words]
            if not joints:
                break
            i = rng.choice(joints)
            ia, ib = slots.index(a), slots.index(b)
            slots[i], slots[ia] = slots[ia], slots[i]
            ib = slots.index(b)
            slots[i + 1], slots[ib] = slots[ib], slots[i + 1]
        if all(_adjacent(slots, seps, a, b) == bool(pos) for (a, b), pos in zip(pairs, positive)):
            return slots
    raise RuntimeError("could not place planted pairs")  # unreachable for the bundled sizes


def make_synthetic(kind: str, n_docs: int = 500, seed: int = 0) -> tuple[list[DatasetRecord], Lexicon]:
    """Deterministic planted-signal corpus of ``kind`` ('binary', 'multilabel', 'multiclass')."""
    if kind not in SYNTHETIC_KINDS:
        raise InputError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if not 1 <= n_docs <= 500:
        raise InputError("synthetic corpora hold between 1 and 500 documents")
    rng = random.Random(f"kinn-synthetic/{kind}/{seed}")
    records = []
    for d in range(n_docs):
        if kind == "binary":
            pairs = [rng.choice(PHQ9_PAIRS)]
            label: object = d % 2
            flags = [label]
            n_fill = rng.randint(6, 10)
        elif kind == "multilabel":
            pairs = list(PHQ9_PAIRS)
            bits = [int(rng.random() < 0.35) for _ in pairs]
            label = tuple(bits)
            flags = bits
            n_fill = rng.randint(6, 10)
        else:
            pairs = list(CAMS_PAIRS)
            label = d % len(CAMS_PAIRS)
            flags = [int(i == label) for i in range(len(pairs))]
            n_fill = rng.randint(6, 10)
        words = [w for p in pairs for w in p] + rng.sample(FILLER, n_fill)
        seps = _layout(rng, len(words))
        slots = _place(rng, words, seps, pairs, flags)
        text = _render(slots, seps)
        records.append(DatasetRecord(f"{kind[:2]}{d:04d}", text, label))
    records = assign_splits(records, seed)
    return records, synthetic_lexicon(kind)


def assert_all_nouns(text: str) -> None:
    """Every word of a synthetic document must tag as a noun, or the planted pairs could be missed."""
    bad = [t.text for t in tokenize_and_pos(text) if t.text.isalnum() and t.pos not in NOUN_TAGS]
    if bad:
        raise AssertionError(f"non-noun words {bad} in {text!r}")


def bundled(name: str) -> Path:
    """Path of a file shipped in the package's resources directory."""
    path = Path(__file__).with_name("resources") / name
    if not path.exists():
        raise DataError("no such bundled resource", str(path))
    return path
