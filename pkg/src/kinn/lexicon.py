"""Concept ontology, phrase index, similarity expansion and UMLS lookups.

A concept file holds one JSON object per line::

    {"id": "c1", "label": "suicidal thoughts", "synonyms": ["suicidal ideation"],
     "phq9": 9, "definition": null, "source": "DFO"}

Phrases are normalized (lowercase, single spaces, edge punctuation stripped)
before they enter the index, and queries go through the same normalization.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import string
import threading
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Protocol, runtime_checkable

import numpy as np

from . import backends
from .encoding import EncoderBackend, embed_phrase
from .errors import BackendError, DataError, InputError, LexiconError

logger = logging.getLogger(__name__)

_WS_RE = re.compile(r"\s+")
_EDGE_PUNCT = string.punctuation + "“”‘’«»…–—"
CUI_RE = re.compile(r"^C\d+$")


def normalize_phrase(phrase: str) -> str:
    """Lowercase, collapse internal whitespace, strip punctuation at both edges."""
    s = _WS_RE.sub(" ", phrase.lower()).strip()
    return s.strip(_EDGE_PUNCT + " ")


class ConceptSource(str, enum.Enum):
    DFO = "DFO"
    UMLS = "UMLS"
    EXPANDED = "EXPANDED"


@dataclass(frozen=True)
class Concept:
    id: str
    preferred_label: str
    synonyms: tuple[str, ...] = ()
    phq9_category: int | None = None
    definition: str | None = None
    source: ConceptSource = ConceptSource.DFO

    def __post_init__(self) -> None:
        if not self.id:
            raise LexiconError("concept id must be non-empty")
        label = normalize_phrase(self.preferred_label)
        if not label:
            raise LexiconError(f"concept {self.id}: empty label")
        syns = tuple(normalize_phrase(s) for s in self.synonyms)
        if label in syns:
            raise LexiconError(f"concept {self.id}: synonym duplicates label {label!r}")
        if len(set(syns)) != len(syns):
            raise LexiconError(f"concept {self.id}: duplicate synonym")
        if any(not s for s in syns):
            raise LexiconError(f"concept {self.id}: empty synonym")
        if self.phq9_category is not None and not (1 <= self.phq9_category <= 9):
            raise LexiconError(f"concept {self.id}: phq9 category {self.phq9_category} outside 1..9")
        object.__setattr__(self, "preferred_label", label)
        object.__setattr__(self, "synonyms", syns)
        object.__setattr__(self, "source", ConceptSource(self.source))

    @property
    def phrases(self) -> tuple[str, ...]:
        return (self.preferred_label, *self.synonyms)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "label": self.preferred_label,
            "synonyms": list(self.synonyms),
            "phq9": self.phq9_category,
            "definition": self.definition,
            "source": self.source.value,
        }


class Lexicon:
    """Immutable concept table with a normalized phrase -> concept ids index."""

    def __init__(self, concepts: Iterable[Concept] = ()):
        table: dict[str, Concept] = {}
        index: dict[str, set[str]] = {}
        for c in concepts:
            if c.id in table:
                raise LexiconError(f"duplicate concept id {c.id!r}")
            table[c.id] = c
            for p in c.phrases:
                index.setdefault(p, set()).add(c.id)
        self._concepts = MappingProxyType(table)
        self._index = MappingProxyType({p: frozenset(ids) for p, ids in index.items()})
        self._emb_lock = threading.Lock()
        self._emb_cache: dict[str, tuple[list[tuple[str, str]], np.ndarray]] = {}

    @property
    def concepts(self) -> Mapping[str, Concept]:
        return self._concepts

    @property
    def phrase_index(self) -> Mapping[str, frozenset[str]]:
        return self._index

    def __len__(self) -> int:
        return len(self._concepts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Lexicon):
            return NotImplemented
        return dict(self._concepts) == dict(other._concepts)

    def __hash__(self) -> int:
        return id(self)

    def phrase_matrix(self, embedder: EncoderBackend) -> tuple[list[tuple[str, str]], np.ndarray]:
        """(phrase, concept id) pairs and their unit-normalized embeddings, cached per backend."""
        key = f"{embedder.name}:{id(embedder)}"
        with self._emb_lock:
            hit = self._emb_cache.get(key)
        if hit is not None:
            return hit
        pairs = sorted((p, cid) for p, ids in self._index.items() for cid in ids)
        phrases = sorted(self._index)
        vecs = {p: embed_phrase(embedder, p) for p in phrases}
        if pairs:
            mat = np.stack([vecs[p] for p, _ in pairs])
            norms = np.linalg.norm(mat, axis=1, keepdims=True)
            mat = np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)
        else:
            mat = np.zeros((0, embedder.dim))
        with self._emb_lock:
            self._emb_cache[key] = (pairs, mat)
        return pairs, mat


def _concept_from_record(rec: dict, path: str, lineno: int) -> Concept:
    if not isinstance(rec, dict):
        raise LexiconError("record is not an object", path, lineno)
    missing = [k for k in ("id", "label") if k not in rec]
    if missing:
        raise LexiconError(f"missing field(s) {missing}", path, lineno)
    synonyms = rec.get("synonyms") or []
    if not isinstance(synonyms, list) or not all(isinstance(s, str) for s in synonyms):
        raise LexiconError("synonyms must be a list of strings", path, lineno)
    phq9 = rec.get("phq9")
    if phq9 is not None and (isinstance(phq9, bool) or not isinstance(phq9, int)):
        raise LexiconError("phq9 must be an integer or null", path, lineno)
    try:
        return Concept(
            id=str(rec["id"]),
            preferred_label=str(rec["label"]),
            synonyms=tuple(synonyms),
            phq9_category=phq9,
            definition=rec.get("definition"),
            source=ConceptSource(rec.get("source", "DFO")),
        )
    except LexiconError as exc:
        raise LexiconError(str(exc), path, lineno) from None
    except ValueError as exc:
        raise LexiconError(str(exc), path, lineno) from None


def load_lexicon(path: str | Path) -> Lexicon:
    path = Path(path)
    if not path.exists():
        raise LexiconError("lexicon file not found", str(path))
    concepts: list[Concept] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LexiconError(f"malformed record ({exc.msg})", str(path), lineno) from None
            concept = _concept_from_record(rec, str(path), lineno)
            if concept.id in seen:
                raise LexiconError(
                    f"duplicate concept id {concept.id!r} (first seen on line {seen[concept.id]})", str(path), lineno
                )
            seen[concept.id] = lineno
            concepts.append(concept)
    return Lexicon(concepts)


def save_lexicon(lex: Lexicon, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for cid in sorted(lex.concepts):
            fh.write(json.dumps(lex.concepts[cid].to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def lookup_phrase(lex: Lexicon, phrase: str) -> set[str]:
    return set(lex.phrase_index.get(normalize_phrase(phrase), ()))


def expand_similar(
    lex: Lexicon, phrase: str, embedder: EncoderBackend, threshold: float = 0.80
) -> list[tuple[str, float]]:
    """Concepts with a phrase whose cosine similarity to ``phrase`` is at least ``threshold``.

    Each concept appears once with its best-matching phrase's similarity.
    Sorted by similarity (descending), then concept id.
    """
    if not (0.0 < threshold <= 1.0):
        raise InputError(f"threshold must be in (0, 1], got {threshold}")
    pairs, mat = lex.phrase_matrix(embedder)
    if not pairs:
        return []
    q = embed_phrase(embedder, normalize_phrase(phrase) or phrase)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        return []
    sims = mat @ (q / qn)
    best: dict[str, float] = {}
    for (_, cid), s in zip(pairs, sims):
        s = min(float(s), 1.0)
        if s >= threshold and s > best.get(cid, -2.0):
            best[cid] = s
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# UMLS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UmlsEntry:
    cui: str
    name: str
    definition: str = ""

    def __post_init__(self) -> None:
        if not CUI_RE.match(self.cui):
            raise InputError(f"invalid CUI {self.cui!r}")


@runtime_checkable
class UmlsBackend(Protocol):
    name: str

    def search(self, term: str, k: int) -> list[UmlsEntry]:
        """Entries for ``term`` in ranking order; [] when the term is unknown.

        Raises BackendError (retriable) when the service cannot be reached.
        """
        ...


class FixtureUmls:
    """Offline UMLS served from a JSONL table of (term, cui, name, definition, rank)."""

    name = "umls-fixture"
    max_parallel = None

    def __init__(self, path: str | Path | None = None, records: Iterable[dict] | None = None):
        self._table: dict[str, list[tuple[int, UmlsEntry]]] = {}
        src = str(path) if path is not None else "<records>"
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise DataError("UMLS fixture not found", str(path))
            lines = path.read_text(encoding="utf-8").splitlines()
            records = []
            for lineno, line in enumerate(lines, 1):
                if line.strip():
                    try:
                        records.append((lineno, json.loads(line)))
                    except json.JSONDecodeError as exc:
                        raise DataError(f"malformed UMLS record ({exc.msg})", src, lineno) from None
        else:
            records = list(enumerate(records or [], 1))
        for lineno, rec in records:
            try:
                entry = UmlsEntry(rec["cui"], rec["name"], rec.get("definition") or "")
                term = normalize_phrase(rec["term"])
                rank = int(rec.get("rank", 0))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed UMLS record ({exc})", src, lineno) from None
            self._table.setdefault(term, []).append((rank, entry))
        for rows in self._table.values():
            rows.sort(key=lambda r: (r[0], r[1].cui))

    def search(self, term: str, k: int) -> list[UmlsEntry]:
        return [e for _, e in self._table.get(normalize_phrase(term), [])[:k]]


class UtsUmlsClient:
    """UMLS Terminology Services REST client (needs a licensed API key)."""

    name = "umls-uts"
    max_parallel = 4
    BASE = "https://uts-ws.nlm.nih.gov/rest"

    def __init__(self, api_key: str, sabs: str = "SNOMEDCT_US", timeout: float = 10.0, with_definitions: bool = True):
        if not api_key:
            raise InputError("UMLS api key is empty")
        self.api_key = api_key
        self.sabs = sabs
        self.timeout = timeout
        self.with_definitions = with_definitions

    def _get(self, url: str, params: dict) -> dict:
        import httpx

        try:
            resp = httpx.get(url, params={**params, "apiKey": self.api_key}, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise BackendError(str(exc), self.name, retriable=True) from exc
        if resp.status_code == 404:
            return {}
        if resp.status_code >= 500 or resp.status_code == 429:
            raise BackendError(f"HTTP {resp.status_code}", self.name, retriable=True)
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}", self.name, retriable=False)
        return resp.json()

    def search(self, term: str, k: int) -> list[UmlsEntry]:
        data = self._get(f"{self.BASE}/search/current",
                         {"string": term, "sabs": self.sabs, "returnIdType": "concept", "pageSize": k})
        out = []
        for row in data.get("result", {}).get("results", [])[:k]:
            cui = row.get("ui", "")
            if not CUI_RE.match(cui):
                continue
            definition = ""
            if self.with_definitions:
                defs = self._get(f"{self.BASE}/content/current/CUI/{cui}/definitions", {}).get("result") or []
                if defs:
                    definition = defs[0].get("value", "")
            out.append(UmlsEntry(cui, row.get("name", ""), definition))
        return out


def umls_top_concepts(client: UmlsBackend, term: str, k: int = 3) -> list[UmlsEntry]:
    if not term or not term.strip():
        raise InputError("UMLS term must be non-empty")
    if k < 1:
        raise InputError("k must be >= 1")
    try:
        entries = backends.call(client, client.search, term, k)
    except BackendError:
        raise
    except (OSError, TimeoutError, ConnectionError) as exc:
        raise BackendError(str(exc), getattr(client, "name", "umls"), retriable=True) from exc
    return list(entries)[:k]
