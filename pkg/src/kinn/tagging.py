"""Phrase tagging: map noun phrases of a post onto ontology concepts.

For each post the tagger

1. tokenizes and POS-tags the text (:mod:`kinn.pos`),
2. enumerates contiguous all-noun n-grams (up to four tokens),
3. resolves candidates longest-first (leftmost among equal lengths) against
   the lexicon: exact phrase match, then embedding similarity >= 0.80,
   then the UMLS top-3 concepts,
4. renders the phrase-tagged text, where each tagged span becomes
   ``[[surface phrase|concept id]]``.

Plain text segments are escaped (backslash always, ``[`` only where it would
start a ``[[``), so :func:`strip_markers` recovers the original exactly.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

from .encoding import EncoderBackend
from .errors import InputError
from .lexicon import Lexicon, UmlsBackend, expand_similar, lookup_phrase, normalize_phrase, umls_top_concepts
from .pos import NOUN_TAGS, tag_words

TOKEN_RE = re.compile(r"\w+(?:[-'’]\w+)*|[^\w\s]")
_MARKER_UNSAFE = re.compile(r"[\[\]|\\]")
_MARKER_AT = re.compile(r"\[\[([^\[\]|\\]+?)\|([^\[\]|\\]+?)\]\]")


@dataclass(frozen=True)
class Token:
    text: str
    pos: str
    char_start: int
    char_end: int


class MatchKind(str, enum.Enum):
    DIRECT = "DIRECT"
    SYNONYM_SIMILAR = "SYNONYM_SIMILAR"
    UMLS = "UMLS"


@dataclass(frozen=True)
class Candidate:
    """A run of noun tokens ``tokens[first:last]`` and its surface text."""

    first: int
    last: int
    char_start: int
    char_end: int
    phrase: str

    @property
    def n_tokens(self) -> int:
        return self.last - self.first


@dataclass(frozen=True)
class ConceptSpan:
    char_start: int
    char_end: int
    concept_id: str
    match_kind: MatchKind
    similarity: float = 1.0
    umls_cuis: tuple[str, ...] = ()
    umls_definitions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (0 <= self.char_start < self.char_end):
            raise InputError(f"bad span bounds [{self.char_start}, {self.char_end})")
        if not (0.0 <= self.similarity <= 1.0):
            raise InputError(f"similarity {self.similarity} outside [0, 1]")
        if self.match_kind == MatchKind.UMLS and not self.umls_cuis:
            raise InputError("UMLS span without CUIs")
        if len(self.umls_cuis) > 3:
            raise InputError("at most three CUIs per span")

    def to_dict(self) -> dict:
        return {
            "char_start": self.char_start,
            "char_end": self.char_end,
            "concept_id": self.concept_id,
            "match_kind": self.match_kind.value,
            "similarity": self.similarity,
            "umls_cuis": list(self.umls_cuis),
            "umls_definitions": list(self.umls_definitions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSpan":
        return cls(
            d["char_start"], d["char_end"], d["concept_id"], MatchKind(d["match_kind"]),
            float(d.get("similarity", 1.0)), tuple(d.get("umls_cuis", ())), tuple(d.get("umls_definitions", ())),
        )


@dataclass
class TaggedDocument:
    doc_id: str
    text: str
    tokens: list[Token]
    spans: list[ConceptSpan]
    tagged_text: str = ""
    _start_map: list[int] = field(default_factory=list, repr=False, compare=False)
    _end_map: list[int] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        prev_end = 0
        for s in self.spans:
            if s.char_end > len(self.text):
                raise InputError(f"span [{s.char_start}, {s.char_end}) outside document")
            if s.char_start < prev_end:
                raise InputError("spans overlap or are unsorted")
            prev_end = s.char_end
        rendered, starts, ends = render_tagged(self.text, self.spans)
        if self.tagged_text and self.tagged_text != rendered:
            raise InputError(f"tagged_text of {self.doc_id!r} does not match its spans")
        self.tagged_text = rendered
        self._start_map, self._end_map = starts, ends

    def span_text(self, span: ConceptSpan) -> str:
        return self.text[span.char_start:span.char_end]

    def original_range(self, start: int, end: int) -> tuple[int, int]:
        """Map ``tagged_text[start:end]`` back to a range of ``text``."""
        if not (0 <= start < end <= len(self.tagged_text)):
            raise InputError(f"range [{start}, {end}) outside tagged text")
        return self._start_map[start], self._end_map[end - 1]

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "text": self.text,
            "tokens": [[t.text, t.pos, t.char_start, t.char_end] for t in self.tokens],
            "spans": [s.to_dict() for s in self.spans],
            "tagged_text": self.tagged_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaggedDocument":
        return cls(
            d["doc_id"], d["text"],
            [Token(*t) for t in d.get("tokens", [])],
            [ConceptSpan.from_dict(s) for s in d.get("spans", [])],
            d.get("tagged_text", ""),
        )


def tokenize_and_pos(text: str) -> list[Token]:
    matches = list(TOKEN_RE.finditer(text))
    tags = tag_words([m.group(0) for m in matches])
    return [Token(m.group(0), tag, m.start(), m.end()) for m, tag in zip(matches, tags)]


def noun_candidates(tokens: Sequence[Token], text: str | None = None, max_gram: int = 4) -> list[Candidate]:
    """All contiguous n-grams (n <= max_gram) made only of noun tokens.

    Ordered by start position, longest first at each start.
    """
    if max_gram < 1:
        raise InputError("max_gram must be >= 1")
    is_noun = [t.pos in NOUN_TAGS for t in tokens]
    out = []
    for i in range(len(tokens)):
        if not is_noun[i]:
            continue
        run = 1
        while run < max_gram and i + run < len(tokens) and is_noun[i + run]:
            run += 1
        for n in range(run, 0, -1):
            start, end = tokens[i].char_start, tokens[i + n - 1].char_end
            if text is not None:
                phrase = text[start:end]
            else:
                phrase = " ".join(t.text for t in tokens[i:i + n])
            out.append(Candidate(i, i + n, start, end, phrase))
    return out


def _resolve(
    cand: Candidate,
    lex: Lexicon,
    embedder: EncoderBackend | None,
    umls: UmlsBackend | None,
    threshold: float,
) -> ConceptSpan | None:
    ids = lookup_phrase(lex, cand.phrase)
    if ids:
        return ConceptSpan(cand.char_start, cand.char_end, min(ids), MatchKind.DIRECT, 1.0)
    if embedder is not None and len(lex):
        similar = expand_similar(lex, cand.phrase, embedder, threshold)
        if similar:
            cid, sim = similar[0]
            return ConceptSpan(cand.char_start, cand.char_end, cid, MatchKind.SYNONYM_SIMILAR, min(1.0, max(0.0, sim)))
    if umls is not None and normalize_phrase(cand.phrase):
        entries = umls_top_concepts(umls, cand.phrase, 3)
        if entries:
            return ConceptSpan(
                cand.char_start, cand.char_end, entries[0].cui, MatchKind.UMLS, 1.0,
                tuple(e.cui for e in entries), tuple(e.definition for e in entries),
            )
    return None


def tag_document(
    doc_id: str,
    text: str,
    lex: Lexicon,
    embedder: EncoderBackend | None = None,
    umls: UmlsBackend | None = None,
    *,
    threshold: float = 0.80,
    max_gram: int = 4,
    tokens: Sequence[Token] | None = None,
) -> TaggedDocument:
    """Tag ``text`` against ``lex``; ``embedder``/``umls`` enable the fallbacks."""
    tokens = list(tokens) if tokens is not None else tokenize_and_pos(text)
    cands = noun_candidates(tokens, text, max_gram)
    taken = [False] * len(tokens)
    spans: list[ConceptSpan] = []
    for cand in sorted(cands, key=lambda c: (-c.n_tokens, c.first)):
        if any(taken[cand.first:cand.last]):
            continue
        span = _resolve(cand, lex, embedder, umls, threshold)
        if span is None:
            continue
        spans.append(span)
        for k in range(cand.first, cand.last):
            taken[k] = True
    spans.sort(key=lambda s: s.char_start)
    return TaggedDocument(doc_id, text, tokens, spans)


def _escape_plain(seg: str, before_marker: bool) -> tuple[str, list[int]]:
    """Escape a plain segment; returns escaped text and per-char source offsets."""
    out: list[str] = []
    src: list[int] = []
    for i, ch in enumerate(seg):
        nxt = seg[i + 1] if i + 1 < len(seg) else ("[" if before_marker else "")
        if ch == "\\" or (ch == "[" and nxt == "["):
            out.append("\\")
            src.append(i)
        out.append(ch)
        src.append(i)
    return "".join(out), src


def render_tagged(text: str, spans: Sequence[ConceptSpan]) -> tuple[str, list[int], list[int]]:
    """Render the phrase-tagged string plus maps from its chars to ``text`` ranges."""
    parts: list[str] = []
    starts: list[int] = []
    ends: list[int] = []
    pos = 0

    def plain(lo: int, hi: int, before_marker: bool) -> None:
        esc, src = _escape_plain(text[lo:hi], before_marker)
        parts.append(esc)
        starts.extend(lo + s for s in src)
        ends.extend(lo + s + 1 for s in src)

    for s in spans:
        plain(pos, s.char_start, True)
        surface = text[s.char_start:s.char_end]
        if _MARKER_UNSAFE.search(surface) or _MARKER_UNSAFE.search(s.concept_id) or not s.concept_id:
            raise InputError(f"span {surface!r} -> {s.concept_id!r} cannot be written as a marker")
        marker = f"[[{surface}|{s.concept_id}]]"
        parts.append(marker)
        starts.extend([s.char_start] * len(marker))
        ends.extend([s.char_end] * len(marker))
        pos = s.char_end
    plain(pos, len(text), False)
    return "".join(parts), starts, ends


def strip_markers(tagged_text: str) -> str:
    """Inverse of :func:`render_tagged`: drop markers, keep their surface phrase."""
    out: list[str] = []
    i = 0
    n = len(tagged_text)
    while i < n:
        ch = tagged_text[i]
        if ch == "\\" and i + 1 < n:
            out.append(tagged_text[i + 1])
            i += 2
            continue
        if ch == "[" and tagged_text.startswith("[[", i):
            m = _MARKER_AT.match(tagged_text, i)
            if m:
                out.append(m.group(1))
                i = m.end()
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def tag_corpus(
    docs: Sequence[tuple[str, str]],
    lex: Lexicon,
    embedder: EncoderBackend | None = None,
    umls: UmlsBackend | None = None,
    *,
    workers: int = 1,
    **kwargs: Any,
) -> list[TaggedDocument]:
    """Tag many (doc_id, text) pairs; order of the result follows ``docs``."""
    if workers <= 1 or len(docs) < 2:
        return [tag_document(d, t, lex, embedder, umls, **kwargs) for d, t in docs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda dt: tag_document(dt[0], dt[1], lex, embedder, umls, **kwargs), docs))
