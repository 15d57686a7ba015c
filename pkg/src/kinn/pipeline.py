"""Turn raw documents into the two input sequences of the network."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Example
from .encoding import (
    AspectSet,
    CommonsenseBackend,
    EmbeddingSequence,
    EncoderBackend,
    concat_with_aspects,
    embed_sequence,
    escape_segment,
    escaped_offsets,
    extract_aspects,
    split_units,
)
from .tagging import TaggedDocument, tokenize_and_pos

logger = logging.getLogger(__name__)


@dataclass
class EncodedDocument:
    doc_id: str
    text: str
    x_domain: EmbeddingSequence
    x_cs: EmbeddingSequence
    domain_ranges: list[tuple[int, int]]  # original-text range of each domain unit
    cs_ranges: list[tuple[int, int] | None]  # same for the commonsense branch; None inside aspects
    tagged: TaggedDocument | None = None
    aspects: AspectSet | None = None


def clip_text(text: str, max_units: int) -> str:
    """Cut ``text`` after its ``max_units``-th unit."""
    units = split_units(text)
    if len(units) <= max_units:
        return text
    return text[: units[max_units - 1].end]


def encode_document(
    doc_id: str,
    text: str,
    embedder: EncoderBackend,
    max_len: int,
    tagged: TaggedDocument | None = None,
    aspects: AspectSet | None = None,
) -> EncodedDocument:
    """Embed the phrase-tagged post and the post joined with its aspects.

    Without ``tagged`` the domain branch sees the raw post; without ``aspects``
    the commonsense branch does too. The post inside the commonsense branch is
    clipped to ``max_len`` units so the aspects that follow it always survive
    truncation.
    """
    if tagged is not None:
        x_domain = embed_sequence(embedder, tagged.tagged_text, max_len)
        ranges = [tagged.original_range(u.start, u.end) for u in x_domain.units]
    else:
        x_domain = embed_sequence(embedder, text, max_len)
        ranges = [(u.start, u.end) for u in x_domain.units]
    post = clip_text(text, max_len)
    if aspects is not None:
        joined = concat_with_aspects(post, aspects)
        head = len(escape_segment(post))
        budget = max_len + len(split_units(joined[head:]))
        x_cs = embed_sequence(embedder, joined, budget)
        offs = escaped_offsets(post)
        cs_ranges = [(offs[u.start], offs[u.end - 1] + 1) if u.end <= head else None for u in x_cs.units]
    else:
        x_cs = embed_sequence(embedder, post, max_len)
        cs_ranges = [(u.start, u.end) for u in x_cs.units]
    return EncodedDocument(doc_id, text, x_domain, x_cs, ranges, cs_ranges, tagged, aspects)


def aspects_for(backend: CommonsenseBackend, texts: Sequence[str], workers: int = 1) -> list[AspectSet]:
    if workers <= 1 or len(texts) < 2:
        return [extract_aspects(backend, t) for t in texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: extract_aspects(backend, t), texts))


def to_example(enc: EncodedDocument, label) -> Example:
    y = np.asarray(label, dtype=np.int64) if isinstance(label, tuple) else int(label)
    return Example(enc.x_domain.vectors, enc.x_cs.vectors, y, enc.doc_id)


def untagged(doc_id: str, text: str) -> TaggedDocument:
    """A TaggedDocument with no concept spans (tagging disabled)."""
    return TaggedDocument(doc_id, text, tokenize_and_pos(text), [])
