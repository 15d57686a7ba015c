"""User-level explanations from attention: salient spans, concepts, prompt, report.

Saliency of a domain position is the mean attention it receives (column mean)
in the chosen block; by default the fused block, restricted to the columns of
the domain branch. Positions whose saliency lies strictly above the 75th
percentile merge with adjacent such positions into one span scored by its
maximum; punctuation never merges. All other positions stay single-unit spans.
"""

from __future__ import annotations

import enum
import hashlib
import html
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np

from . import backends
from .core import DocumentTrace
from .encoding import EncoderBackend
from .errors import BackendError, DataError, InputError
from .lexicon import Lexicon, expand_similar

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
MERGE_PERCENTILE = 75.0
STUB_PREFIX = "EXPLANATION STUB: "
NO_CONCEPTS = "(none)"


class Block(str, enum.Enum):
    DOMAIN = "DOMAIN"
    COMMONSENSE = "COMMONSENSE"
    FUSED = "FUSED"


class ReportFormat(str, enum.Enum):
    JSON = "JSON"
    HTML = "HTML"


@dataclass(frozen=True)
class SalientSpan:
    char_start: int
    char_end: int
    score: float
    block: Block = Block.FUSED
    text: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.char_start <= self.char_end:
            raise InputError(f"bad span bounds [{self.char_start}, {self.char_end})")
        if not self.score >= 0:
            raise InputError("span score must be non-negative")
        object.__setattr__(self, "block", Block(self.block))

    def to_dict(self) -> dict:
        return {"char_start": self.char_start, "char_end": self.char_end, "score": self.score,
                "block": self.block.value, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "SalientSpan":
        return cls(d["char_start"], d["char_end"], d["score"], Block(d["block"]), d.get("text", ""))


@dataclass(frozen=True)
class ConceptAttribution:
    span: SalientSpan
    concept_id: str
    similarity: float
    label: str = ""
    phq9_category: int | None = None

    def to_dict(self) -> dict:
        return {"span": self.span.to_dict(), "concept_id": self.concept_id, "similarity": self.similarity,
                "label": self.label, "phq9_category": self.phq9_category}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptAttribution":
        return cls(SalientSpan.from_dict(d["span"]), d["concept_id"], d["similarity"], d.get("label", ""),
                   d.get("phq9_category"))


@dataclass(frozen=True)
class ExplanationReport:
    doc_id: str
    text: str
    spans: tuple[SalientSpan, ...]
    attributions: tuple[ConceptAttribution, ...]
    prompt: str
    llm_explanation: str | None
    model_decision: Any  # int, or tuple of 0/1
    probs: tuple[float, ...]
    decision_labels: tuple[str, ...] = ()
    threshold: float = 0.80

    def to_dict(self) -> dict:
        decision = list(self.model_decision) if isinstance(self.model_decision, tuple) else self.model_decision
        return {
            "schema": REPORT_SCHEMA,
            "doc_id": self.doc_id,
            "text": self.text,
            "spans": [s.to_dict() for s in self.spans],
            "attributions": [a.to_dict() for a in self.attributions],
            "prompt": self.prompt,
            "llm_explanation": self.llm_explanation,
            "model_decision": decision,
            "decision_labels": list(self.decision_labels),
            "probs": list(self.probs),
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExplanationReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise DataError(f"unsupported report schema {d.get('schema')!r}")
        decision = d["model_decision"]
        return cls(
            d["doc_id"], d["text"],
            tuple(SalientSpan.from_dict(s) for s in d["spans"]),
            tuple(ConceptAttribution.from_dict(a) for a in d["attributions"]),
            d["prompt"], d.get("llm_explanation"),
            tuple(decision) if isinstance(decision, list) else decision,
            tuple(float(p) for p in d["probs"]),
            tuple(d.get("decision_labels", ())),
            float(d.get("threshold", 0.80)),
        )


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

def position_saliency(trace: DocumentTrace, block: Block = Block.FUSED) -> np.ndarray:
    """Mean attention received by each domain-branch position."""
    block = Block(block)
    if block == Block.FUSED:
        return trace.A_fused[:, : trace.n_domain].mean(axis=0)
    if block == Block.DOMAIN:
        return trace.A_domain.mean(axis=0)
    return trace.A_commonsense.mean(axis=0)


def merge_positions(
    scores: Sequence[float], percentile: float = MERGE_PERCENTILE, mergeable: Sequence[bool] | None = None
) -> list[tuple[int, int, float]]:
    """Group positions into (first, last_exclusive, score) runs.

    Runs of adjacent positions strictly above the percentile cut merge and
    take the maximum score; every other position is its own run. Positions
    with ``mergeable[i]`` false (punctuation) never join a run.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return []
    cut = float(np.percentile(s, percentile))
    hot = s > cut
    if mergeable is not None:
        hot &= np.asarray(mergeable, dtype=bool)
    runs: list[tuple[int, int, float]] = []
    i = 0
    while i < len(s):
        j = i + 1
        if hot[i]:
            while j < len(s) and hot[j]:
                j += 1
        runs.append((i, j, float(s[i:j].max())))
        i = j
    return runs


def salient_spans(
    trace: DocumentTrace,
    ranges: Sequence[tuple[int, int]],
    text: str,
    top_k: int = 5,
    block: Block = Block.FUSED,
) -> list[SalientSpan]:
    """Top ``top_k`` spans of ``text``; ``ranges[i]`` is the text range of position i.

    For the commonsense block, positions follow the aspect-augmented sequence
    and ``ranges`` must cover it (None for aspect positions, which are skipped).
    """
    if top_k < 0:
        raise InputError("top_k must be >= 0")
    scores = position_saliency(trace, block)
    if len(scores) != len(ranges):
        raise InputError(f"trace has {len(scores)} positions but document has {len(ranges)} units")
    for r in ranges:
        if r is not None and not (0 <= r[0] <= r[1] <= len(text)):
            raise InputError("unit range outside the document")
    if top_k == 0:
        return []
    mergeable = [r is not None and any(ch.isalnum() for ch in text[r[0]:r[1]]) for r in ranges]
    spans = []
    for first, last, score in merge_positions(scores, mergeable=mergeable):
        covered = [r for r in ranges[first:last] if r is not None]
        if not covered:
            continue
        lo, hi = covered[0][0], max(r[1] for r in covered)
        spans.append(SalientSpan(lo, hi, max(score, 0.0), Block(block), text[lo:hi]))
    # stable sort keeps document order among ties
    spans.sort(key=lambda sp: -sp.score)
    return spans[:top_k]


# ---------------------------------------------------------------------------
# Concepts and prompt
# ---------------------------------------------------------------------------

def map_to_concepts(
    spans: Sequence[SalientSpan], lex: Lexicon, embedder: EncoderBackend, threshold: float = 0.80
) -> list[ConceptAttribution]:
    out = []
    for sp in spans:
        if not sp.text.strip():
            continue
        for cid, sim in expand_similar(lex, sp.text, embedder, threshold):
            c = lex.concepts[cid]
            out.append(ConceptAttribution(sp, cid, sim, c.preferred_label, c.phq9_category))
    return out


def _concept_entries(attributions: Sequence[ConceptAttribution]) -> list[str]:
    seen, entries = set(), []
    for a in attributions:
        if a.concept_id in seen:
            continue
        seen.add(a.concept_id)
        label = a.label or a.concept_id
        entries.append(f"{label} (PHQ-9 item {a.phq9_category})" if a.phq9_category else label)
    return entries


def build_prompt(text: str, attributions: Sequence[ConceptAttribution], decision: str) -> str:
    entries = _concept_entries(attributions)
    return "\n".join([
        "You are assisting a mental health professional. Using the concepts found in the post, "
        "explain in two or three sentences why the classifier reached its decision.",
        "post:",
        text,
        "concepts: " + ("; ".join(entries) if entries else NO_CONCEPTS),
        f"decision: {decision}",
    ])


def concepts_in_prompt(prompt: str) -> list[str]:
    """Concept entries from the last 'concepts:' line of a prompt."""
    for line in reversed(prompt.splitlines()):
        if line.startswith("concepts: "):
            body = line[len("concepts: "):]
            return [] if body == NO_CONCEPTS else [e for e in body.split("; ") if e]
    return []


# ---------------------------------------------------------------------------
# LLM backends
# ---------------------------------------------------------------------------

@runtime_checkable
class LlmBackend(Protocol):
    name: str

    def complete(self, prompt: str) -> str: ...


class StubLlm:
    name = "stub"
    max_parallel = None

    def complete(self, prompt: str) -> str:
        concepts = concepts_in_prompt(prompt)
        return STUB_PREFIX + ("; ".join(concepts) if concepts else NO_CONCEPTS)


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class FixtureLlm:
    """Replays responses recorded as JSONL {"prompt_sha256", "response"}."""

    name = "fixture"
    max_parallel = None

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise DataError("LLM fixture not found", str(self.path))
        self._table: dict[str, str] = {}
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._table[rec["prompt_sha256"]] = rec["response"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"malformed LLM fixture record ({exc})", str(self.path), lineno) from None

    def complete(self, prompt: str) -> str:
        try:
            return self._table[prompt_key(prompt)]
        except KeyError:
            raise BackendError("no recorded response for this prompt", self.name, retriable=False) from None


class OpenAiCompatibleLlm:
    """Chat-completions client for any OpenAI-compatible endpoint.

    The credential is read from the environment variable named by ``api_key_env``.
    """

    max_parallel = 2

    def __init__(self, endpoint: str, model: str, *, api_key_env: str = "KINN_LLM_API_KEY",
                 timeout: float = 30.0, max_tokens: int = 256):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_tokens = max_tokens
        self.name = f"openai-compatible:{model}"

    def complete(self, prompt: str) -> str:
        import httpx

        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendError(f"environment variable {self.api_key_env} is not set", self.name, retriable=False)
        body = {"model": self.model, "max_tokens": self.max_tokens, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}
        try:
            resp = httpx.post(f"{self.endpoint}/chat/completions", json=body, timeout=self.timeout,
                              headers={"Authorization": f"Bearer {key}"})
        except httpx.HTTPError as exc:
            raise BackendError(str(exc), self.name, retriable=True) from exc
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}", self.name,
                               retriable=resp.status_code >= 500 or resp.status_code == 429)
        try:
            return resp.json()["choices"][0]["message"]["content"].strip()
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape ({exc})", self.name, retriable=False) from exc


def generate_explanation(client: LlmBackend, prompt: str) -> str:
    try:
        return backends.call(client, client.complete, prompt)
    except BackendError:
        raise
    except (OSError, TimeoutError, ConnectionError) as exc:
        raise BackendError(str(exc), getattr(client, "name", "llm"), retriable=True) from exc


# ---------------------------------------------------------------------------
# Assembly and output
# ---------------------------------------------------------------------------

def decision_text(decision, label_names: Sequence[str]) -> tuple[str, tuple[str, ...]]:
    if isinstance(decision, (tuple, list, np.ndarray)):
        names = tuple(label_names[j] if j < len(label_names) else f"label {j}"
                      for j, bit in enumerate(decision) if bit)
        return ("; ".join(names) if names else "no positive labels"), names
    i = int(decision)
    name = label_names[i] if i < len(label_names) else f"class {i}"
    return name, (name,)


def explain_document(
    doc_id: str,
    text: str,
    trace: DocumentTrace,
    ranges: Sequence[tuple[int, int]],
    decision,
    lex: Lexicon,
    embedder: EncoderBackend,
    llm: LlmBackend | None,
    *,
    label_names: Sequence[str] = (),
    top_k: int = 5,
    threshold: float = 0.80,
    block: Block = Block.FUSED,
) -> ExplanationReport:
    """Full report for one document; an LLM failure leaves ``llm_explanation`` empty."""
    spans = salient_spans(trace, ranges, text, top_k, block)
    attributions = map_to_concepts(spans, lex, embedder, threshold)
    said, names = decision_text(decision, label_names)
    prompt = build_prompt(text, attributions, said)
    explanation = None
    if llm is not None:
        try:
            explanation = generate_explanation(llm, prompt)
        except BackendError as exc:
            logger.warning("explanation for %s skipped: %s", doc_id, exc)
    if isinstance(decision, (tuple, list, np.ndarray)):
        decision = tuple(int(b) for b in decision)
    else:
        decision = int(decision)
    return ExplanationReport(doc_id, text, tuple(spans), tuple(attributions), prompt, explanation, decision,
                             tuple(float(p) for p in trace.probs), names, threshold)


def report_json(report: ExplanationReport) -> str:
    return json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def report_html(report: ExplanationReport) -> str:
    text = report.text
    top = max((s.score for s in report.spans), default=0.0)
    # highest score wins where spans would overlap (they do not, but be safe)
    marks = sorted(report.spans, key=lambda s: s.char_start)
    body, pos = [], 0
    for sp in marks:
        if sp.char_start < pos:
            continue
        body.append(html.escape(text[pos:sp.char_start]))
        alpha = sp.score / top if top > 0 else 0.0
        body.append(f'<mark style="background: rgba(255, 140, 0, {alpha:.3f})" title="{sp.score:.6f}">'
                    f"{html.escape(text[sp.char_start:sp.char_end])}</mark>")
        pos = sp.char_end
    body.append(html.escape(text[pos:]))
    items = []
    seen = set()
    for a in report.attributions:
        if a.concept_id in seen:
            continue
        seen.add(a.concept_id)
        phq = f" &middot; PHQ-9 item {a.phq9_category}" if a.phq9_category else ""
        items.append(f"<li><b>{html.escape(a.label or a.concept_id)}</b> "
                     f"<code>{html.escape(a.concept_id)}</code> {a.similarity:.3f}{phq}</li>")
    sidebar = "\n".join(items) if items else "<li>no concepts above threshold</li>"
    decision = html.escape(", ".join(report.decision_labels) or str(report.model_decision))
    expl = html.escape(report.llm_explanation) if report.llm_explanation else "<i>not available</i>"
    return f"""<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{html.escape(report.doc_id)}</title>
<style>
body {{ font-family: sans-serif; display: flex; gap: 2em; margin: 2em; }}
main {{ flex: 3; line-height: 1.7; white-space: pre-wrap; }}
aside {{ flex: 1; border-left: 1px solid #ccc; padding-left: 1em; }}
mark {{ border-radius: 3px; padding: 0 2px; }}
</style>
</head>
<body>
<main>{"".join(body)}</main>
<aside>
<h3>Decision</h3>
<p>{decision}</p>
<h3>Concepts</h3>
<ul>
{sidebar}
</ul>
<h3>Explanation</h3>
<p>{expl}</p>
</aside>
</body>
</html>
"""


def emit_report(report: ExplanationReport, fmt: ReportFormat | str, path: str | Path) -> Path:
    fmt = fmt if isinstance(fmt, ReportFormat) else ReportFormat(str(fmt).upper())
    path = Path(path)
    content = report_json(report) if fmt == ReportFormat.JSON else report_html(report)
    path.write_text(content, encoding="utf-8")
    return path


def load_report(path: str | Path) -> ExplanationReport:
    try:
        return ExplanationReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"malformed report ({exc})", str(path)) from None


@dataclass
class ExplainSettings:
    top_k: int = 5
    threshold: float = 0.80
    block: Block = Block.FUSED
    label_names: Sequence[str] = field(default_factory=tuple)
