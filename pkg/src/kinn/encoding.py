"""Embedding layer and commonsense layer.

Two kinds of backend live here:

* encoder backends turn phrases and phrase-tagged documents into vectors;
* commonsense backends produce ATOMIC-style if-then inferences for a post.

The hash encoder and the templated commonsense stub are deterministic and
offline, so the whole pipeline can run in CI. :class:`TransformerEncoder`
wraps a HuggingFace encoder (e.g. a domain-adapted BERT) and is optional.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from . import backends
from .errors import BackendError, DataError, InputError

logger = logging.getLogger(__name__)

# A tagged phrase rendered by the tagger: [[surface phrase|concept id]]
MARKER_RE = re.compile(r"\[\[([^\[\]|\\]+?)\|([^\[\]|\\]+?)\]\]")
_UNIT_RE = re.compile(
    r"(?P<marker>\[\[(?P<phrase>[^\[\]|\\]+?)\|(?P<cid>[^\[\]|\\]+?)\]\])"
    r"|(?P<word>\w+(?:[-'’]\w+)*)"
    r"|(?P<punct>[^\w\s])"
)
_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class Unit:
    """One input unit of a sequence: a word, a punctuation mark or a tagged phrase.

    ``start``/``end`` index the string the unit was cut from.
    """

    text: str
    start: int
    end: int
    concept_id: str | None = None


@dataclass
class EmbeddingSequence:
    vectors: np.ndarray  # (length, dim)
    units: list[Unit] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InputError(f"expected a (length, dim) array, got shape {self.vectors.shape}")
        if self.units and len(self.units) != len(self.vectors):
            raise InputError("units and vectors differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise InputError("embedding contains non-finite values")

    @property
    def length(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def split_units(text: str) -> list[Unit]:
    """Split text into words, punctuation marks and whole tagged phrases."""
    units = []
    for m in _UNIT_RE.finditer(text):
        if m.group("marker"):
            units.append(Unit(m.group("phrase"), m.start(), m.end(), m.group("cid")))
        else:
            units.append(Unit(m.group(0), m.start(), m.end()))
    return units


def _norm_key(phrase: str) -> str:
    return _WS_RE.sub(" ", phrase.strip().lower())


@runtime_checkable
class EncoderBackend(Protocol):
    name: str
    dim: int

    def embed_phrase(self, phrase: str) -> np.ndarray: ...

    def embed_units(self, text: str, units: Sequence[Unit]) -> np.ndarray: ...


class HashEncoder:
    """Deterministic, context-free stub encoder.

    Every normalized phrase is mapped to a unit vector drawn from a normal
    distribution seeded by the SHA-256 of the phrase. A tagged phrase unit is
    the normalized sum of its phrase vector and a vector for its concept id,
    so tagging changes what the network sees.
    """

    max_parallel = None

    def __init__(self, dim: int = 128, salt: str = "kinn"):
        if dim <= 0:
            raise InputError("dim must be positive")
        self.dim = dim
        self.salt = salt
        self.name = f"hash-{dim}"
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, key: str) -> np.ndarray:
        vec = self._cache.get(key)
        if vec is None:
            digest = hashlib.sha256(f"{self.salt}\x00{key}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[key] = vec
        return vec

    def embed_phrase(self, phrase: str) -> np.ndarray:
        return self._vector(_norm_key(phrase)).copy()

    def embed_units(self, text: str, units: Sequence[Unit]) -> np.ndarray:
        out = np.empty((len(units), self.dim))
        for i, unit in enumerate(units):
            vec = self._vector(_norm_key(unit.text))
            if unit.concept_id is not None:
                vec = vec + self._vector("concept:" + unit.concept_id)
                vec = vec / np.linalg.norm(vec)
            out[i] = vec
        return out


class FixedVectorEncoder:
    """Encoder backed by an explicit phrase -> vector table.

    Phrases missing from the table fall back to ``fallback`` (a hash encoder
    of the same dim by default). Useful for precomputed embeddings and for
    engineering exact cosine similarities.
    """

    max_parallel = None

    def __init__(self, table: Mapping[str, Sequence[float]], fallback: Any = None, name: str = "fixed"):
        vectors = {_norm_key(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) > 1:
            raise InputError(f"table vectors have mixed dims {sorted(dims)}")
        self.dim = dims.pop() if dims else (fallback.dim if fallback is not None else 0)
        if self.dim <= 0:
            raise InputError("cannot infer dim from an empty table without fallback")
        self._table = vectors
        self.fallback = fallback if fallback is not None else HashEncoder(self.dim)
        if self.fallback.dim != self.dim:
            raise InputError("fallback dim differs from table dim")
        self.name = name

    def embed_phrase(self, phrase: str) -> np.ndarray:
        key = _norm_key(phrase)
        if key in self._table:
            return self._table[key].copy()
        return self.fallback.embed_phrase(phrase)

    def embed_units(self, text: str, units: Sequence[Unit]) -> np.ndarray:
        if not units:
            return np.zeros((0, self.dim))
        return np.stack([self.embed_phrase(u.text) for u in units])


class TransformerEncoder:
    """HuggingFace encoder summing the last ``n_layers`` hidden states.

    Phrases are encoded standalone and the summed hidden states are averaged
    over the phrase's word pieces. For sequences, the unit surfaces are joined
    with spaces and run through the model in windows; each unit's vector is
    the mean over the word pieces inside its character range.
    """

    max_parallel = 1

    def __init__(self, model_name: str | None = None, *, model: Any = None, tokenizer: Any = None,
                 n_layers: int = 4, window: int = 256, device: str = "cpu"):
        if model is None or tokenizer is None:
            if model_name is None:
                raise InputError("need model_name or both model and tokenizer")
            from transformers import AutoModel, AutoTokenizer

            tokenizer = AutoTokenizer.from_pretrained(model_name)
            model = AutoModel.from_pretrained(model_name)
        self.model = model.to(device).eval()
        self.tokenizer = tokenizer
        self.device = device
        self.n_layers = n_layers
        self.window = window
        self.dim = int(model.config.hidden_size)
        self.name = f"transformer:{model_name or type(model).__name__}"
        if model.config.num_hidden_layers < n_layers:
            raise InputError(f"model has fewer than {n_layers} layers")

    def _summed_states(self, text: str):
        import torch

        enc = self.tokenizer(text, return_tensors="pt", return_offsets_mapping=True, truncation=True)
        offsets = enc.pop("offset_mapping")[0].tolist()
        enc = {k: v.to(self.device) for k, v in enc.items()}
        with torch.no_grad():
            out = self.model(**enc, output_hidden_states=True)
        states = torch.stack(out.hidden_states[-self.n_layers:]).sum(0)[0]
        return states.double().cpu().numpy(), offsets

    def embed_phrase(self, phrase: str) -> np.ndarray:
        if not phrase.strip():
            raise InputError("cannot embed an empty phrase")
        states, offsets = self._summed_states(phrase)
        keep = [i for i, (s, e) in enumerate(offsets) if e > s]
        if not keep:
            raise BackendError("tokenizer produced no word pieces", self.name, retriable=False)
        return states[keep].mean(0)

    def embed_units(self, text: str, units: Sequence[Unit]) -> np.ndarray:
        out = np.zeros((len(units), self.dim))
        for lo in range(0, len(units), self.window):
            chunk = units[lo:lo + self.window]
            pieces, ranges, pos = [], [], 0
            for u in chunk:
                ranges.append((pos, pos + len(u.text)))
                pieces.append(u.text)
                pos += len(u.text) + 1
            states, offsets = self._summed_states(" ".join(pieces))
            for j, (s, e) in enumerate(ranges):
                idx = [i for i, (a, b) in enumerate(offsets) if b > a and a < e and b > s]
                if idx:
                    out[lo + j] = states[idx].mean(0)
                else:
                    # unit fell past the model's max length; embed it standalone
                    out[lo + j] = self.embed_phrase(chunk[j].text)
        return out


def embed_phrase(backend: EncoderBackend, phrase: str) -> np.ndarray:
    if not phrase or not phrase.strip():
        raise InputError("cannot embed an empty phrase")
    vec = np.asarray(backends.call(backend, backend.embed_phrase, phrase), dtype=np.float64)
    if vec.shape != (backend.dim,):
        raise BackendError(f"expected vector of dim {backend.dim}, got {vec.shape}", backend.name, False)
    return vec


def embed_sequence(backend: EncoderBackend, text: str, max_len: int) -> EmbeddingSequence:
    """Embed ``text`` unit by unit, keeping at most the first ``max_len`` units."""
    if max_len <= 0:
        raise InputError("max_len must be positive")
    units = split_units(text)[:max_len]
    if not units:
        return EmbeddingSequence(np.zeros((0, backend.dim)), [])
    vectors = backends.call(backend, backend.embed_units, text, units)
    return EmbeddingSequence(vectors, list(units))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Commonsense layer
# ---------------------------------------------------------------------------

RELATIONS = ("xIntent", "xNeed", "xAttr", "xEffect", "xWant", "xReact", "oEffect", "oWant", "oReact")
# the five relations kept, in concatenation order
SELECTED_RELATIONS = ("xIntent", "xEffect", "xReact", "oEffect", "oReact")
NONE_INFERENCE = "none"

_STUB_PREFIX = {
    "xIntent": "intent",
    "xNeed": "need",
    "xAttr": "attribute",
    "xEffect": "effect on writer",
    "xWant": "writer wants",
    "xReact": "writer reaction",
    "oEffect": "effect on others",
    "oWant": "others want",
    "oReact": "others reaction",
}


@dataclass(frozen=True)
class AspectSet:
    intent_w: str = NONE_INFERENCE
    effect_w: str = NONE_INFERENCE
    reaction_w: str = NONE_INFERENCE
    effect_l: str = NONE_INFERENCE
    reaction_l: str = NONE_INFERENCE

    def ordered(self) -> tuple[str, str, str, str, str]:
        return (self.intent_w, self.effect_w, self.reaction_w, self.effect_l, self.reaction_l)

    def to_dict(self) -> dict[str, str]:
        return dict(zip(SELECTED_RELATIONS, self.ordered()))

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "AspectSet":
        return cls(*(d.get(r) or NONE_INFERENCE for r in SELECTED_RELATIONS))


@runtime_checkable
class CommonsenseBackend(Protocol):
    name: str

    def infer(self, text: str, relations: Sequence[str]) -> dict[str, str]: ...


class StubCommonsense:
    """Offline stand-in: '<relation>: <first five tokens>' for every relation."""

    name = "stub"
    max_parallel = None

    def infer(self, text: str, relations: Sequence[str]) -> dict[str, str]:
        head = " ".join(m.group(0).lower() for m in re.finditer(r"\w+", text))
        head = " ".join(head.split()[:5]) or text.strip()[:40]
        return {r: f"{_STUB_PREFIX[r]}: {head}" for r in relations}


class FixtureCommonsense:
    """Replays recorded (text, relation, inference) records."""

    name = "fixture"
    max_parallel = None

    def __init__(self, path: str | Path, strict: bool = True):
        self.path = Path(path)
        self.strict = strict
        self._table: dict[str, dict[str, str]] = {}
        if not self.path.exists():
            raise DataError("commonsense fixture not found", str(self.path))
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    text, rel, inf = rec["text"], rec["relation"], rec["inference"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"malformed commonsense record ({exc})", str(self.path), lineno) from exc
                if rel not in RELATIONS:
                    raise DataError(f"unknown relation {rel!r}", str(self.path), lineno)
                self._table.setdefault(text, {})[rel] = inf

    def infer(self, text: str, relations: Sequence[str]) -> dict[str, str]:
        rec = self._table.get(text)
        if rec is None:
            if self.strict:
                raise BackendError(f"no recorded inferences for text {text[:40]!r}", self.name, retriable=False)
            return {}
        return {r: rec[r] for r in relations if r in rec}


class Seq2SeqCommonsense:
    """COMET-style generator: prompts '<text> <relation> [GEN]' and decodes greedily."""

    max_parallel = 1

    def __init__(self, model_name: str | None = None, *, model: Any = None, tokenizer: Any = None,
                 max_new_tokens: int = 24):
        if model is None or tokenizer is None:
            from transformers import AutoModelForSeq2SeqLM, AutoTokenizer

            tokenizer = AutoTokenizer.from_pretrained(model_name)
            model = AutoModelForSeq2SeqLM.from_pretrained(model_name)
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.max_new_tokens = max_new_tokens
        self.name = f"seq2seq:{model_name or type(model).__name__}"

    def infer(self, text: str, relations: Sequence[str]) -> dict[str, str]:
        import torch

        out = {}
        for rel in relations:
            enc = self.tokenizer(f"{text} {rel} [GEN]", return_tensors="pt", truncation=True)
            try:
                with torch.no_grad():
                    ids = self.model.generate(**enc, max_new_tokens=self.max_new_tokens, num_beams=1, do_sample=False)
            except RuntimeError as exc:
                raise BackendError(str(exc), self.name) from exc
            out[rel] = self.tokenizer.decode(ids[0], skip_special_tokens=True).strip()
        return out


def extract_aspects(backend: CommonsenseBackend, text: str) -> AspectSet:
    """Query all nine if-then relations and keep the five mental-health ones."""
    if not text or not text.strip():
        raise InputError("cannot extract aspects from empty text")
    try:
        inferred = backends.call(backend, backend.infer, text, RELATIONS)
    except BackendError:
        raise
    except (OSError, TimeoutError, ConnectionError) as exc:
        raise BackendError(str(exc), getattr(backend, "name", "commonsense")) from exc
    return AspectSet(*((inferred.get(r) or "").strip() or NONE_INFERENCE for r in SELECTED_RELATIONS))


# ---------------------------------------------------------------------------
# Concatenation layer
# ---------------------------------------------------------------------------

ASPECT_SEP = " <|> "
_SEP_CORE = "<|>"


def escape_segment(s: str) -> str:
    return s.replace("\\", "\\\\").replace(_SEP_CORE, "<\\|>")


def unescape_segment(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append(s[i + 1])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def escaped_offsets(s: str) -> list[int]:
    """For each character of ``escape_segment(s)``, the index it came from in ``s``."""
    idx = []
    for i, ch in enumerate(s):
        doubled = ch == "\\" or (ch == "|" and s[i - 1:i] == "<" and s[i + 1:i + 2] == ">")
        idx += [i, i] if doubled else [i]
    return idx


def concat_with_aspects(text: str, aspects: AspectSet) -> str:
    """Join the post and its five aspects with :data:`ASPECT_SEP`.

    Segments are escaped so that splitting on the separator is lossless.
    """
    return ASPECT_SEP.join(escape_segment(s) for s in (text, *aspects.ordered()))


def split_aspect_string(s: str) -> list[str]:
    return [unescape_segment(part) for part in s.split(ASPECT_SEP)]
