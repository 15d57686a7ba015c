import json

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_merge
from kinn.core import DocumentTrace
from kinn.data import bundled
from kinn.errors import BackendError, DataError, InputError
from kinn.explain import (
    Block,
    ConceptAttribution,
    ExplanationReport,
    FixtureLlm,
    OpenAiCompatibleLlm,
    ReportFormat,
    SalientSpan,
    StubLlm,
    build_prompt,
    concepts_in_prompt,
    emit_report,
    explain_document,
    generate_explanation,
    load_report,
    map_to_concepts,
    merge_positions,
    prompt_key,
    report_html,
    report_json,
    salient_spans,
)
from kinn.lexicon import Concept, Lexicon

THERAPY_IDS = ["dfo:need_therapy", "dfo:crying", "dfo:suicidal_thoughts"]


def trace_from(a_fused: np.ndarray, n_domain: int, probs=(0.2, 0.8)) -> DocumentTrace:
    n = a_fused.shape[0]
    return DocumentTrace(np.full((n_domain, n_domain), 1 / n_domain), np.ones((1, 1)), a_fused,
                         np.zeros((n, 4)), np.zeros(4), np.zeros(len(probs)), np.asarray(probs), n_domain, n - n_domain)


def word_ranges(text: str):
    out, pos = [], 0
    for w in text.split(" "):
        out.append((pos, pos + len(w)))
        pos += len(w) + 1
    return out


def attribution(lex, cid, sim=1.0, span=None):
    c = lex.concepts[cid]
    return ConceptAttribution(span or SalientSpan(0, 1, 0.5, text="x"), cid, sim, c.preferred_label, c.phq9_category)


# -- salient spans ------------------------------------------------------------


def test_uniform_attention_returns_document_order():
    text = "one two three four"
    spans = salient_spans(trace_from(np.full((6, 6), 1 / 6), 4), word_ranges(text), text, top_k=4)
    assert [s.text for s in spans] == ["one", "two", "three", "four"]


def test_concentrated_attention_selects_and_merges_span():
    text = "I really need therapy now but I am not sure"
    a = np.full((12, 12), 0.02)
    a[:, 2] = a[:, 3] = 0.4
    a /= a.sum(1, keepdims=True)
    spans = salient_spans(trace_from(a, 10), word_ranges(text), text, top_k=1)
    assert [(s.text, s.char_start, s.char_end) for s in spans] == [("need therapy", 9, 21)]
    assert spans[0].block == Block.FUSED


def test_top_k_zero_is_empty():
    text = "a b"
    assert salient_spans(trace_from(np.full((2, 2), 0.5), 2), word_ranges(text), text, top_k=0) == []


def test_range_count_must_match_trace():
    with pytest.raises(InputError):
        salient_spans(trace_from(np.full((3, 3), 1 / 3), 3), [(0, 1)], "abc")


def test_punctuation_never_joins_a_run():
    text = "wrist , bike"
    a = np.full((3, 3), [0.1, 0.45, 0.45])
    spans = salient_spans(trace_from(a, 3), word_ranges(text), text, top_k=3)
    assert "wrist" not in [s.text for s in spans if "," in s.text]
    assert all(s.text != "wrist , bike" for s in spans)


@given(st.lists(st.floats(0, 1, allow_nan=False), max_size=30), st.data())
def test_merge_matches_brute_force(scores, data):
    mergeable = data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)))
    assert merge_positions(scores, mergeable=mergeable) == brute_force_merge(scores, mergeable)
    assert merge_positions(scores) == brute_force_merge(scores)


# -- concepts and prompt ------------------------------------------------------


def test_similarity_boundary_is_inclusive(boundary_encoder):
    lex = Lexicon([Concept("a", "anchor")])
    spans = [SalientSpan(0, 5, 0.3, text="exact"), SalientSpan(6, 11, 0.2, text="below"), SalientSpan(12, 15, 0.1, text="far")]
    got = map_to_concepts(spans, lex, boundary_encoder, 0.80)
    assert [(a.span.text, a.concept_id) for a in got] == [("exact", "a")]
    assert got[0].similarity == pytest.approx(0.80, abs=1e-12)


def test_empty_attributions_prompt_says_none():
    prompt = build_prompt("post", [], "depressed")
    assert "concepts: (none)" in prompt
    assert concepts_in_prompt(prompt) == []
    assert prompt == build_prompt("post", [], "depressed")


def test_therapy_post_prompt_lists_all_three_labels(therapy_post, toy_lexicon):
    prompt = build_prompt(therapy_post, [attribution(toy_lexicon, c) for c in THERAPY_IDS], "depressed")
    for label in ("need therapy", "crying", "suicidal thoughts"):
        assert label in prompt
    assert therapy_post in prompt


def test_stub_names_every_concept(toy_lexicon):
    prompt = build_prompt("p", [attribution(toy_lexicon, c) for c in THERAPY_IDS[:2]], "depressed")
    out = StubLlm().complete(prompt)
    assert out == "EXPLANATION STUB: need therapy; crying (PHQ-9 item 2)"


def test_fixture_replays_recorded_response(therapy_post, toy_lexicon):
    prompt = build_prompt(therapy_post, [attribution(toy_lexicon, c) for c in THERAPY_IDS], "depressed")
    path = bundled("llm_fixture.jsonl")
    recorded = {json.loads(l)["prompt_sha256"]: json.loads(l)["response"] for l in path.open()}
    assert FixtureLlm(path).complete(prompt) == recorded[prompt_key(prompt)]
    with pytest.raises(BackendError):
        FixtureLlm(path).complete(prompt + " ")


def test_fixture_errors(tmp_path):
    with pytest.raises(DataError):
        FixtureLlm(tmp_path / "nope.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"prompt_sha256": "x"}\n')
    with pytest.raises(DataError, match=":1"):
        FixtureLlm(bad)


class TimingOut:
    name = "slow"

    def complete(self, prompt):
        raise TimeoutError("deadline exceeded")


def test_llm_timeout_is_backend_error():
    with pytest.raises(BackendError):
        generate_explanation(TimingOut(), "p")


def test_explain_document_survives_llm_failure(toy_lexicon, hash_encoder):
    text = "one two"
    rep = explain_document("d", text, trace_from(np.full((2, 2), 0.5), 2), word_ranges(text), 1,
                           toy_lexicon, hash_encoder, TimingOut(), label_names=["no", "yes"])
    assert rep.llm_explanation is None
    assert rep.model_decision == 1 and rep.decision_labels == ("yes",)


def test_multilabel_decision_text(toy_lexicon, hash_encoder):
    text = "one two"
    rep = explain_document("d", text, trace_from(np.full((2, 2), 0.5), 2, (0.9, 0.1, 0.7)), word_ranges(text),
                           np.array([1, 0, 1]), toy_lexicon, hash_encoder, StubLlm(), label_names=["a", "b", "c"])
    assert rep.model_decision == (1, 0, 1)
    assert "decision: a; c" in rep.prompt


# -- reports ----------------------------------------------------------------------


def sample_report(toy_lexicon, text="I cry & <b>sleep</b>") -> ExplanationReport:
    span = SalientSpan(2, 5, 0.4, Block.FUSED, text[2:5])
    att = attribution(toy_lexicon, "dfo:crying", 0.93, span)
    return ExplanationReport("d1", text, (span,), (att,), build_prompt(text, [att], "depressed"),
                             "because", 1, (0.25, 0.75), ("depressed",))


def test_json_round_trip_is_byte_identical(tmp_path, toy_lexicon):
    rep = sample_report(toy_lexicon)
    path = emit_report(rep, ReportFormat.JSON, tmp_path / "r.json")
    back = load_report(path)
    assert back == rep
    assert report_json(back) == path.read_text(encoding="utf-8")


def test_unknown_schema_rejected(tmp_path, toy_lexicon):
    d = sample_report(toy_lexicon).to_dict()
    d["schema"] = 99
    (tmp_path / "r.json").write_text(json.dumps(d))
    with pytest.raises(DataError):
        load_report(tmp_path / "r.json")


def test_html_escapes_and_highlights(tmp_path, toy_lexicon):
    rep = sample_report(toy_lexicon)
    html = report_html(rep)
    assert "<b>sleep" not in html and "&lt;b&gt;" in html
    assert "crying" in html
    path = emit_report(rep, "html", tmp_path / "r.html")
    assert path.read_text(encoding="utf-8") == html


def test_html_with_no_spans(toy_lexicon):
    rep = ExplanationReport("d", "plain text", (), (), build_prompt("plain text", [], "x"), None, 0, (0.6, 0.4))
    html = report_html(rep)
    assert "plain text" in html


def test_span_validation():
    with pytest.raises(InputError):
        SalientSpan(5, 2, 0.1)
    with pytest.raises(InputError):
        SalientSpan(0, 2, -0.1)


# -- OpenAI-compatible client ------------------------------------------------------


def test_openai_client_reads_key_from_environment(monkeypatch):
    seen = {}

    def fake_post(url, json, timeout, headers):
        seen.update(url=url, body=json, headers=headers)
        return httpx.Response(200, json={"choices": [{"message": {"content": " fine \n"}}]})

    monkeypatch.setattr(httpx, "post", fake_post)
    monkeypatch.setenv("MY_KEY", "sk-test")
    client = OpenAiCompatibleLlm("http://llm.local/v1/", "m", api_key_env="MY_KEY")
    assert client.complete("hi") == "fine"
    assert seen["url"] == "http://llm.local/v1/chat/completions"
    assert seen["headers"]["Authorization"] == "Bearer sk-test"
    assert seen["body"]["messages"][0]["content"] == "hi"


def test_openai_client_errors(monkeypatch):
    monkeypatch.delenv("MY_KEY", raising=False)
    client = OpenAiCompatibleLlm("http://x", "m", api_key_env="MY_KEY")
    with pytest.raises(BackendError, match="MY_KEY"):
        client.complete("p")
    monkeypatch.setenv("MY_KEY", "k")
    monkeypatch.setattr(httpx, "post", lambda *a, **k: httpx.Response(503))
    with pytest.raises(BackendError) as info:
        client.complete("p")
    assert info.value.retriable

    def boom(*a, **k):
        raise httpx.ConnectTimeout("slow")

    monkeypatch.setattr(httpx, "post", boom)
    with pytest.raises(BackendError):
        client.complete("p")
