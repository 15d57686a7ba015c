import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinn import backends
from kinn.data import bundled
from kinn.encoding import (
    ASPECT_SEP,
    NONE_INFERENCE,
    SELECTED_RELATIONS,
    AspectSet,
    FixtureCommonsense,
    HashEncoder,
    Seq2SeqCommonsense,
    StubCommonsense,
    concat_with_aspects,
    cosine,
    embed_phrase,
    embed_sequence,
    escape_segment,
    escaped_offsets,
    extract_aspects,
    split_aspect_string,
    split_units,
    unescape_segment,
)
from kinn.errors import BackendError, InputError


def test_stub_is_deterministic_and_self_similar():
    a, b = HashEncoder(64), HashEncoder(64)
    assert np.array_equal(embed_phrase(a, "sleep problems"), embed_phrase(b, "sleep problems"))
    v = embed_phrase(a, "crying")
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-9)


def test_empty_phrase_rejected(hash_encoder):
    with pytest.raises(InputError):
        embed_phrase(hash_encoder, "")
    with pytest.raises(InputError):
        embed_phrase(hash_encoder, "   ")


def test_sequence_lengths(hash_encoder):
    assert embed_sequence(hash_encoder, "one two three", 10).length == 3
    long = " ".join(f"w{i}" for i in range(60))
    seq = embed_sequence(hash_encoder, long, 50)
    assert seq.length == 50 and seq.units[-1].text == "w49"
    assert embed_sequence(hash_encoder, "", 5).length == 0
    with pytest.raises(InputError):
        embed_sequence(hash_encoder, "x", 0)


def test_stub_is_context_free(hash_encoder):
    ab = embed_sequence(hash_encoder, "a b", 10).vectors
    ba = embed_sequence(hash_encoder, "b a", 10).vectors
    assert not np.array_equal(ab, ba)
    assert sorted(map(tuple, ab)) == sorted(map(tuple, ba))


def test_markers_are_single_units(hash_encoder):
    units = split_units("I cut my [[wrist|c1]].")
    assert [u.text for u in units] == ["I", "cut", "my", "wrist", "."]
    assert units[3].concept_id == "c1"
    tagged = embed_sequence(hash_encoder, "[[wrist|c1]]", 5).vectors[0]
    plain = embed_sequence(hash_encoder, "wrist", 5).vectors[0]
    assert cosine(tagged, plain) < 0.9


def test_stub_aspects_non_empty_and_stable():
    stub = StubCommonsense()
    a = extract_aspects(stub, "I cut my wrist")
    assert all(a.ordered())
    assert a == extract_aspects(stub, "I cut my wrist")
    with pytest.raises(InputError):
        extract_aspects(stub, " ")


def test_fixture_keeps_five_of_nine():
    fx = FixtureCommonsense(bundled("comet_fixture.jsonl"))
    a = extract_aspects(fx, "I cut my wrist")
    assert a.ordered() == ("to hurt themselves", "bleeds", "numb", "worries about them", "scared")
    assert set(a.to_dict()) == set(SELECTED_RELATIONS)
    with pytest.raises(BackendError):
        extract_aspects(fx, "never recorded")
    lenient = FixtureCommonsense(bundled("comet_fixture.jsonl"), strict=False)
    assert extract_aspects(lenient, "never recorded") == AspectSet()


def test_concat_layout():
    none = AspectSet()
    s = concat_with_aspects("post", none)
    assert s == ASPECT_SEP.join(["post"] + [NONE_INFERENCE] * 5)
    named = AspectSet("IW", "EW", "RW", "EL", "RL")
    s = concat_with_aspects("post", named)
    assert s.index("IW") < s.index("RL")
    assert split_aspect_string(s) == ["post", "IW", "EW", "RW", "EL", "RL"]


@given(st.text(alphabet=list("ab<|>\\ "), max_size=20), st.lists(st.text(alphabet=list("x<|>\\ "), max_size=8), min_size=5, max_size=5))
def test_concat_round_trip(text, parts):
    aspects = AspectSet(*parts)
    assert split_aspect_string(concat_with_aspects(text, aspects)) == [text, *parts]


@given(st.text(alphabet=list("a<|>\\"), max_size=30))
def test_escaped_offsets(s):
    esc = escape_segment(s)
    offs = escaped_offsets(s)
    assert len(offs) == len(esc)
    assert unescape_segment(esc) == s
    for i, ch in enumerate(esc):
        if ch != "\\":
            assert s[offs[i]] == ch


def test_backend_parallelism_limit():
    class Serial:
        max_parallel = 1
        active = 0
        peak = 0
        lock = threading.Lock()

        def work(self):
            with self.lock:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(0.01)
            with self.lock:
                self.active -= 1

    be = Serial()
    threads = [threading.Thread(target=backends.call, args=(be, be.work)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert be.peak == 1
    assert backends.worker_count(be, default=4) == 1
    assert backends.worker_count(HashEncoder(4), default=4) == 4


def _tiny_bert(tmp_path):
    transformers = pytest.importorskip("transformers")
    words = "[PAD] [UNK] [CLS] [SEP] [MASK] i cut my wrist have hair sleep problems , .".split()
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("\n".join(words))
    tok = transformers.BertTokenizerFast(vocab_file=str(vocab))
    config = transformers.BertConfig(vocab_size=len(words), hidden_size=16, num_hidden_layers=4,
                                     num_attention_heads=2, intermediate_size=32)
    import torch

    torch.manual_seed(0)
    return transformers.BertModel(config), tok


def test_transformer_encoder_offline(tmp_path):
    from kinn.encoding import TransformerEncoder

    model, tok = _tiny_bert(tmp_path)
    enc = TransformerEncoder(model=model, tokenizer=tok)
    assert enc.dim == 16
    seq = embed_sequence(enc, "I cut my [[sleep problems|c1]] .", 10)
    assert seq.vectors.shape == (5, 16)
    assert [u.text for u in seq.units] == ["I", "cut", "my", "sleep problems", "."]
    v = embed_phrase(enc, "sleep problems")
    assert v.shape == (16,) and np.allclose(v, embed_phrase(enc, "sleep problems"))


def test_seq2seq_prompt_format():
    import torch

    class Tok:
        def __init__(self):
            self.prompts = []

        def __call__(self, text, return_tensors=None, truncation=None):
            self.prompts.append(text)
            return {"input_ids": torch.tensor([[1]])}

        def decode(self, ids, skip_special_tokens=True):
            return " to feel better "

    class Model:
        def eval(self):
            return self

        def generate(self, **kw):
            return torch.tensor([[1, 2]])

    tok = Tok()
    backend = Seq2SeqCommonsense(model=Model(), tokenizer=tok)
    aspects = extract_aspects(backend, "I cry")
    assert aspects.intent_w == "to feel better"
    assert tok.prompts[0] == "I cry xIntent [GEN]"
    assert len(tok.prompts) == 9
