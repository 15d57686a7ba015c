"""A small deterministic part-of-speech tagger for informal English.

Tags follow the Universal Dependencies UPOS set (NOUN, PROPN, VERB, AUX,
ADJ, ADV, PRON, DET, ADP, CCONJ, SCONJ, PART, NUM, INTJ, PUNCT, SYM, X).

The tagger is a closed-class dictionary plus an open-class lexicon, suffix
heuristics and a handful of left-context rules for words that are commonly
both nouns and verbs ("cut", "cry", "need", ...). Unknown words default to
NOUN. It ships with the package so that tagging results never drift with a
third-party model version.
"""

from __future__ import annotations

import re
from typing import Sequence

NOUN_TAGS = frozenset({"NOUN", "PROPN"})

_CLOSED: dict[str, str] = {}


def _add(tag: str, words: str) -> None:
    for w in words.split():
        _CLOSED.setdefault(w, tag)


_add("PRON", "i me myself you yourself yourselves he him himself she herself it itself we us ourselves "
             "they them themselves who whom whoever what whatever everyone everybody everything someone "
             "somebody something anyone anybody anything nobody nothing noone one ones mine yours hers ours "
             "theirs i'm i've i'll i'd you're you've you'll you'd he's she's it's we're we've we'll they're "
             "they've they'll im ive ill id youre theyre thats that's there's theres")
_add("DET", "a an the this that these those my your his her its our their some any no every each either "
            "neither another such all both few many much more most several which whose")
_add("ADP", "of in on at by for with about against between into through during before after above below "
            "from up down out off over under again further around among across along behind beyond "
            "despite except inside outside near onto toward towards upon within without via per since like")
_add("AUX", "am is are was were be been being have has had having do does did doing will would shall "
            "should can could may might must ought 'm 're 's 've 'll 'd don't doesn't didn't can't cannot "
            "couldn't won't wouldn't shouldn't isn't aren't wasn't weren't haven't hasn't hadn't dont doesnt "
            "didnt cant couldnt wont wouldnt shouldnt isnt arent wasnt werent havent hasnt hadnt ain't aint")
_add("CCONJ", "and or but nor yet so plus")
_add("SCONJ", "if because although though while whereas unless until whether when whenever where "
              "wherever once than as")
_add("PART", "not n't to 's")
_add("ADV", "very really just too also quite rather almost always never often sometimes usually maybe "
            "perhaps even still already ever again now then here there today tonight tomorrow yesterday "
            "soon later lately anymore away back forward together alone else instead anyway somehow "
            "actually basically literally probably definitely certainly honestly seriously constantly "
            "completely totally absolutely barely hardly only well how why")
_add("INTJ", "oh ah hey hi hello yes yeah yep nope ok okay wow ugh lol idk omg please thanks thank")
_add("NUM", "zero two three four five six seven eight nine ten eleven twelve twenty thirty hundred "
            "thousand million first second third")

_ADJ = set(
    "bad good sad happy lazy normal fine dramatic afraid scared tired exhausted lonely anxious depressed "
    "suicidal hopeless worthless helpless useless little big small new old young specific real true "
    "other same whole different empty numb sick ill worse better best worst great hard easy difficult "
    "terrible horrible awful okay ok nice kind mean angry upset nervous worried guilty ashamed "
    "embarrassed weak strong alive dead low high long short fat thin ugly stupid dumb crazy "
    "miserable broken lost stuck desperate overwhelmed stressed restless sleepless hungry "
    "full last next own able unable certain sure clear important possible impossible free busy "
    "quiet loud late early single social medical mental physical emotional clinical severe mild "
    "constant entire daily weekly past recent previous main major minor bipolar manic awake asleep".split()
)

_ADV_SUFFIX = re.compile(r"^[a-z]{3,}ly$")
_ADJ_SUFFIX = re.compile(r"^[a-z]{3,}(ous|ful|less|ive|able|ible|ical|ish|ic)$")
_NOUN_SUFFIX = re.compile(r"^[a-z]{2,}(tion|sion|ness|ment|ity|ism|ist|ence|ance|ship|hood|dom|ure|age)s?$")

# Words used both as nouns and as verbs; resolved from left context.
_AMBIGUOUS_BASE = (
    "cut cry need help hurt harm work talk fight attack drink smoke love hate fear worry struggle panic "
    "sleep dream care kill use abuse stress cause change start end rest break fall hope wish plan "
    "feel look call mind bother lie cheat sob scream shout hug kiss"
).split()

_VERB_BASE = (
    "decide go come want think know say believe act take make get give tell try seem leave keep let begin "
    "lose live die eat see hear find put run walk stay wake sit stand read write watch play buy pay "
    "send meet learn understand remember forget happen feel become leave wonder ask answer tell "
    "move stop quit continue finish suffer survive cope deal handle manage deserve belong matter "
    "miss wait hold carry open close follow lead grow pass spend win lose turn show stare ignore "
    "avoid blame trust judge explain pretend promise refuse seek self-harm overdose scare annoy "
    "feed force"
).split()

_IRREGULAR = {
    "went": "go", "gone": "go", "came": "come", "thought": "think", "knew": "know", "known": "know",
    "said": "say", "took": "take", "taken": "take", "made": "make", "got": "get", "gotten": "get",
    "gave": "give", "given": "give", "told": "tell", "left": "leave", "kept": "keep", "began": "begin",
    "begun": "begin", "lost": "lose", "died": "die", "ate": "eat", "eaten": "eat", "saw": "see",
    "seen": "see", "heard": "hear", "found": "find", "ran": "run", "woke": "wake", "sat": "sit",
    "stood": "stand", "wrote": "write", "written": "write", "bought": "buy", "paid": "pay",
    "sent": "send", "met": "meet", "understood": "understand", "forgot": "forget", "felt": "feel",
    "became": "become", "held": "hold", "led": "lead", "grew": "grow", "spent": "spend", "won": "win",
    "slept": "sleep", "fought": "fight", "drank": "drink", "broke": "break", "broken": "break",
    "fell": "fall", "lay": "lie", "hit": "hit", "quit": "quit", "dreamt": "dream", "done": "do",
}


def _inflections(base: str) -> set[str]:
    forms = {base}
    if base.endswith("y") and len(base) > 2 and base[-2] not in "aeiou":
        forms |= {base[:-1] + "ies", base[:-1] + "ied", base + "ing"}
    elif base.endswith("e"):
        forms |= {base + "s", base + "d", base[:-1] + "ing"}
    elif re.search(r"(s|sh|ch|x|z)$", base):
        forms |= {base + "es", base + "ed", base + "ing"}
    else:
        forms |= {base + "s", base + "ed", base + "ing"}
        if re.search(r"[^aeiou][aeiou][bdgkmnprt]$", base) and len(base) <= 4:
            forms |= {base + base[-1] + "ing", base + base[-1] + "ed"}
    return forms


_AMBIGUOUS: set[str] = set()
for _b in _AMBIGUOUS_BASE:
    _AMBIGUOUS |= _inflections(_b)
_AMBIGUOUS |= {k for k, v in _IRREGULAR.items() if v in _AMBIGUOUS_BASE}
_VERBS: set[str] = set()
for _b in _VERB_BASE:
    _VERBS |= _inflections(_b)
_VERBS |= set(_IRREGULAR) - _AMBIGUOUS
_VERBS -= _AMBIGUOUS

_HAVE_GET = {"have", "has", "had", "having", "get", "gets", "got", "getting"}
_SUBJECT_PRON = {"i", "you", "he", "she", "it", "we", "they", "who", "im", "i'm", "you're", "we're",
                 "they're", "ive", "i've", "i'll", "i'd"}
_POSSESSIVE = {"my", "your", "his", "her", "its", "our", "their"}
_PUNCT_RE = re.compile(r"^[^\w\s]+$")
_NUM_RE = re.compile(r"^\d+([.,:]\d+)*(st|nd|rd|th|s)?$")


def _static_tag(word: str, lw: str) -> str | None:
    if _PUNCT_RE.match(word):
        return "SYM" if lw in {"$", "%", "&", "+", "=", "#", "@", "<", ">", "^", "~", "|"} else "PUNCT"
    if _NUM_RE.match(lw):
        return "NUM"
    if lw in _CLOSED:
        return _CLOSED[lw]
    if lw in _ADJ:
        return "ADJ"
    if lw in _VERBS:
        return "VERB"
    return None


def tag_words(words: Sequence[str]) -> list[str]:
    """Assign one UPOS tag per word, left to right."""
    tags: list[str] = []
    lowered = [w.lower() for w in words]
    for i, (word, lw) in enumerate(zip(words, lowered)):
        prev_tag = tags[i - 1] if i else None
        prev = lowered[i - 1] if i else None
        tag = _static_tag(word, lw)

        # possessive determiners are tagged DET; "her" after a verb is an object pronoun
        if lw == "her" and prev_tag in {"VERB", "ADP"} and (i + 1 >= len(words) or _static_tag(words[i + 1], lowered[i + 1]) in {"PUNCT", "ADP", "CCONJ", "SCONJ", "ADV"}):
            tag = "PRON"
        # "that" after a verb introduces a clause
        if lw == "that" and prev_tag == "VERB":
            tag = "SCONJ"

        if tag is None and lw in _AMBIGUOUS:
            if prev_tag in {"PRON", "AUX", "PART"} and (prev in _SUBJECT_PRON or prev_tag != "PRON"):
                tag = "VERB"
            elif prev_tag == "PRON" and prev not in _SUBJECT_PRON:
                tag = "NOUN"
            elif prev_tag in {"DET", "ADJ", "NUM"} or prev in _POSSESSIVE:
                tag = "NOUN"
            elif prev_tag in NOUN_TAGS and i >= 3 and lowered[i - 3] in _HAVE_GET and tags[i - 2] == "DET":
                # "have my hair cut": participle after a causative have/get
                tag = "VERB"
            elif prev_tag in NOUN_TAGS and i + 1 < len(words) and _CLOSED.get(lowered[i + 1]) in {"DET", "PRON"}:
                # "the therapist helped me": a verb before its object
                tag = "VERB"
            elif prev_tag in NOUN_TAGS:
                tag = "NOUN"
            elif prev_tag == "ADV" and i >= 2 and tags[i - 2] in {"PRON", "AUX"}:
                tag = "VERB"
            elif prev_tag is None or prev_tag in {"PUNCT", "CCONJ", "SCONJ"}:
                tag = "VERB" if (i + 1 < len(words) and lowered[i + 1] in _CLOSED
                                 and _CLOSED[lowered[i + 1]] in {"DET", "PRON"}) else "NOUN"
            else:
                tag = "NOUN"

        if tag is None:
            if lw.endswith("ing") and len(lw) > 4:
                tag = "NOUN" if prev_tag in {"DET", "ADJ", "ADP"} or prev in _POSSESSIVE else "VERB"
            elif lw.endswith("ed") and len(lw) > 4 and not _NOUN_SUFFIX.match(lw):
                tag = "VERB" if prev_tag in {"PRON", "AUX", "NOUN", "PROPN"} else "ADJ"
            elif _NOUN_SUFFIX.match(lw):
                tag = "NOUN"
            elif _ADV_SUFFIX.match(lw) and lw not in {"family", "bully", "belly", "jelly", "reply", "rally"}:
                tag = "ADV"
            elif _ADJ_SUFFIX.match(lw):
                tag = "ADJ"
            elif word[:1].isupper() and i > 0 and prev_tag not in {"PUNCT"} and lw not in _SUBJECT_PRON:
                tag = "PROPN"
            else:
                tag = "NOUN"
        tags.append(tag)
    return tags
