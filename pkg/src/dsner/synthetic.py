"""Rule-based synthetic NER corpus.

Sentences are produced from fixed templates whose slots are filled with
entity surfaces drawn from per-type lexicons. The lexicons are generated
from a separate seed, so train/dev/test splits drawn with different
sentence seeds share one world of entities. A fraction of surfaces is
listed under two types (the "Washington" effect): their gold type is
decided by the template context only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EntitySpan, Gazetteer, Sentence

ENTITY_TYPES = ("LOC", "MISC", "ORG", "PER")

_ONSETS = ["b", "br", "c", "d", "dr", "f", "g", "gr", "h", "k", "l", "m", "n", "p",
           "r", "s", "st", "t", "tr", "v", "w", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "n", "r", "s", "l", "m", "t", "x", "nd", "rk"]

_ORG_SUFFIX = ["Corp", "Bank", "Group", "Holdings", "Airlines", "United"]
_MISC_SUFFIX = ["ian", "ese", "ish"]

# Each template is a token list; "{T}" marks a slot of entity type T.
_TEMPLATES = [
    "{PER} said on Monday that the deal was done .",
    "{PER} , chairman of {ORG} , visited {LOC} on Friday .",
    "talks were held in {LOC} last week .",
    "shares of {ORG} rose 3 percent in early trading .",
    "the {MISC} delegation arrived in {LOC} late on Tuesday .",
    "{PER} met {PER} at the {MISC} embassy .",
    "{ORG} announced a new plant near {LOC} .",
    "police in {LOC} arrested two men on Sunday .",
    "{PER} told reporters that {ORG} would appeal .",
    "the {MISC} government denied the report .",
    "{PER} scored twice as {ORG} beat {ORG} 2 - 1 .",
    "a {MISC} court fined {ORG} heavily .",
    "officials from {LOC} and {LOC} signed the accord .",
    "minister {PER} flew to {LOC} for talks .",
    "the {MISC} team won the cup in {LOC} .",
    "analysts expect {ORG} to report higher profits .",
    "the match was played in {LOC} before a small crowd .",
    "{PER} , a {MISC} diplomat , declined to comment .",
]

_FILLERS = [
    "meanwhile ,", "however ,", "on Wednesday ,", "according to sources ,",
    "as expected ,", "in a statement ,",
]


def _word(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))])
    parts.append(_CODAS[rng.integers(len(_CODAS))])
    return "".join(parts).capitalize()


@dataclass
class Lexicon:
    """Entity surfaces per type, each surface a tuple of tokens."""

    surfaces: dict[str, list[tuple[str, ...]]]

    def gazetteer(self, coverage: float = 1.0, seed: int = 0) -> Gazetteer:
        """A gazetteer listing ``coverage`` of the surfaces under every type they have."""
        rng = np.random.default_rng(seed)
        gaz = Gazetteer()
        for typ in sorted(self.surfaces):
            for surface in self.surfaces[typ]:
                if rng.random() < coverage:
                    gaz.add(surface, typ)
        return gaz


def make_lexicon(size: int = 60, ambiguous: float = 0.1, seed: int = 0) -> Lexicon:
    rng = np.random.default_rng(seed)
    used: set[str] = set()

    def fresh(syl):
        while True:
            w = _word(rng, syl)
            if w not in used:
                used.add(w)
                return w

    surfaces: dict[str, list[tuple[str, ...]]] = {t: [] for t in ENTITY_TYPES}
    for _ in range(size):
        first, last = fresh(2), fresh(2)
        surfaces["PER"].append((first, last) if rng.random() < 0.6 else (last,))
        surfaces["LOC"].append((fresh(int(rng.integers(2, 4))),))
        base = fresh(2)
        surfaces["ORG"].append((base, _ORG_SUFFIX[rng.integers(len(_ORG_SUFFIX))]) if rng.random() < 0.7 else (base,))
        surfaces["MISC"].append((fresh(2)[:-1] + _MISC_SUFFIX[rng.integers(len(_MISC_SUFFIX))],))
    # shared single-token surfaces between PER and LOC, ORG and LOC
    n_amb = int(round(ambiguous * size))
    for k in range(n_amb):
        loc = surfaces["LOC"][k]
        if k % 2 == 0:
            surfaces["PER"].append(loc)
        else:
            surfaces["ORG"].append(loc)
    return Lexicon(surfaces)


def make_synthetic_corpus(n_sentences: int, seed: int, lexicon: Lexicon | None = None) -> list[Sentence]:
    """Generate ``n_sentences`` gold-annotated sentences."""
    lexicon = lexicon or make_lexicon()
    rng = np.random.default_rng(seed)
    templates = [t.split() for t in _TEMPLATES]
    out = []
    for _ in range(n_sentences):
        tmpl = templates[rng.integers(len(templates))]
        tokens: list[str] = []
        spans: list[EntitySpan] = []
        if rng.random() < 0.3:
            tokens.extend(_FILLERS[rng.integers(len(_FILLERS))].split())
        for piece in tmpl:
            if piece.startswith("{") and piece.endswith("}"):
                typ = piece[1:-1]
                pool = lexicon.surfaces[typ]
                surface = pool[rng.integers(len(pool))]
                start = len(tokens) + 1
                tokens.extend(surface)
                spans.append(EntitySpan(start, len(tokens), typ))
            else:
                tokens.append(piece)
        out.append(Sentence(tokens, gold_spans=spans))
    return out
