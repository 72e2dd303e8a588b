"""Corpus handling: CoNLL I/O, gazetteer matching, span enumeration and
noise auditing / injection.

Span indices are 1-based and inclusive on both ends, so the span covering
the first two tokens of a sentence is ``(1, 2)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ConllParseError

logger = logging.getLogger(__name__)

OUTSIDE = "O"


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int
    label: str

    def __post_init__(self):
        if self.start < 1:
            raise ValueError(f"span start must be >= 1, got {self.start}")
        if self.start > self.end:
            raise ValueError(f"span start {self.start} > end {self.end}")
        if not self.label or self.label == OUTSIDE:
            raise ValueError(f"invalid entity label {self.label!r}")

    def __len__(self):
        return self.end - self.start + 1

    def overlaps(self, other: "EntitySpan") -> bool:
        return self.start <= other.end and other.start <= self.end


def _check_layer(spans: Sequence[EntitySpan], n: int, name: str) -> None:
    ordered = sorted(spans)
    for span in ordered:
        if span.end > n:
            raise ValueError(f"{name} span {span} exceeds sentence length {n}")
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise ValueError(f"{name} spans overlap: {a} and {b}")


@dataclass
class Sentence:
    tokens: list[str]
    gold_spans: list[EntitySpan] | None = None
    distant_spans: list[EntitySpan] | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("sentence has no tokens")
        self.tokens = list(self.tokens)
        if self.gold_spans is not None:
            self.gold_spans = sorted(self.gold_spans)
            _check_layer(self.gold_spans, len(self.tokens), "gold")
        if self.distant_spans is not None:
            self.distant_spans = sorted(self.distant_spans)
            _check_layer(self.distant_spans, len(self.tokens), "distant")

    def __len__(self):
        return len(self.tokens)

    def spans(self, layer: str) -> list[EntitySpan] | None:
        if layer == "gold":
            return self.gold_spans
        if layer == "distant":
            return self.distant_spans
        raise ValueError(f"unknown annotation layer {layer!r}")


# ---------------------------------------------------------------------------
# BIO tags <-> spans


def tags_to_spans(tags: Sequence[str], scheme: str = "bio") -> tuple[list[EntitySpan], list[str]]:
    """Convert a tag sequence to spans.

    Returns the spans plus a list of warning messages for repaired
    transitions. In the BIO scheme an ``I-X`` that does not continue an
    ``X`` entity opens a new one, as if it were ``B-X``. In the IO scheme
    consecutive ``I-X`` tokens form one entity and no warnings arise.
    """
    if scheme not in ("bio", "io"):
        raise ValueError(f"unknown tag scheme {scheme!r}")
    spans: list[EntitySpan] = []
    warnings: list[str] = []
    start = None
    label = None
    for idx, tag in enumerate(tags, start=1):
        if tag == OUTSIDE:
            prefix, typ = OUTSIDE, None
        else:
            prefix, _, typ = tag.partition("-")
            if prefix not in ("B", "I") or not typ:
                raise ValueError(f"illegal tag {tag!r}")
        if prefix == "I" and label == typ:
            continue
        if label is not None:
            spans.append(EntitySpan(start, idx - 1, label))
            start = label = None
        if prefix == OUTSIDE:
            continue
        if prefix == "I" and scheme == "bio":
            prev = tags[idx - 2] if idx > 1 else "<start>"
            warnings.append(f"token {idx}: {tag} follows {prev}, treated as B-{typ}")
        start, label = idx, typ
    if label is not None:
        spans.append(EntitySpan(start, len(tags), label))
    return spans, warnings


def spans_to_tags(n: int, spans: Iterable[EntitySpan], scheme: str = "bio") -> list[str]:
    tags = [OUTSIDE] * n
    for span in spans:
        for k in range(span.start, span.end + 1):
            if scheme == "bio" and k == span.start:
                tags[k - 1] = f"B-{span.label}"
            else:
                tags[k - 1] = f"I-{span.label}"
    return tags


# ---------------------------------------------------------------------------
# CoNLL I/O


def load_conll(path, layer: str = "gold", scheme: str = "bio") -> list[Sentence]:
    """Read a CoNLL column file; the first column is the token, the last the tag.

    ``layer`` selects whether tags populate ``gold_spans`` or ``distant_spans``.
    ``-DOCSTART-`` lines are skipped.
    """
    if layer not in ("gold", "distant"):
        raise ValueError(f"unknown annotation layer {layer!r}")
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    first_line = 0

    def flush():
        if not tokens:
            return
        try:
            spans, warns = tags_to_spans(tags, scheme)
        except ValueError as exc:
            raise ConllParseError(str(exc), first_line, path) from None
        for w in warns:
            logger.warning("%s: sentence at line %d, %s", path, first_line, w)
        kwargs = {f"{layer}_spans": spans}
        sentences.append(Sentence(list(tokens), **kwargs))
        tokens.clear()
        tags.clear()

    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                flush()
                continue
            if stripped.startswith("-DOCSTART-"):
                continue
            fields = stripped.split()
            if len(fields) < 2:
                raise ConllParseError(f"expected 'token tag', got {stripped!r}", line_no, path)
            tag = fields[-1]
            if tag != OUTSIDE and (tag[:2] not in ("B-", "I-") or len(tag) < 3):
                raise ConllParseError(f"illegal tag {tag!r}", line_no, path)
            if not tokens:
                first_line = line_no
            tokens.append(fields[0])
            tags.append(tag)
    flush()
    return sentences


def write_conll(path, sentences: Iterable[Sentence], layer: str = "gold", scheme: str = "bio") -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            spans = sent.spans(layer) or []
            for tok, tag in zip(sent.tokens, spans_to_tags(len(sent), spans, scheme)):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")


# ---------------------------------------------------------------------------
# Gazetteer matching


@dataclass
class Gazetteer:
    entries: dict[tuple[str, ...], set[str]] = field(default_factory=dict)

    def add(self, surface, entity_type: str) -> None:
        key = tuple(surface.split()) if isinstance(surface, str) else tuple(surface)
        if not key or not all(key):
            raise ValueError(f"empty gazetteer surface {surface!r}")
        if not entity_type or entity_type == OUTSIDE:
            raise ValueError(f"invalid gazetteer type {entity_type!r}")
        self.entries.setdefault(key, set()).add(entity_type)

    @property
    def max_len(self) -> int:
        return max((len(k) for k in self.entries), default=0)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, surface):
        key = tuple(surface.split()) if isinstance(surface, str) else tuple(surface)
        return key in self.entries


def load_gazetteer(path) -> Gazetteer:
    """Read ``surface<TAB>type`` lines; repeated surfaces accumulate types."""
    gaz = Gazetteer()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            surface, sep, typ = line.rpartition("\t")
            if not sep or not surface.strip() or not typ.strip():
                raise ConllParseError(f"expected 'surface<TAB>type', got {line!r}", line_no, path)
            gaz.add(surface, typ.strip())
    return gaz


def match_gazetteer(sentence: Sentence, gaz: Gazetteer) -> list[EntitySpan]:
    """Greedy left-to-right, longest-first exact matching.

    A surface listed under several types gets the lexicographically
    smallest one, independent of context.
    """
    tokens = sentence.tokens
    n = len(tokens)
    longest = gaz.max_len
    spans = []
    i = 0
    while i < n:
        for length in range(min(longest, n - i), 0, -1):
            types = gaz.entries.get(tuple(tokens[i:i + length]))
            if types:
                spans.append(EntitySpan(i + 1, i + length, min(types)))
                i += length
                break
        else:
            i += 1
    return spans


def distant_label(sentences: Iterable[Sentence], gaz: Gazetteer) -> list[Sentence]:
    """Return copies of ``sentences`` with the distant layer set by matching."""
    return [replace(s, distant_spans=match_gazetteer(s, gaz)) for s in sentences]


# ---------------------------------------------------------------------------
# Span enumeration


def enumerate_spans(sentence, max_len: int) -> list[tuple[int, int]]:
    """All (i, j) with j - i + 1 <= max_len, in lexicographic order.

    ``sentence`` may be a Sentence or a token count.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    n = sentence if isinstance(sentence, int) else len(sentence)
    return [(i, j) for i in range(1, n + 1) for j in range(i, min(n, i + max_len - 1) + 1)]


def span_count(n: int, max_len: int) -> int:
    return sum(n - k + 1 for k in range(1, min(max_len, n) + 1))


# ---------------------------------------------------------------------------
# Noise audit


@dataclass
class TypeNoise:
    inaccurate_rate: float | None
    incomplete_rate: float | None
    support: int
    distant_support: int

    def to_dict(self):
        return {
            "inaccurate_rate": self.inaccurate_rate,
            "incomplete_rate": self.incomplete_rate,
            "support": self.support,
            "distant_support": self.distant_support,
        }


@dataclass
class NoiseReport:
    """Token-level annotation quality of a distant layer against gold.

    Rates are percentages. A rate whose denominator is zero is ``None``.
    """

    per_type: dict[str, TypeNoise]
    total: TypeNoise

    def to_dict(self):
        return {
            "unit": "token",
            "types": {t: v.to_dict() for t, v in sorted(self.per_type.items())},
            "total": self.total.to_dict(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _token_labels(sent: Sentence, spans: Sequence[EntitySpan] | None) -> list[str]:
    labels = [OUTSIDE] * len(sent)
    for span in spans or ():
        for k in range(span.start - 1, span.end):
            labels[k] = span.label
    return labels


def _rate(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def compute_noise_rates(gold: Sequence[Sentence], distant: Sequence[Sentence]) -> NoiseReport:
    """Compare the distant annotation of a corpus with its gold annotation.

    Gold labels are read from ``gold_spans`` of ``gold``. Distant labels
    are read from ``distant_spans`` of ``distant``, falling back to its
    ``gold_spans`` when a file was loaded as a plain CoNLL corpus.

    A distant token of type T is inaccurate when its gold label is anything
    other than T, including O; a gold token of type T is incomplete when the
    distant layer leaves it O.
    """
    if len(gold) != len(distant):
        raise AlignmentError(f"corpus sizes differ: {len(gold)} gold vs {len(distant)} distant sentences")
    gold_tok: dict[str, int] = {}
    dist_tok: dict[str, int] = {}
    wrong_type: dict[str, int] = {}
    missed: dict[str, int] = {}
    for idx, (g, d) in enumerate(zip(gold, distant)):
        if g.tokens != d.tokens:
            raise AlignmentError(f"sentence {idx}: token sequences differ")
        d_spans = d.distant_spans if d.distant_spans is not None else d.gold_spans
        for gl, dl in zip(_token_labels(g, g.gold_spans), _token_labels(d, d_spans)):
            if gl != OUTSIDE:
                gold_tok[gl] = gold_tok.get(gl, 0) + 1
                if dl == OUTSIDE:
                    missed[gl] = missed.get(gl, 0) + 1
            if dl != OUTSIDE:
                dist_tok[dl] = dist_tok.get(dl, 0) + 1
                if gl != dl:
                    wrong_type[dl] = wrong_type.get(dl, 0) + 1

    per_type = {}
    for t in sorted(set(gold_tok) | set(dist_tok)):
        per_type[t] = TypeNoise(
            inaccurate_rate=_rate(wrong_type.get(t, 0), dist_tok.get(t, 0)),
            incomplete_rate=_rate(missed.get(t, 0), gold_tok.get(t, 0)),
            support=gold_tok.get(t, 0),
            distant_support=dist_tok.get(t, 0),
        )
    total = TypeNoise(
        inaccurate_rate=_rate(sum(wrong_type.values()), sum(dist_tok.values())),
        incomplete_rate=_rate(sum(missed.values()), sum(gold_tok.values())),
        support=sum(gold_tok.values()),
        distant_support=sum(dist_tok.values()),
    )
    return NoiseReport(per_type, total)


# ---------------------------------------------------------------------------
# Synthetic noise


def inject_noise(
    gold: Sequence[Sentence],
    flip_rate: float,
    drop_rate: float,
    asymmetry: Mapping[str, float] | None = None,
    seed: int = 0,
    labels: Sequence[str] | None = None,
) -> list[Sentence]:
    """Build a distant layer from gold spans by dropping and relabelling.

    Each gold entity of type T is deleted with probability
    ``drop_rate * asymmetry.get(T, 1)``; a surviving entity is relabelled
    with probability ``flip_rate`` to a type drawn uniformly from the other
    entity types. ``labels`` defaults to every type present in ``gold``.
    """
    if not 0.0 <= flip_rate <= 1.0 or not 0.0 <= drop_rate <= 1.0:
        raise ValueError("flip_rate and drop_rate must lie in [0, 1]")
    asymmetry = dict(asymmetry or {})
    if labels is None:
        labels = sorted({s.label for sent in gold for s in sent.gold_spans or ()})
    labels = sorted(labels)
    for t, m in asymmetry.items():
        if not 0.0 <= drop_rate * m <= 1.0:
            raise ValueError(f"effective drop rate for {t} is {drop_rate * m}, outside [0, 1]")
    if flip_rate > 0 and len(labels) < 2:
        logger.warning("only one entity type (%s); flips leave labels unchanged", labels)

    rng = np.random.default_rng(seed)
    out = []
    for sent in gold:
        kept = []
        for span in sent.gold_spans or ():
            # two draws per entity, always, so the stream does not depend on outcomes
            u_drop, u_flip = rng.random(2)
            if u_drop < drop_rate * asymmetry.get(span.label, 1.0):
                continue
            label = span.label
            others = [t for t in labels if t != span.label]
            if others and u_flip < flip_rate:
                label = others[int(rng.integers(len(others)))]
            kept.append(EntitySpan(span.start, span.end, label))
        out.append(Sentence(list(sent.tokens), gold_spans=list(sent.gold_spans or []), distant_spans=kept))
    return out


def strip_layer(sentences: Iterable[Sentence], layer: str) -> list[Sentence]:
    return [replace(s, **{f"{layer}_spans": None}) for s in sentences]


def merge_layers(gold: Sequence[Sentence], distant: Sequence[Sentence]) -> list[Sentence]:
    """Pair gold and distant annotations of the same text into one corpus."""
    if len(gold) != len(distant):
        raise AlignmentError(f"corpus sizes differ: {len(gold)} vs {len(distant)}")
    out = []
    for idx, (g, d) in enumerate(zip(gold, distant)):
        if g.tokens != d.tokens:
            raise AlignmentError(f"sentence {idx}: token sequences differ")
        d_spans = d.distant_spans if d.distant_spans is not None else d.gold_spans
        out.append(Sentence(list(g.tokens), gold_spans=g.gold_spans, distant_spans=d_spans))
    return out

