"""Span-based NER model.

Token vectors come from an encoder; a span (i, j) is represented by the
concatenation ``h_i, h_j, h_i - h_j, h_i * h_j``, projected through a
tanh layer to ``r`` and classified with a softmax layer to ``o``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import OUTSIDE, Sentence
from .errors import CheckpointError

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
CHECKPOINT_FORMAT = "dsner.checkpoint"
CHECKPOINT_VERSION = 1


class Vocab:
    """Token-to-id map; id 0 is padding and id 1 is the shared unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, sentences: Iterable[Sentence], min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for sent in sentences:
            for tok in sent.tokens:
                counts[tok] = counts.get(tok, 0) + 1
        return cls(t for t, c in counts.items() if c >= min_count)

    def __len__(self):
        return len(self.itos)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in tokens]


@dataclass
class EncoderConfig:
    kind: str = "toy"
    token_dim: int = 64
    window: int = 3
    seed: int = 0
    model_path: str | None = None

    def validate(self):
        if self.kind not in ("toy", "pretrained-adapter"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "toy" and self.token_dim < 2:
            raise ValueError("token_dim must be >= 2")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.kind == "pretrained-adapter" and not self.model_path:
            raise ValueError("pretrained-adapter encoder needs model_path")


@dataclass
class SpanCandidate:
    sentence_id: int
    start: int
    end: int
    s: torch.Tensor | None = None
    r: torch.Tensor | None = None
    o: torch.Tensor | None = None
    assigned_label: str = OUTSIDE


# ---------------------------------------------------------------------------
# Functional pieces


def span_representation(h: torch.Tensor, i: int, j: int) -> torch.Tensor:
    """Raw feature vector of the span from token ``i`` to token ``j`` (1-based, inclusive)."""
    n = h.shape[0]
    if not 1 <= i <= j <= n:
        raise IndexError(f"span ({i}, {j}) out of range for {n} tokens")
    hi, hj = h[i - 1], h[j - 1]
    return torch.cat([hi, hj, hi - hj, hi * hj], dim=-1)


def batch_span_representation(h: torch.Tensor, batch_idx, starts, ends) -> torch.Tensor:
    """Vectorised form over 0-based positions; ``h`` is ``[B, n, d_h]``."""
    hi = h[batch_idx, starts]
    hj = h[batch_idx, ends]
    return torch.cat([hi, hj, hi - hj, hi * hj], dim=-1)


def project(s: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if s.shape[-1] != weight.shape[1]:
        raise ValueError(f"span feature has dim {s.shape[-1]}, projection expects {weight.shape[1]}")
    return torch.tanh(F.linear(s, weight, bias))


def classify(r: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if r.shape[-1] != weight.shape[1]:
        raise ValueError(f"representation has dim {r.shape[-1]}, classifier expects {weight.shape[1]}")
    return torch.softmax(F.linear(r, weight, bias), dim=-1)


# ---------------------------------------------------------------------------
# Encoders


class ToyEncoder(nn.Module):
    """Token embeddings plus one convolutional mixing layer.

    The output at position k depends only on tokens k - window .. k + window.
    """

    def __init__(self, vocab_size: int, dim: int, window: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=0)
        self.mix = nn.Conv1d(dim, dim, kernel_size=2 * window + 1, padding=window)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        e = self.embed(token_ids)
        ctx = torch.tanh(self.mix(e.transpose(1, 2))).transpose(1, 2)
        return e + ctx


class PretrainedAdapterEncoder(nn.Module):
    """Wraps a locally stored HuggingFace encoder; each word takes its first subword's vector."""

    def __init__(self, model_path: str):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_path)
        self.lm = AutoModel.from_pretrained(model_path)
        self.dim = self.lm.config.hidden_size
        self.window = None

    def forward_words(self, batch_words: list[list[str]]) -> torch.Tensor:
        enc = self.tokenizer(batch_words, is_split_into_words=True, return_tensors="pt", padding=True)
        device = next(self.lm.parameters()).device
        out = self.lm(**{k: v.to(device) for k, v in enc.items()}).last_hidden_state
        n = max(len(w) for w in batch_words)
        h = out.new_zeros(len(batch_words), n, self.dim)
        for b in range(len(batch_words)):
            seen = set()
            for pos, wid in enumerate(enc.word_ids(b)):
                if wid is not None and wid not in seen:
                    seen.add(wid)
                    h[b, wid] = out[b, pos]
        return h


# ---------------------------------------------------------------------------
# Model


class SpanNER(nn.Module):
    def __init__(
        self,
        labels: Sequence[str],
        vocab: Vocab,
        encoder: EncoderConfig | None = None,
        rep_dim: int = 256,
        bias: bool = True,
    ):
        super().__init__()
        labels = list(labels)
        if labels[0] != OUTSIDE or OUTSIDE in labels[1:] or len(set(labels)) != len(labels):
            raise ValueError(f"label list must start with {OUTSIDE!r} and be unique: {labels}")
        self.labels = labels
        self.vocab = vocab
        self.encoder_config = encoder or EncoderConfig()
        self.encoder_config.validate()
        self.rep_dim = rep_dim
        self.bias = bias
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.encoder_config.seed)
            if self.encoder_config.kind == "toy":
                self.encoder = ToyEncoder(len(vocab), self.encoder_config.token_dim, self.encoder_config.window)
            else:
                self.encoder = PretrainedAdapterEncoder(self.encoder_config.model_path)
            self.token_dim = self.encoder.dim
            self.proj = nn.Linear(4 * self.token_dim, rep_dim, bias=bias)
            self.classifier = nn.Linear(rep_dim, len(labels), bias=bias)

    @property
    def outside_index(self) -> int:
        return 0

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def label_index(self, label: str) -> int:
        return self.labels.index(label)

    def token_tensor(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        n = max(len(s) for s in sentences)
        ids = torch.zeros(len(sentences), n, dtype=torch.long)
        for b, sent in enumerate(sentences):
            ids[b, : len(sent)] = torch.tensor(self.vocab.ids(sent.tokens))
        return ids

    def encode(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        """Token vectors ``[B, n_max, d_h]`` for a batch of sentences."""
        for sent in sentences:
            if not sent.tokens:
                raise ValueError("cannot encode an empty sentence")
        if isinstance(self.encoder, ToyEncoder):
            device = self.proj.weight.device
            return self.encoder(self.token_tensor(sentences).to(device))
        return self.encoder.forward_words([s.tokens for s in sentences])

    def project(self, s: torch.Tensor) -> torch.Tensor:
        return project(s, self.proj.weight, self.proj.bias)

    def logits(self, r: torch.Tensor) -> torch.Tensor:
        if r.shape[-1] != self.rep_dim:
            raise ValueError(f"representation has dim {r.shape[-1]}, classifier expects {self.rep_dim}")
        return self.classifier(r)

    def classify(self, r: torch.Tensor) -> torch.Tensor:
        return classify(r, self.classifier.weight, self.classifier.bias)

    def forward(self, sentences, batch_idx, starts, ends):
        """Return ``(r, logits)`` for 0-based span positions over a sentence batch."""
        h = self.encode(sentences)
        s = batch_span_representation(h, batch_idx, starts, ends)
        r = self.project(s)
        return r, self.logits(r)

    def spans_for(self, sentences: Sequence[Sentence], spans: Sequence[Sequence[tuple[int, int]]]):
        """Representations and distributions for 1-based spans per sentence, in inference mode."""
        b_idx, st, en = [], [], []
        for b, sent_spans in enumerate(spans):
            for i, j in sent_spans:
                b_idx.append(b)
                st.append(i - 1)
                en.append(j - 1)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            r, logits = self(sentences, torch.tensor(b_idx, dtype=torch.long),
                             torch.tensor(st, dtype=torch.long), torch.tensor(en, dtype=torch.long))
        self.train(was_training)
        return r, torch.softmax(logits, dim=-1)

    # -- identity -----------------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "labels": self.labels,
            "encoder": asdict(self.encoder_config),
            "rep_dim": self.rep_dim,
            "bias": self.bias,
        }

    def fingerprint(self) -> str:
        """SHA-256 over configuration, vocabulary and every parameter tensor."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config_dict(), sort_keys=True).encode())
        h.update("\n".join(self.vocab.itos).encode())
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def encode(sentence: Sentence, model: SpanNER) -> torch.Tensor:
    """Token vectors ``[n, d_h]`` for one sentence, in inference mode."""
    if not sentence.tokens:
        raise ValueError("cannot encode an empty sentence")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        h = model.encode([sentence])[0, : len(sentence)]
    model.train(was_training)
    return h


# ---------------------------------------------------------------------------
# Checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(model: SpanNER, path, run_config: dict | None = None) -> str:
    """Write a checkpoint and return the model fingerprint stored in it."""
    fingerprint = model.fingerprint()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_kind": model.encoder_config.kind,
        "model": model.config_dict(),
        "vocab": model.vocab.itos,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "run_config": run_config or {},
        "config_hash": config_hash(run_config or {}),
        "fingerprint": fingerprint,
    }
    torch.save(payload, path)
    return fingerprint


def load_checkpoint(path, labels: Sequence[str] | None = None) -> SpanNER:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    meta = payload["model"]
    if labels is not None and list(labels) != meta["labels"]:
        raise CheckpointError(f"label set mismatch: checkpoint has {meta['labels']}, expected {list(labels)}")
    vocab = Vocab()
    vocab.itos = list(payload["vocab"])
    vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
    model = SpanNER(meta["labels"], vocab, EncoderConfig(**meta["encoder"]), meta["rep_dim"], meta["bias"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    model.run_config = payload.get("run_config", {})
    if model.fingerprint() != payload["fingerprint"]:
        raise CheckpointError(f"{path}: parameters do not match the stored fingerprint")
    return model

