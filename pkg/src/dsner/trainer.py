"""Training loop, decoding and entity-level evaluation."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import OUTSIDE, EntitySpan, Sentence, enumerate_spans
from .errors import ConfigError, TrainingError
from .knn import DataStore, interpolate_distribution, knn_vote_batch
from .losses import (
    LossWeights,
    SoftLabelMemory,
    combine_losses,
    entity_cl_loss,
    gce_sr_loss,
    mfl_loss,
    soft_cross_entropy,
)
from .mixup import EntityCache, boundary_mixup
from .model import EncoderConfig, SpanNER, Vocab

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration

# Per-dataset columns of the published hyperparameter table; "bc5cdr" is the default.
PROFILES: dict[str, dict] = {
    "bc5cdr": {},
    "conll2003": {"G": 3, "mu": 0.3},
    "ontonotes": {"mu": 0.3},
    "webpage": {"batch_size": 12, "rep_dim": 128, "k": 16},
    "ec": {},
    # desk-scale runs with the toy encoder; not part of the published table
    "toy": {"lr": 1e-3, "epochs": 10, "rep_dim": 128, "max_span_len": 4, "k": 16, "mu": 0.3},
}

# section -> (file key -> RunConfig attribute)
_SECTIONS = {
    "trainer": {"lr": "lr", "batch_size": "batch_size", "epochs": "epochs", "max_span_len": "max_span_len",
                "seed": "seed", "objective": "objective", "clip_norm": "clip_norm"},
    "model": {"rep_dim": "rep_dim", "bias": "bias"},
    "losses": {"eta": "eta", "alpha": "alpha", "gamma": "gamma", "tau": "tau", "q": "q", "p": "p",
               "sr_weight": "sr_weight", "cl_denominator": "cl_denominator", "G": "G", "lambda": "lam"},
    "mixup": {"epsilon": "epsilon", "alpha_prime": "alpha_prime", "cache_capacity": "cache_capacity",
              "mixup_weight": "mixup_weight",
              "reduction": "mixup_reduction", "replace": "mixup_replace"},
    "knn": {"k": "k", "mu": "mu", "gate": "knn_gate"},
    "paths": {"train": "train_path", "dev": "dev_path", "output_dir": "output_dir"},
}


@dataclass
class RunConfig:
    lr: float = 1e-5
    batch_size: int = 16
    epochs: int = 10
    max_span_len: int = 10
    G: int = 1
    lam: float = 0.8
    epsilon: float = 0.5
    alpha: float = 0.5
    gamma: float = 2.0
    tau: float = 0.05
    mu: float = 0.7
    p: float = 0.5
    q: float = 0.3
    alpha_prime: float = 0.2
    eta: float = 0.9
    k: int = 64
    seed: int = 42
    rep_dim: int = 256
    bias: bool = True
    objective: str = "robust"
    cl_denominator: str = "all"
    sr_weight: float = 1.0
    mixup_weight: float = 1.0
    cache_capacity: int = 256
    knn_gate: str = "model"
    # "outside": mixed-instance losses summed and divided by the batch's O-span count;
    # "mixed": averaged over the mixed instances themselves
    mixup_reduction: str = "outside"
    mixup_replace: bool = False
    clip_norm: float = 1.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train_path: str | None = None
    dev_path: str | None = None
    output_dir: str | None = None

    @classmethod
    def from_profile(cls, name: str = "bc5cdr", **overrides) -> "RunConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        cfg = cls(**{**PROFILES[name], **overrides})
        cfg.validate()
        return cfg

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RunConfig":
        """Build from a nested mapping as found in a config file."""
        data = dict(data or {})
        profile = data.pop("profile", "bc5cdr")
        values: dict = {}
        for section, keys in _SECTIONS.items():
            sec = data.pop(section, None) or {}
            if not isinstance(sec, Mapping):
                raise ConfigError(f"section {section!r} must be a mapping")
            for key, val in sec.items():
                if key not in keys:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[keys[key]] = val
        enc = (data.pop("encoder", None) or {})
        if data:
            raise ConfigError(f"unknown config sections: {sorted(data)}")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        try:
            cfg = cls(**{**PROFILES[profile], **values}, encoder=EncoderConfig(**enc))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def to_mapping(self) -> dict:
        out: dict = {}
        for section, keys in _SECTIONS.items():
            out[section] = {key: getattr(self, attr) for key, attr in keys.items()}
        out["encoder"] = asdict(self.encoder)
        return out

    def replace(self, **changes) -> "RunConfig":
        cfg = copy.deepcopy(self)
        for key, val in changes.items():
            if key not in {f.name for f in fields(self)}:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, val)
        cfg.validate()
        return cfg

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.eta, self.alpha, self.gamma, self.tau, self.q, self.p)

    def validate(self) -> None:
        try:
            self.weights.validate()
            self.encoder.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.lr > 0, "lr must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.max_span_len >= 1, "max_span_len must be >= 1"),
            (self.G >= 1, "G must be >= 1"),
            (0.0 <= self.lam <= 1.0, "lambda must lie in [0, 1]"),
            (0.0 <= self.epsilon <= 1.0, "epsilon must lie in [0, 1]"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (0.0 <= self.mu <= 1.0, "mu must lie in [0, 1]"),
            (self.alpha_prime > 0, "alpha_prime must be > 0"),
            (self.k >= 1, "k must be >= 1"),
            (self.rep_dim >= 1, "rep_dim must be >= 1"),
            (self.objective in ("robust", "ce"), "objective must be 'robust' or 'ce'"),
            (self.cl_denominator in ("all", "different-label"), "cl_denominator must be 'all' or 'different-label'"),
            (self.sr_weight >= 0, "sr_weight must be >= 0"),
            (self.mixup_weight >= 0, "mixup_weight must be >= 0"),
            (self.cache_capacity >= 1, "cache_capacity must be >= 1"),
            (self.mixup_reduction in ("mixed", "outside"), "mixup reduction must be 'mixed' or 'outside'"),
            (self.knn_gate in ("model", "none"), "knn gate must be 'model' or 'none'"),
            (self.clip_norm > 0, "clip_norm must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_type: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def score_spans(gold: Sequence[Iterable[EntitySpan]], predicted: Sequence[Iterable[EntitySpan]]) -> EvalResult:
    """Micro-averaged exact-match P/R/F1 (percent) with a per-type breakdown."""
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted corpora differ in length")
    counts: dict[str, list[int]] = {}
    for g, p in zip(gold, predicted):
        g, p = set(g), set(p)
        for span in g | p:
            c = counts.setdefault(span.label, [0, 0, 0])
            if span in g and span in p:
                c[0] += 1
            elif span in p:
                c[1] += 1
            else:
                c[2] += 1
    per_type = {}
    for label in sorted(counts):
        tp, fp, fn = counts[label]
        p_, r_, f_ = _prf(tp, fp, fn)
        per_type[label] = {"precision": p_, "recall": r_, "f1": f_, "tp": tp, "fp": fp, "fn": fn, "support": tp + fn}
    tp = sum(c[0] for c in counts.values())
    fp = sum(c[1] for c in counts.values())
    fn = sum(c[2] for c in counts.values())
    p_, r_, f_ = _prf(tp, fp, fn)
    return EvalResult(p_, r_, f_, tp, fp, fn, per_type)


# ---------------------------------------------------------------------------
# Decoding


def greedy_decode(spans: Sequence[tuple[int, int]], o_final: np.ndarray, labels: Sequence[str],
                  entity_gate: np.ndarray | None = None) -> list[EntitySpan]:
    """Pick non-overlapping entity spans, most confident first.

    A span is a candidate when the argmax of its row in ``o_final`` is an
    entity label; with ``entity_gate`` given, candidacy comes from the gate
    and the label from the best entity column instead.
    """
    o_final = np.asarray(o_final, dtype=np.float64)
    out_idx = list(labels).index(OUTSIDE)
    if entity_gate is None:
        best = o_final.argmax(axis=1)
        cand = np.flatnonzero(best != out_idx)
    else:
        masked = o_final.copy()
        masked[:, out_idx] = -np.inf
        best = masked.argmax(axis=1)
        cand = np.flatnonzero(entity_gate)
    scores = o_final[np.arange(len(best)), best]
    order = sorted(cand.tolist(), key=lambda k: (-scores[k], spans[k][0], spans[k][1]))
    taken = np.zeros(max((e for _, e in spans), default=0) + 2, dtype=bool)
    chosen = []
    for k in order:
        i, j = spans[k]
        if taken[i:j + 1].any():
            continue
        taken[i:j + 1] = True
        chosen.append(EntitySpan(i, j, labels[best[k]]))
    return sorted(chosen)


def predict(model: SpanNER, sentences: Sequence[Sentence], datastore: DataStore | None = None,
            mu: float = 0.0, k: int = 64, max_len: int = 10, gate: str = "model",
            batch_size: int = 64) -> list[list[EntitySpan]]:
    """Decode every sentence; KNN interpolation applies only with a datastore and mu > 0."""
    use_knn = datastore is not None and mu > 0
    if use_knn:
        datastore.check_model(model)
    results: list[list[EntitySpan]] = []
    for b in range(0, len(sentences), batch_size):
        chunk = list(sentences[b:b + batch_size])
        spans = [enumerate_spans(s, max_len) for s in chunk]
        r, o = model.spans_for(chunk, spans)
        o = o.double().numpy()
        o_final = o
        if use_knn:
            model_entity = o.argmax(axis=1) != model.outside_index
            query = model_entity if gate == "model" else np.ones(len(o), dtype=bool)
            o_final = o.copy()
            if query.any():
                voted = knn_vote_batch(datastore, r.double().numpy()[query], k)
                o_knn = np.zeros((len(voted), o.shape[1]))
                o_knn[np.arange(len(voted)), voted] = 1.0
                o_final[query] = interpolate_distribution(o[query], o_knn, mu)
        offset = 0
        for sent_spans in spans:
            rows = slice(offset, offset + len(sent_spans))
            offset += len(sent_spans)
            gate_rows = None
            if use_knn and gate == "model":
                gate_rows = o[rows].argmax(axis=1) != model.outside_index
            results.append(greedy_decode(sent_spans, o_final[rows], model.labels, gate_rows))
    return results


def decode(model: SpanNER, sentence: Sentence, datastore: DataStore | None = None, mu: float = 0.0,
           max_len: int = 10, k: int = 64, gate: str = "model") -> list[EntitySpan]:
    return predict(model, [sentence], datastore, mu, k, max_len, gate)[0]


def evaluate(model: SpanNER, corpus: Sequence[Sentence], datastore: DataStore | None = None,
             cfg: RunConfig | None = None) -> EvalResult:
    cfg = cfg or RunConfig()
    if not corpus or any(s.gold_spans is None for s in corpus):
        raise ValueError("evaluation corpus needs gold annotations")
    mu = cfg.mu if datastore is not None else 0.0
    pred = predict(model, corpus, datastore, mu, cfg.k, cfg.max_span_len, cfg.knn_gate)
    return score_spans([s.gold_spans for s in corpus], pred)


# ---------------------------------------------------------------------------
# Training


@dataclass
class _Featurized:
    starts: np.ndarray
    ends: np.ndarray
    labels: np.ndarray


def featurize(sentences: Sequence[Sentence], labels: Sequence[str], max_len: int) -> list[_Featurized]:
    """Enumerated spans (0-based) with their distant label index; unmatched spans are O."""
    index = {lab: i for i, lab in enumerate(labels)}
    out = []
    for sent in sentences:
        spans = enumerate_spans(sent, max_len)
        lookup = {(s.start, s.end): index[s.label] for s in sent.distant_spans or ()}
        lab = np.array([lookup.get(sp, 0) for sp in spans], dtype=np.int64)
        arr = np.asarray(spans, dtype=np.int64) - 1
        out.append(_Featurized(arr[:, 0], arr[:, 1], lab))
    return out


def route_spans(span_labels: torch.Tensor, outside_index: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Masks of spans trained on the entity path and on the non-entity path."""
    entity = span_labels != outside_index
    return entity, ~entity


@dataclass
class TrainResult:
    model: SpanNER
    memory: SoftLabelMemory
    metrics: list[dict]
    best_epoch: int
    best_dev_f1: float | None


def _collate(feats: Sequence[_Featurized]):
    b_idx = np.concatenate([np.full(len(f.labels), b) for b, f in enumerate(feats)])
    return (torch.from_numpy(b_idx), torch.from_numpy(np.concatenate([f.starts for f in feats])),
            torch.from_numpy(np.concatenate([f.ends for f in feats])),
            torch.from_numpy(np.concatenate([f.labels for f in feats])))


def batch_loss(model: SpanNER, cfg: RunConfig, sentences, feats, memory_targets: torch.Tensor | None,
               cache: EntityCache | None, rng: np.random.Generator):
    """Forward one batch and return ``(total, parts, extras)``."""
    b_idx, starts, ends, y = _collate(feats)
    r, logits = model(sentences, b_idx, starts, ends)
    zero = logits.new_zeros(())
    parts = {"mfl": zero, "cl": zero, "gce_sr": zero, "mix": zero, "ce": zero}
    extras: dict = {"mixup": {"selected": 0, "skipped": 0, "mixed": 0}}
    if cfg.objective == "ce":
        parts["ce"] = F.cross_entropy(logits, y)
        return parts["ce"], parts, extras

    o = torch.softmax(logits, dim=-1)
    ent, out = route_spans(y, model.outside_index)
    extras["entity_y"] = y[ent]
    extras["entity_o"] = o[ent].detach()
    if ent.any():
        parts["mfl"] = mfl_loss(o[ent], memory_targets[y[ent]], cfg.alpha, cfg.gamma).mean()
        if cfg.eta < 1.0:
            parts["cl"] = entity_cl_loss(r[ent], y[ent], cfg.tau, cfg.cl_denominator, reduction="mean")
    if cfg.epsilon > 0 and cache is not None and ent.any():
        cache.add(r[ent], y[ent].tolist())
    if out.any():
        n_out = int(out.sum())
        gce = gce_sr_loss(o[out], model.outside_index, cfg.q, cfg.p, cfg.sr_weight)
        if cfg.epsilon > 0 and cache is not None:
            r_hat, y_hat, stats, rows = boundary_mixup(
                r[out], o[out], torch.ones(n_out, dtype=torch.bool), cache, model.outside_index,
                cfg.epsilon, cfg.alpha_prime, rng, return_rows=True)
            extras["mixup"] = stats
            if rows:
                if cfg.mixup_replace:
                    keep = torch.ones(n_out, dtype=torch.bool)
                    keep[rows] = False
                    gce = gce[keep]
                mix = soft_cross_entropy(model.logits(r_hat), y_hat)
                parts["mix"] = mix.mean() if cfg.mixup_reduction == "mixed" else mix.sum() / n_out
        parts["gce_sr"] = gce.sum() / n_out
    total = combine_losses(parts["mfl"], parts["cl"], parts["gce_sr"], parts["mix"], cfg.eta, cfg.mixup_weight)
    return total, parts, extras


def collect_labels(*corpora: Iterable[Sentence]) -> list[str]:
    types = set()
    for corpus in corpora:
        for sent in corpus or ():
            for layer in (sent.gold_spans, sent.distant_spans):
                types.update(s.label for s in layer or ())
    return [OUTSIDE] + sorted(types)


def train(cfg: RunConfig, train_corpus: Sequence[Sentence], dev_corpus: Sequence[Sentence] | None = None,
          labels: Sequence[str] | None = None, metrics_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a span model on distant labels and keep the epoch with the best dev F1.

    Dev F1 is computed without KNN interpolation. Without a dev corpus the
    last epoch is kept.
    """
    cfg.validate()
    if not train_corpus:
        raise TrainingError("training corpus is empty")
    if any(s.distant_spans is None for s in train_corpus):
        raise TrainingError("training sentences need a distant annotation layer")
    n_entities = sum(len(s.distant_spans) for s in train_corpus)
    if n_entities == 0:
        raise TrainingError("training corpus has no distant entity spans")
    labels = list(labels) if labels is not None else collect_labels(train_corpus, dev_corpus)
    for sent in train_corpus:
        for span in sent.distant_spans:
            if span.label not in labels:
                raise TrainingError(f"distant label {span.label!r} missing from label set {labels}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    encoder_cfg = copy.deepcopy(cfg.encoder)
    encoder_cfg.seed = cfg.seed
    model = SpanNER(labels, Vocab.build(train_corpus), encoder_cfg, cfg.rep_dim, cfg.bias)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    memory = SoftLabelMemory(labels, cfg.G, cfg.lam)
    cache = EntityCache(len(labels), cfg.cache_capacity)
    feats = featurize(train_corpus, labels, cfg.max_span_len)

    metrics: list[dict] = []
    best_state, best_f1, best_epoch = None, None, cfg.epochs
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            targets = torch.from_numpy(memory.targets(epoch)).float()
            order = rng.permutation(len(train_corpus))
            sums = {"total": 0.0, "mfl": 0.0, "cl": 0.0, "gce_sr": 0.0, "mix": 0.0, "ce": 0.0}
            mix_stats = {"selected": 0, "skipped": 0, "mixed": 0}
            ent_y, ent_o = [], []
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = [train_corpus[i] for i in idx]
                total, parts, extras = batch_loss(model, cfg, batch, [feats[i] for i in idx], targets, cache, rng)
                if not torch.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        + ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items()))
                optimizer.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                optimizer.step()
                n_batches += 1
                sums["total"] += total.item()
                for key, val in parts.items():
                    sums[key] += val.item()
                for key in mix_stats:
                    mix_stats[key] += extras["mixup"][key]
                if "entity_y" in extras:
                    ent_y.append(extras["entity_y"].numpy())
                    ent_o.append(extras["entity_o"].double().numpy())
            if ent_y:
                memory.update_arrays(np.concatenate(ent_y), np.concatenate(ent_o))
            else:
                memory.update([])
            row_sums = memory.current.sum(axis=1)
            if not np.allclose(row_sums, 1.0, atol=1e-6) or (memory.current < 0).any():
                raise TrainingError(f"soft-label memory rows are not distributions after epoch {epoch}")

            record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "mixup": mix_stats}
            if dev_corpus:
                model.eval()
                res = evaluate(model, dev_corpus, None, cfg)
                model.train()
                record.update(dev_precision=res.precision, dev_recall=res.recall, dev_f1=res.f1)
                if best_f1 is None or res.f1 > best_f1:
                    best_f1, best_epoch = res.f1, epoch
                    best_state = copy.deepcopy(model.state_dict())
            metrics.append(record)
            logger.info("epoch %d (%.1fs): %s", epoch, time.perf_counter() - t0, json.dumps(record))
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(record)
    finally:
        if sink:
            sink.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, memory, metrics, best_epoch, best_f1)
