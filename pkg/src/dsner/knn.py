"""KNN-augmented inference over cached training entity representations."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Sentence
from .errors import DataStoreError
from .model import SpanNER

MAGIC = b"DSNRKNN\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIQI")  # magic, version, d_r, count, label-json length


@dataclass
class DataStore:
    keys: np.ndarray  # [N, d_r] float32
    values: np.ndarray  # [N] int32, indices into ``labels``
    labels: list[str]
    checkpoint_hash: str

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        self.values = np.ascontiguousarray(self.values, dtype=np.int32)
        if self.keys.ndim != 2 or len(self.keys) != len(self.values):
            raise DataStoreError("keys and values must be parallel arrays")
        if len(self.values) and (self.values.min() < 1 or self.values.max() >= len(self.labels)):
            raise DataStoreError("datastore values must be entity label indices")
        self._unit = None

    def __len__(self):
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @property
    def unit_keys(self) -> np.ndarray:
        if self._unit is None:
            k = self.keys.astype(np.float64)
            norms = np.linalg.norm(k, axis=1, keepdims=True)
            self._unit = k / np.where(norms == 0, 1.0, norms)
        return self._unit

    def check_model(self, model: SpanNER) -> None:
        if model.labels != self.labels:
            raise DataStoreError(f"label set mismatch: datastore {self.labels}, model {model.labels}")
        if model.rep_dim != self.dim:
            raise DataStoreError(f"dimension mismatch: datastore {self.dim}, model {model.rep_dim}")
        fp = model.fingerprint()
        if fp != self.checkpoint_hash:
            raise DataStoreError(
                f"datastore was built with checkpoint {self.checkpoint_hash[:12]}, model is {fp[:12]}")


def build_datastore(model: SpanNER, corpus: Sequence[Sentence], batch_size: int = 64) -> DataStore:
    """Cache one (representation, distant label) pair per distant entity span."""
    keys, values = [], []
    for b in range(0, len(corpus), batch_size):
        chunk = [s for s in corpus[b:b + batch_size] if s.distant_spans]
        if not chunk:
            continue
        spans = [[(sp.start, sp.end) for sp in s.distant_spans] for s in chunk]
        r, _ = model.spans_for(chunk, spans)
        keys.append(r.double().numpy())
        values.extend(model.label_index(sp.label) for s in chunk for sp in s.distant_spans)
    if not values:
        raise DataStoreError("corpus has no distant entity spans; datastore would be empty")
    return DataStore(np.concatenate(keys), np.asarray(values), list(model.labels), model.fingerprint())


def _top_k(sims: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest similarities; equal values go to the lower index."""
    n = len(sims)
    if k >= n:
        return np.argsort(-sims, kind="stable")
    part = np.argpartition(-sims, k - 1)[:k]
    cut = sims[part].min()
    above = np.flatnonzero(sims > cut)
    at = np.flatnonzero(sims == cut)[: k - len(above)]
    chosen = np.concatenate([above, at])
    return chosen[np.lexsort((chosen, -sims[chosen]))]


def _vote(labels_k: np.ndarray, sims_k: np.ndarray, num_labels: int) -> int:
    counts = np.bincount(labels_k, minlength=num_labels)
    best = np.flatnonzero(counts == counts.max())
    if len(best) == 1:
        return int(best[0])
    sums = np.bincount(labels_k, weights=sims_k, minlength=num_labels)
    top = sums[best].max()
    return int(best[sums[best] == top][0])


def knn_vote_batch(ds: DataStore, queries: np.ndarray, k: int) -> np.ndarray:
    """Voted label index for each row of ``queries``."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if len(ds) == 0:
        raise DataStoreError("datastore is empty")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != ds.dim:
        raise ValueError(f"query has dim {queries.shape[1]}, datastore keys have {ds.dim}")
    norms = np.linalg.norm(queries, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm query representation")
    k = min(k, len(ds))
    unit = ds.unit_keys
    out = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), 1024):
        q = queries[start:start + 1024] / norms[start:start + 1024, None]
        sims = q @ unit.T
        for row in range(len(q)):
            idx = _top_k(sims[row], k)
            out[start + row] = _vote(ds.values[idx], sims[row, idx], len(ds.labels))
    return out


def knn_vote(ds: DataStore, r, k: int) -> tuple[int, np.ndarray]:
    """Majority label among the ``k`` most cosine-similar entries, and its one-hot."""
    y = int(knn_vote_batch(ds, np.asarray(r, dtype=np.float64)[None, :], k)[0])
    o = np.zeros(len(ds.labels))
    o[y] = 1.0
    return y, o


def interpolate_distribution(o_model, o_knn, mu: float) -> np.ndarray:
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    return (1.0 - mu) * np.asarray(o_model, dtype=np.float64) + mu * np.asarray(o_knn, dtype=np.float64)


# ---------------------------------------------------------------------------
# Persistence


def save_datastore(ds: DataStore, path) -> None:
    """Binary layout: header, label-set JSON, 64-byte hex checkpoint hash,
    little-endian float32 keys (row-major), little-endian int32 label indices."""
    labels = json.dumps(ds.labels).encode("utf-8")
    digest = ds.checkpoint_hash.encode("ascii")
    if len(digest) != 64:
        raise DataStoreError("checkpoint hash must be a 64-character hex digest")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, ds.dim, len(ds), len(labels)))
        f.write(labels)
        f.write(digest)
        f.write(ds.keys.astype("<f4").tobytes())
        f.write(ds.values.astype("<i4").tobytes())


def load_datastore(path) -> DataStore:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise DataStoreError(f"{path} is not a datastore file")
    magic, version, dim, count, label_len = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DataStoreError(f"unsupported datastore version {version}")
    pos = _HEADER.size
    labels = json.loads(raw[pos:pos + label_len].decode("utf-8"))
    pos += label_len
    digest = raw[pos:pos + 64].decode("ascii")
    pos += 64
    expected = pos + 4 * count * dim + 4 * count
    if len(raw) != expected:
        raise DataStoreError(f"{path}: expected {expected} bytes, found {len(raw)}")
    keys = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    pos += 4 * count * dim
    values = np.frombuffer(raw, dtype="<i4", count=count, offset=pos)
    return DataStore(keys.astype(np.float32), values.astype(np.int32), labels, digest)
