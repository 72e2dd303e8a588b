"""Training objectives.

Entity-labelled spans are trained with a focal loss against memory-smoothed
targets plus a same-type contrastive loss; spans labelled as non-entities
get generalized cross entropy with a sparse p-norm regulariser.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import OUTSIDE

PROB_FLOOR = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class LossWeights:
    eta: float = 0.9
    alpha: float = 0.5
    gamma: float = 2.0
    tau: float = 0.05
    q: float = 0.3
    p: float = 0.5

    def validate(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")


# ---------------------------------------------------------------------------
# Memory label smoothing


class SoftLabelMemory:
    """Per-epoch soft-label matrices.

    ``history[k]`` is the matrix produced at the end of epoch k (1-based);
    ``history[0]`` is the identity. Row y holds the mean predicted
    distribution of spans with distant label y that the model got right.
    """

    def __init__(self, labels: Sequence[str], window: int = 1, lam: float = 0.8, outside: str = OUTSIDE):
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {lam}")
        self.labels = list(labels)
        self.outside_index = self.labels.index(outside) if outside in self.labels else None
        self.window = window
        self.lam = lam
        self.history: list[np.ndarray] = [np.eye(len(self.labels))]

    @property
    def current(self) -> np.ndarray:
        return self.history[-1]

    def _index(self, y) -> int:
        return self.labels.index(y) if isinstance(y, str) else int(y)

    def update(self, predictions: Iterable[tuple[object, Sequence[float], bool]]) -> np.ndarray:
        L = len(self.labels)
        sums = np.zeros((L, L))
        counts = np.zeros(L)
        for y, o, correct in predictions:
            if correct:
                k = self._index(y)
                sums[k] += np.asarray(o, dtype=np.float64)
                counts[k] += 1
        return self._append(sums, counts)

    def update_arrays(self, y: np.ndarray, o: np.ndarray) -> np.ndarray:
        """Vectorised update; correctness is argmax(o) == y."""
        L = len(self.labels)
        y = np.asarray(y, dtype=np.int64)
        o = np.asarray(o, dtype=np.float64)
        correct = o.argmax(axis=1) == y if len(y) else np.zeros(0, bool)
        sums = np.zeros((L, L))
        np.add.at(sums, y[correct], o[correct])
        counts = np.bincount(y[correct], minlength=L).astype(np.float64)
        return self._append(sums, counts)

    def _append(self, sums, counts) -> np.ndarray:
        new = self.current.copy()
        seen = counts > 0
        if self.outside_index is not None:
            seen[self.outside_index] = False
        new[seen] = sums[seen] / counts[seen, None]
        self.history.append(new)
        return new

    def smoothed_target(self, y, t: int | None = None) -> np.ndarray:
        """Target distribution for an entity of label ``y`` during epoch ``t`` (1-based).

        ``t`` defaults to the epoch following the latest update. Fewer than
        ``window`` earlier matrices are averaged when that is all there is.
        """
        k = self._index(y)
        if k == self.outside_index:
            raise ValueError(f"label {y!r} is the non-entity label; smoothed targets apply to entities only")
        return self.targets(t)[k]

    def targets(self, t: int | None = None) -> np.ndarray:
        """All smoothed target rows for epoch ``t`` as an ``[L, L]`` matrix."""
        if t is None:
            t = len(self.history)
        if not 1 <= t <= len(self.history):
            raise ValueError(f"epoch {t} needs matrices up to {t - 1}, have {len(self.history) - 1}")
        g = min(self.window, t)
        soft = np.mean([self.history[t - k] for k in range(1, g + 1)], axis=0)
        return self.lam * np.eye(len(self.labels)) + (1.0 - self.lam) * soft

    def to_json(self) -> dict:
        return {"labels": self.labels, "window": self.window, "lambda": self.lam,
                "history": [m.tolist() for m in self.history]}


def update_memory(mem: SoftLabelMemory, epoch_predictions) -> np.ndarray:
    return mem.update(epoch_predictions)


def smoothed_target(mem: SoftLabelMemory, y, t: int | None = None) -> np.ndarray:
    return mem.smoothed_target(y, t)


# ---------------------------------------------------------------------------
# Loss terms


def mfl_loss(o, target, alpha: float, gamma: float) -> torch.Tensor:
    """Focal loss against a soft target; one value per distribution row."""
    o = _as_tensor(o)
    target = _as_tensor(target).to(o.dtype)
    o = o.clamp(min=PROB_FLOOR, max=1.0)
    return -(alpha * target * (1.0 - o).pow(gamma) * torch.log(o)).sum(dim=-1)


def entity_cl_loss(reps, labels, tau: float, denominator: str = "all", reduction: str = "sum") -> torch.Tensor:
    """Supervised contrastive loss over entity-span representations.

    For every anchor whose label occurs at least twice, the loss is the mean
    over same-label partners of ``-log softmax`` of cosine similarity / tau,
    normalised over every other span (``denominator="all"``) or over the
    spans of other labels only (``"different-label"``).
    """
    if denominator not in ("all", "different-label"):
        raise ValueError(f"unknown denominator mode {denominator!r}")
    reps = _as_tensor(reps)
    labels = torch.as_tensor(labels)
    n = reps.shape[0]
    if n == 0:
        return reps.new_zeros(())
    norms = reps.norm(dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm representation in contrastive batch")
    unit = reps / norms[:, None]
    sim = unit @ unit.T / tau
    eye = torch.eye(n, dtype=torch.bool, device=reps.device)
    same = labels[:, None] == labels[None, :]
    pos = same & ~eye
    denom_mask = ~eye if denominator == "all" else ~same
    neg_inf = torch.finfo(sim.dtype).min
    log_denom = torch.logsumexp(sim.masked_fill(~denom_mask, neg_inf), dim=1)
    n_pos = pos.sum(dim=1)
    active = (n_pos > 0) & denom_mask.any(dim=1)
    if not bool(active.any()):
        return reps.new_zeros(())
    per_pair = (log_denom[:, None] - sim) * pos
    per_anchor = per_pair.sum(dim=1)[active] / n_pos[active]
    return per_anchor.sum() if reduction == "sum" else per_anchor.mean()


def gce_sr_loss(o, outside_index: int, q: float, p: float, sr_weight: float = 1.0) -> torch.Tensor:
    """Generalized cross entropy toward the non-entity label plus ``sum_l o_l^p``."""
    o = _as_tensor(o).clamp(min=PROB_FLOOR, max=1.0)
    gce = (1.0 - o[..., outside_index].pow(q)) / q
    return gce + sr_weight * o.pow(p).sum(dim=-1)


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1)


def combine_losses(mfl, cl, gce_sr, mix, eta: float, mix_weight: float = 1.0):
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    return eta * mfl + (1.0 - eta) * cl + gce_sr + mix_weight * mix
