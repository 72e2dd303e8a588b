"""Boundary mixup.

Spans distant-labelled as non-entities that the model also predicts as
non-entities, but with low confidence, are treated as sitting near the
decision boundary. Each is mixed with a cached representation of the
entity type the model found most likely, producing a soft-labelled
instance that still leans toward the non-entity side.
"""
from __future__ import annotations

from collections import deque
from typing import Sequence

import numpy as np
import torch

from .corpus import OUTSIDE
from .losses import soft_cross_entropy
from .model import SpanCandidate


class EntityCache:
    """Bounded FIFO of detached entity representations per label index."""

    def __init__(self, num_labels: int, capacity: int = 256):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self._store = {k: deque(maxlen=capacity) for k in range(num_labels)}

    def add(self, reps: torch.Tensor, labels: Sequence[int]) -> None:
        reps = reps.detach()
        for r, y in zip(reps, labels):
            self._store[int(y)].append(r.clone())

    def __len__(self):
        return sum(len(q) for q in self._store.values())

    def size(self, label: int) -> int:
        return len(self._store[label])

    def sample(self, label: int, rng: np.random.Generator) -> torch.Tensor | None:
        q = self._store[label]
        if not q:
            return None
        return q[int(rng.integers(len(q)))]


def boundary_mask(o: torch.Tensor, distant_outside: torch.Tensor, outside_index: int, epsilon: float) -> torch.Tensor:
    """Spans labelled O, predicted O, with O-probability below ``epsilon``."""
    predicted_outside = o.argmax(dim=-1) == outside_index
    return distant_outside & predicted_outside & (o[:, outside_index] < epsilon)


def likely_entity(o: torch.Tensor, outside_index: int) -> torch.Tensor:
    """Index of the most probable entity label for each row of ``o``."""
    masked = o.clone()
    masked[:, outside_index] = -1.0
    return masked.argmax(dim=-1)


def select_boundary_spans(batch: Sequence[SpanCandidate], epsilon: float, labels: Sequence[str]) -> list[SpanCandidate]:
    outside_index = list(labels).index(OUTSIDE)
    picked = []
    for cand in batch:
        if cand.assigned_label != OUTSIDE or cand.o is None:
            continue
        o = torch.as_tensor(cand.o)
        if int(o.argmax()) == outside_index and float(o[outside_index]) < epsilon:
            picked.append(cand)
    return picked


def draw_theta(alpha_prime: float, rng: np.random.Generator, size=None):
    if alpha_prime <= 0:
        raise ValueError(f"alpha_prime must be > 0, got {alpha_prime}")
    theta = rng.beta(alpha_prime, alpha_prime, size=size)
    return np.maximum(theta, 1.0 - theta)


def mix_instance(r_span, outside_index: int, r_entity, entity_index: int, num_labels: int,
                 alpha_prime: float = 0.2, rng: np.random.Generator | None = None, theta: float | None = None):
    """Return ``(r_hat, y_hat)``; ``theta`` overrides the Beta draw when given."""
    if theta is None:
        theta = float(draw_theta(alpha_prime, rng or np.random.default_rng()))
    r_span = torch.as_tensor(r_span)
    r_entity = torch.as_tensor(r_entity, dtype=r_span.dtype)
    r_hat = theta * r_span + (1.0 - theta) * r_entity
    y_hat = torch.zeros(num_labels, dtype=r_span.dtype)
    y_hat[outside_index] += theta
    y_hat[entity_index] += 1.0 - theta
    return r_hat, y_hat


def mixup_loss(r_hat: torch.Tensor, y_hat: torch.Tensor, logits_fn) -> torch.Tensor:
    """Mean soft cross entropy of ``logits_fn(r_hat)`` against ``y_hat``; zero when empty."""
    if r_hat.shape[0] == 0:
        return r_hat.new_zeros(())
    return soft_cross_entropy(logits_fn(r_hat), y_hat).mean()


def boundary_mixup(
    r: torch.Tensor,
    o: torch.Tensor,
    distant_outside: torch.Tensor,
    cache: EntityCache,
    outside_index: int,
    epsilon: float,
    alpha_prime: float,
    rng: np.random.Generator,
    return_rows: bool = False,
):
    """Build mixed instances for one batch.

    Returns ``(r_hat, y_hat, stats)`` where ``stats`` counts selected and
    skipped (empty cache) spans. Gradients flow through ``r``; cached
    partners are constants.
    """
    num_labels = o.shape[1]
    sel = torch.nonzero(boundary_mask(o.detach(), distant_outside, outside_index, epsilon)).flatten()
    stats = {"selected": int(sel.numel()), "skipped": 0, "mixed": 0}
    empty = (r.new_zeros(0, r.shape[1]), r.new_zeros(0, num_labels), stats)
    if sel.numel() == 0:
        return empty + ([],) if return_rows else empty
    targets = likely_entity(o.detach()[sel], outside_index).tolist()
    thetas = draw_theta(alpha_prime, rng, size=len(targets))
    rows, partners, keep_theta, ent = [], [], [], []
    for k, (idx, lab) in enumerate(zip(sel.tolist(), targets)):
        partner = cache.sample(lab, rng)
        if partner is None:
            stats["skipped"] += 1
            continue
        rows.append(idx)
        partners.append(partner)
        keep_theta.append(thetas[k])
        ent.append(lab)
    stats["mixed"] = len(rows)
    if not rows:
        return empty + ([],) if return_rows else empty
    theta = torch.as_tensor(np.asarray(keep_theta), dtype=r.dtype, device=r.device)[:, None]
    r_hat = theta * r[rows] + (1.0 - theta) * torch.stack(partners).to(r.dtype)
    y_hat = r.new_zeros(len(rows), num_labels)
    y_hat[:, outside_index] = theta[:, 0]
    y_hat[torch.arange(len(rows)), torch.as_tensor(ent)] += 1.0 - theta[:, 0]
    if return_rows:
        return r_hat, y_hat, stats, rows
    return r_hat, y_hat, stats
