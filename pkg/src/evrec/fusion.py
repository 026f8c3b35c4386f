"""Late-fusion strategies over a sequence of per-step opinions.

``evidential`` combines the opinions with Dempster's rule, so a step with
high uncertainty barely moves the result. The others ignore uncertainty and
serve as ablations:

- ``max``: the single step holding the largest class belief decides
- ``last``: the final step decides
- ``average``: mean belief vector across steps
- ``vote``: plurality of per-step top classes; a tie goes to the class that
  won earliest. Classes level on both (including those with no votes) are
  ranked by mean belief, then class index

A vacuous step (no belief mass at all) has no top class and casts no vote.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .opinion import Opinion, fuse_running, rank_classes

KINDS = ("evidential", "max", "last", "average", "vote")
ALIASES = {
    "evidential": "evidential", "ours": "evidential",
    "max": "max", "maxprediction": "max", "max-prediction": "max",
    "last": "last", "laststep": "last", "last-step": "last",
    "average": "average", "avg": "average", "mean": "average",
    "vote": "vote",
}


def canonical(kind: str) -> str:
    try:
        return ALIASES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown fusion strategy {kind!r}; choose from {KINDS}") from None


@dataclass(frozen=True)
class FusionResult:
    ranking: tuple
    opinion: Optional[Opinion]

    @property
    def prediction(self) -> int:
        return self.ranking[0]


def fuse_batch(kind: str, beliefs, uncertainty):
    """Apply a strategy to a batch of sequences.

    ``beliefs`` is (N, T, K) and ``uncertainty`` (N, T). Returns the full
    class ranking (N, K) plus the fused beliefs (N, K) and uncertainty (N,)
    of the opinion the strategy settles on.
    """
    kind = canonical(kind)
    b = np.asarray(beliefs, dtype=float)
    u = np.asarray(uncertainty, dtype=float)
    n, T, K = b.shape
    rows = np.arange(n)
    if kind == "evidential":
        fb, fu = fuse_running(b, u)
        fb, fu = fb[:, -1], fu[:, -1]
        return rank_classes(fb), fb, fu
    if kind == "last":
        return rank_classes(b[:, -1]), b[:, -1], u[:, -1]
    if kind == "average":
        fb, fu = b.mean(axis=1), u.mean(axis=1)
        return rank_classes(fb), fb, fu
    if kind == "max":
        # first step (in time) holding the largest single belief
        step = np.argmax(b.max(axis=2), axis=1)
        return rank_classes(b[rows, step]), b[rows, step], u[rows, step]
    # vote
    winners = rank_classes(b)[:, :, 0]                     # (N, T)
    casts = b.max(axis=2) > 0.0
    votes = np.zeros((n, K), dtype=int)
    first = np.full((n, K), T, dtype=int)
    for t in range(T):
        r = rows[casts[:, t]]
        w = winners[r, t]
        votes[r, w] += 1
        first[r, w] = np.minimum(first[r, w], t)
    cls = np.broadcast_to(np.arange(K), (n, K))
    order = np.lexsort((cls, -b.mean(axis=1), first, -votes), axis=-1)
    step = np.minimum(first[rows, order[:, 0]], T - 1)
    return order, b[rows, step], u[rows, step]


def fuse_strategy(kind: str, opinions: Sequence[Opinion]) -> FusionResult:
    """Fuse one episode's opinions and return the class ranking.

    The fused opinion is the Dempster combination for ``evidential``, the
    mean opinion for ``average``, and the deciding step's opinion otherwise.
    """
    if not opinions:
        raise ValueError("need at least one opinion")
    b = np.array([[op.beliefs for op in opinions]])
    u = np.array([[op.uncertainty for op in opinions]])
    ranking, fb, fu = fuse_batch(kind, b, u)
    return FusionResult(tuple(int(i) for i in ranking[0]), Opinion(tuple(fb[0]), float(fu[0])))


def prefix_success(kind: str, beliefs, uncertainty, labels, topk=1):
    """Success of the strategy applied to steps 1..t, for every t. Returns (T,)."""
    kind = canonical(kind)
    b = np.asarray(beliefs, dtype=float)
    u = np.asarray(uncertainty, dtype=float)
    labels = np.asarray(labels)
    T = b.shape[1]
    if kind == "evidential":
        fb, _ = fuse_running(b, u)
        ranks = rank_classes(fb)[:, :, :topk]
        return (ranks == labels[:, None, None]).any(axis=2).mean(axis=0)
    out = np.empty(T)
    for t in range(T):
        ranking, _, _ = fuse_batch(kind, b[:, :t + 1], u[:, :t + 1])
        out[t] = (ranking[:, :topk] == labels[:, None]).any(axis=1).mean()
    return out
