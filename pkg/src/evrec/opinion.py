"""Subjective-logic opinions over a K-class frame.

An opinion carries one belief mass per class plus a single uncertainty mass
that stands in for every non-singleton proposition. Opinions are built from
non-negative Dirichlet evidence and combined with Dempster's rule restricted
to the singleton+frame mass class, which has a closed form.

The full-powerset version of Dempster's rule (``brute_force_dempster``) is
kept alongside as an independent check of the closed form.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySequence,
    FrameTooLarge,
    InvalidEvidence,
    OpinionError,
    TotalConflict,
    ZeroUncertainty,
)

NORM_TOL = 1e-12
CONFLICT_TOL = 1e-12
DOGMATIC_TOL = 1e-15
MAX_FRAME = 12


@dataclass(frozen=True)
class Opinion:
    """K singleton belief masses and one uncertainty mass summing to 1."""

    beliefs: tuple[float, ...]
    uncertainty: float

    def __post_init__(self):
        b = tuple(float(x) for x in self.beliefs)
        u = float(self.uncertainty)
        object.__setattr__(self, "beliefs", b)
        object.__setattr__(self, "uncertainty", u)
        if len(b) < 2:
            raise OpinionError(f"need at least 2 classes, got {len(b)}")
        masses = b + (u,)
        if not all(math.isfinite(m) for m in masses):
            raise OpinionError("non-finite mass")
        if min(masses) < -NORM_TOL or max(masses) > 1.0 + NORM_TOL:
            raise OpinionError(f"mass outside [0, 1]: {masses}")
        total = math.fsum(masses)
        if abs(total - 1.0) > NORM_TOL:
            raise OpinionError(f"masses sum to {total!r}, expected 1")

    @property
    def class_count(self) -> int:
        return len(self.beliefs)

    @classmethod
    def vacuous(cls, k: int) -> "Opinion":
        return cls((0.0,) * k, 1.0)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.beliefs, dtype=float)

    def to_record(self) -> dict:
        return {"k": self.class_count, "beliefs": list(self.beliefs), "uncertainty": self.uncertainty}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Opinion":
        op = cls(tuple(rec["beliefs"]), rec["uncertainty"])
        if int(rec["k"]) != op.class_count:
            raise OpinionError(f"record k={rec['k']} but {op.class_count} beliefs")
        return op


# ---------------------------------------------------------------------------
# evidence <-> opinion
# ---------------------------------------------------------------------------

def beliefs_from_evidence(evidence: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form of :func:`opinion_from_evidence`.

    ``evidence`` has shape (..., K). Returns beliefs (..., K) and
    uncertainty (...).
    """
    e = np.asarray(evidence, dtype=float)
    k = e.shape[-1]
    strength = e.sum(axis=-1) + k
    return e / strength[..., None], k / strength


def opinion_from_evidence(evidence: Sequence[float]) -> Opinion:
    e = np.asarray(evidence, dtype=float)
    if e.ndim != 1:
        raise InvalidEvidence(f"evidence must be 1-D, got shape {e.shape}")
    if e.shape[0] < 2:
        raise InvalidEvidence("need at least 2 classes")
    if not np.all(np.isfinite(e)):
        raise InvalidEvidence("non-finite evidence")
    if np.any(e < 0):
        raise InvalidEvidence("negative evidence")
    b, u = beliefs_from_evidence(e)
    return Opinion(tuple(b), float(u))


def evidence_from_opinion(op: Opinion) -> np.ndarray:
    """Invert ``opinion_from_evidence``: e_k = K b_k / u."""
    if op.uncertainty <= DOGMATIC_TOL:
        raise ZeroUncertainty(f"uncertainty {op.uncertainty!r} too small to invert")
    return op.class_count * op.as_array() / op.uncertainty


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------

def conflict(a: Opinion, b: Opinion) -> float:
    """Pairwise singleton conflict sum_{i != q} b_i^a b_q^b."""
    _check_same_frame(a, b)
    ba, bb = a.as_array(), b.as_array()
    return float(ba.sum() * bb.sum() - ba @ bb)


def fuse_arrays(b_a, u_a, b_b, u_b):
    """Closed-form Dempster combination on arrays of shape (..., K).

    Returns fused beliefs, fused uncertainty and the normaliser (1 - C).
    The normaliser is assembled from the same products as the numerators,
    so the output stays normalised even when the conflict is close to 1.
    Symmetric in its two operands down to the last bit.
    """
    b_a = np.asarray(b_a, dtype=float)
    b_b = np.asarray(b_b, dtype=float)
    u_a = np.asarray(u_a, dtype=float)
    u_b = np.asarray(u_b, dtype=float)
    cross = b_a * u_b[..., None] + b_b * u_a[..., None]
    num = b_a * b_b + cross
    uu = u_a * u_b
    norm = num.sum(axis=-1) + uu
    return num, uu, norm


def fuse_pair(a: Opinion, b: Opinion) -> Opinion:
    _check_same_frame(a, b)
    # the vacuous opinion is the identity; returning the operand keeps that exact
    # (renormalising by sum(b) + u could move the last bit)
    if b.uncertainty == 1.0 and not any(b.beliefs):
        return a
    if a.uncertainty == 1.0 and not any(a.beliefs):
        return b
    num, uu, norm = fuse_arrays(a.as_array(), a.uncertainty, b.as_array(), b.uncertainty)
    norm = float(norm)
    if norm < CONFLICT_TOL:
        raise TotalConflict(f"normaliser 1 - C = {norm!r}")
    return Opinion(tuple(num / norm), float(uu) / norm)


def fuse_sequence(ops: Iterable[Opinion]) -> Opinion:
    ops = list(ops)
    if not ops:
        raise EmptySequence("cannot fuse an empty sequence")
    k = ops[0].class_count
    for op in ops[1:]:
        if op.class_count != k:
            raise DimensionMismatch(f"mixed frame sizes {k} and {op.class_count}")
    return reduce(fuse_pair, ops)


def fuse_running(beliefs: np.ndarray, uncertainty: np.ndarray):
    """Prefix fusion over the step axis.

    ``beliefs`` has shape (N, T, K) and ``uncertainty`` (N, T). Returns
    arrays of the same shapes where index t holds the fold of steps 0..t.
    """
    b = np.asarray(beliefs, dtype=float)
    u = np.asarray(uncertainty, dtype=float)
    out_b = np.empty_like(b)
    out_u = np.empty_like(u)
    out_b[:, 0], out_u[:, 0] = b[:, 0], u[:, 0]
    for t in range(1, b.shape[1]):
        num, uu, norm = fuse_arrays(out_b[:, t - 1], out_u[:, t - 1], b[:, t], u[:, t])
        if np.any(norm < CONFLICT_TOL):
            raise TotalConflict("normaliser below tolerance in running fusion")
        out_b[:, t] = num / norm[:, None]
        out_u[:, t] = uu / norm
    return out_b, out_u


def rank_classes(beliefs: np.ndarray) -> np.ndarray:
    """Class indices by descending belief, ties to the lower index.

    Works on (..., K) arrays; returns the full ordering along the last axis.
    """
    b = np.asarray(beliefs, dtype=float)
    # stable sort on negated beliefs keeps index order within ties
    return np.argsort(-b, axis=-1, kind="stable")


def predict(op: Opinion, k: int = 1) -> tuple[int, ...]:
    """Top-k classes of an opinion, most believed first."""
    if not 1 <= k <= op.class_count:
        raise ValueError(f"k must be in [1, {op.class_count}], got {k}")
    return tuple(int(i) for i in rank_classes(op.as_array())[:k])


def _check_same_frame(a: Opinion, b: Opinion):
    if a.class_count != b.class_count:
        raise DimensionMismatch(f"frame sizes differ: {a.class_count} vs {b.class_count}")


# ---------------------------------------------------------------------------
# full powerset oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperMass:
    """Basic mass assignment over non-empty subsets of {0..K-1}."""

    k: int
    masses: Mapping[frozenset, float]

    def __post_init__(self):
        if self.k > MAX_FRAME:
            raise FrameTooLarge(f"K={self.k} exceeds {MAX_FRAME}")
        clean = {}
        for subset, m in self.masses.items():
            subset = frozenset(int(i) for i in subset)
            if not subset:
                raise OpinionError("mass on the empty set")
            if not subset <= frozenset(range(self.k)):
                raise OpinionError(f"subset {set(subset)} outside the frame")
            if m < 0 or not math.isfinite(m):
                raise OpinionError(f"invalid mass {m!r}")
            if m > 0:
                clean[subset] = clean.get(subset, 0.0) + float(m)
        total = math.fsum(clean.values())
        if abs(total - 1.0) > NORM_TOL:
            raise OpinionError(f"masses sum to {total!r}")
        object.__setattr__(self, "masses", clean)

    @property
    def frame(self) -> frozenset:
        return frozenset(range(self.k))

    @classmethod
    def from_opinion(cls, op: Opinion) -> "HyperMass":
        masses = {frozenset([i]): b for i, b in enumerate(op.beliefs)}
        masses[frozenset(range(op.class_count))] = op.uncertainty
        return cls(op.class_count, masses)

    def to_opinion(self) -> Opinion:
        frame = self.frame
        beliefs = [0.0] * self.k
        u = 0.0
        for subset, m in self.masses.items():
            if len(subset) == 1:
                beliefs[next(iter(subset))] = m
            elif subset == frame:
                u = m
            else:
                raise OpinionError(f"mass on {sorted(subset)} has no opinion counterpart")
        return Opinion(tuple(beliefs), u)

    def all_subsets(self):
        """Every non-empty subset of the frame, including zero-mass ones."""
        idx = range(self.k)
        for r in range(1, self.k + 1):
            for c in itertools.combinations(idx, r):
                yield frozenset(c)


def _focal(h: HyperMass):
    return sorted(h.masses.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))


def brute_force_dempster(a: HyperMass, b: HyperMass) -> HyperMass:
    """Dempster's rule by enumerating every pair of subsets."""
    if a.k != b.k:
        raise DimensionMismatch(f"frame sizes differ: {a.k} vs {b.k}")
    if a.k > MAX_FRAME:
        raise FrameTooLarge(f"K={a.k} exceeds {MAX_FRAME}")
    acc: dict[frozenset, float] = {}
    agreeing = 0.0
    # zero-mass subsets contribute nothing, so only focal elements are paired
    for p1, m1 in _focal(a):
        for p2, m2 in _focal(b):
            inter = p1 & p2
            if inter:
                acc[inter] = acc.get(inter, 0.0) + m1 * m2
                agreeing += m1 * m2
    if agreeing < CONFLICT_TOL:
        raise TotalConflict(f"agreeing mass {agreeing!r}")
    return HyperMass(a.k, {p: m / agreeing for p, m in acc.items()})
