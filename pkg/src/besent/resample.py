"""Class rebalancing: SMOTE for real-valued vectors, duplication for token sequences.

Only ever apply these to the training side of a split.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from besent.errors import DataError

MATCH_MAJORITY = "match_majority"


@dataclass(frozen=True)
class ResamplePlan:
    k_neighbors: int = 5
    target_count: int | str = MATCH_MAJORITY
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.target_count != MATCH_MAJORITY and (
                not isinstance(self.target_count, int) or self.target_count < 1):
            raise ValueError("target_count must be 'match_majority' or a positive count")

    def target(self, counts: Counter) -> int:
        return max(counts.values()) if self.target_count == MATCH_MAJORITY else self.target_count


def _check_labels(n, y):
    if n == 0:
        raise DataError("cannot resample an empty training set")
    if n != len(y):
        raise DataError(f"{n} samples but {len(y)} labels")


def _nearest_neighbors(Xc: np.ndarray, k: int) -> np.ndarray:
    """Row i holds the indices of the k nearest other rows of Xc (ties by index)."""
    sq = np.einsum("ij,ij->i", Xc, Xc)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Xc @ Xc.T)
    np.fill_diagonal(d2, np.inf)
    np.maximum(d2, 0.0, out=d2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def smote(X, y: Sequence[int], plan: ResamplePlan = ResamplePlan(), return_provenance: bool = False):
    """Top up every class below the target with interpolated synthetic rows.

    ``X`` is a 2-D array (or a list of FeatureVector).  Returns ``(X', y')``
    with the originals first, in input order, followed by the synthetics.
    With ``return_provenance`` a third element lists ``(i, j, u)`` per
    synthetic row: source index, neighbour index (both into ``X``) and the
    interpolation factor.  Single-member classes are duplicated, so there
    ``j == i``.
    """
    if isinstance(X, (list, tuple)) and X and hasattr(X[0], "to_dense"):
        dims = {v.dim for v in X}
        if len(dims) != 1:
            raise DataError(f"feature vectors have inconsistent dimensions {sorted(dims)}")
        X = np.stack([v.to_dense() for v in X])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_labels(len(X), y)
    if X.ndim != 2:
        raise DataError("SMOTE input must be a 2-D matrix of equal-length vectors")

    rng = np.random.default_rng(plan.seed)
    counts = Counter(y.tolist())
    target = plan.target(counts)
    new_rows, new_y, prov = [], [], []
    for c in sorted(counts):
        need = target - counts[c]
        if need <= 0:
            continue
        members = np.flatnonzero(y == c)
        Xc = X[members]
        if len(members) == 1:
            new_rows.append(np.repeat(Xc, need, axis=0))
            prov.extend((int(members[0]), int(members[0]), 0.0) for _ in range(need))
        else:
            k = min(plan.k_neighbors, len(members) - 1)
            nn = _nearest_neighbors(Xc, k)
            src = rng.integers(0, len(members), size=need)
            pick = nn[src, rng.integers(0, k, size=need)]
            u = rng.random(need)
            new_rows.append(Xc[src] + u[:, None] * (Xc[pick] - Xc[src]))
            prov.extend(zip(members[src].tolist(), members[pick].tolist(), u.tolist()))
        new_y.extend([c] * need)

    if new_rows:
        X_out = np.vstack([X, *new_rows])
        y_out = np.concatenate([y, np.asarray(new_y, dtype=y.dtype)])
    else:
        X_out, y_out = X.copy(), y.copy()
    return (X_out, y_out, prov) if return_provenance else (X_out, y_out)


def random_oversample(S: Sequence, y: Sequence[int], plan: ResamplePlan = ResamplePlan()):
    """Duplicate random members of each minority class (with replacement) up to the target."""
    S, y = list(S), list(y)
    _check_labels(len(S), y)
    rng = np.random.default_rng(plan.seed)
    counts = Counter(y)
    target = plan.target(counts)
    out_s, out_y = list(S), list(y)
    for c in sorted(counts):
        need = target - counts[c]
        if need <= 0:
            continue
        members = [i for i, lab in enumerate(y) if lab == c]
        for j in rng.integers(0, len(members), size=need):
            out_s.append(S[members[j]])
            out_y.append(c)
    return out_s, out_y
