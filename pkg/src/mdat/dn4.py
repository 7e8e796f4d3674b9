"""Image-to-class local descriptor classifier (DN4 style)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import diffcore as dc

PROB_FLOOR = 1e-12


@dataclass
class SupportPool:
    """Per-class pooled support descriptors, stacked as (C, K*m, d)."""

    descriptors: dc.DiffValue

    @property
    def n_classes(self) -> int:
        return self.descriptors.shape[0]

    @property
    def size(self) -> int:
        return self.descriptors.shape[1]

    @classmethod
    def from_support(cls, support_desc, n_classes: int) -> "SupportPool":
        """Build pools from support descriptors (C*K, m, d) ordered class-major."""
        support_desc = dc.as_value(support_desc)
        n, m, d = support_desc.shape
        if n_classes <= 0 or n % n_classes:
            raise ValueError(f"{n} support images do not split into {n_classes} classes")
        return cls(dc.reshape(support_desc, (n_classes, (n // n_classes) * m, d)))

    @classmethod
    def from_classes(cls, per_class) -> "SupportPool":
        per_class = [dc.as_value(p) for p in per_class]
        if not per_class or any(p.shape[0] == 0 for p in per_class):
            raise ValueError("every class needs a nonempty descriptor pool")
        return cls(dc.stack(per_class, axis=0))


@dataclass
class ClassPrediction:
    scores: dc.DiffValue
    probabilities: dc.DiffValue
    tau: float = 1.0


def _topk_inplace(sim: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k values and indices along the last axis of a 2-d array, best first.

    Repeated argmax picks the first maximal entry, so ties resolve to the
    lowest pool index.  ``sim`` is overwritten.
    """
    rows = np.arange(sim.shape[0])
    idx = np.empty((sim.shape[0], k), dtype=np.int64)
    vals = np.empty((sim.shape[0], k))
    for j in range(k):
        best = sim.argmax(axis=-1)
        idx[:, j] = best
        vals[:, j] = sim[rows, best]
        sim[rows, best] = -np.inf
    return vals, idx


def topk_cosine_sum(qn, pn, n_classes: int, k: int) -> dc.DiffValue:
    """For each unit query row, per class, the sum of its k largest cosines.

    ``qn`` is (r, d) and ``pn`` is (C*P, d), both row-normalized; the pool of
    class c occupies rows [c*P, (c+1)*P).  Returns (r, C).  The backward pass
    only touches the selected pairs.
    """
    qn, pn = dc.as_value(qn), dc.as_value(pn)
    r, d = qn.shape
    p = pn.shape[0] // n_classes
    sim = (qn.data @ pn.data.T).reshape(r * n_classes, p)
    vals, idx = _topk_inplace(sim, k)
    out = vals.sum(axis=1).reshape(r, n_classes)
    # global pool row of every selected neighbour, (r, C, k)
    cols = idx.reshape(r, n_classes, k) + (np.arange(n_classes) * p)[None, :, None]

    def bw(g, mask):
        gq = gp = None
        if mask[0]:
            gq = np.einsum("rc,rckd->rd", g, pn.data[cols])
        if mask[1]:
            weights = np.broadcast_to(g[:, :, None], cols.shape).ravel()
            rows = np.broadcast_to(np.arange(r)[:, None, None], cols.shape).ravel()
            sel = sparse.csr_matrix((weights, (cols.ravel(), rows)), shape=(pn.shape[0], r))
            gp = np.asarray(sel @ qn.data)
        return gq, gp

    return dc.primitive("topk_cosine_sum", out, (qn, pn), bw)


def class_scores(query_desc, pools: SupportPool, k_nn: int = 3) -> dc.DiffValue:
    """Sum over query descriptors of their k nearest support cosines, per class.

    ``query_desc`` is (n, m, d) or a single (m, d) set; returns (n, C) or (C,).
    """
    q = dc.as_value(query_desc)
    single = q.ndim == 2
    if single:
        q = dc.reshape(q, (1,) + q.shape)
    n, m, d = q.shape
    c, p, dp = pools.descriptors.shape
    if dp != d:
        raise ValueError(f"descriptor dim mismatch: query {d}, pool {dp}")
    if p == 0:
        raise ValueError("empty support pool")
    if not 1 <= k_nn <= p:
        raise ValueError(f"k_nn={k_nn} must lie in [1, {p}]")

    qn = dc.reshape(dc.normalize(q), (n * m, d))
    pn = dc.reshape(dc.normalize(pools.descriptors), (c * p, d))
    per_desc = topk_cosine_sum(qn, pn, c, k_nn)
    scores = dc.sum(dc.reshape(per_desc, (n, m, c)), axis=1)
    return dc.reshape(scores, (c,)) if single else scores


def predict(scores, tau: float = 1.0) -> ClassPrediction:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    scores = dc.as_value(scores)
    return ClassPrediction(scores, dc.softmax(dc.scale(scores, 1.0 / tau), axis=-1), tau)


def cross_entropy(pred: ClassPrediction, y_true) -> dc.DiffValue:
    """Mean of -log p[y] over the batch, with p floored at 1e-12.

    Labels are zero-based episode indices.  The log-probabilities are taken
    from a log-softmax of the scores so large logits stay finite; flooring
    ``log p`` at ``log(1e-12)`` is the same as flooring ``p``.
    """
    y = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
    logits = dc.scale(pred.scores, 1.0 / pred.tau)
    if logits.ndim == 1:
        logits = dc.reshape(logits, (1, -1))
    c = logits.shape[-1]
    if np.any((y < 0) | (y >= c)):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = dc.log_softmax(logits, axis=-1)
    picked = dc.gather(logp, y[:, None], axis=-1)
    floor = np.log(PROB_FLOOR)
    live = picked.data > floor
    clamped = dc.mul(picked, live.astype(np.float64))
    clamped = dc.add(clamped, np.where(live, 0.0, floor))
    return dc.neg(dc.mean(clamped))
