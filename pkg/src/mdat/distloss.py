"""Sample-level distribution losses between clean and adversarial descriptors.

The task-conditioned distance whitens both Gaussian fits by the covariance of
the episode's support descriptors.  It is evaluated without any matrix square
root: for symmetric PSD ``S1``, ``S2`` and SPD ``S`` with ``A = S^-1``,

    ||S^-1/2 S1 S^-1/2 - S^-1/2 S2 S^-1/2||_F^2
        = Tr[S1 A S1 A] - 2 Tr[S1 A S2 A] + Tr[S2 A S2 A].

``trace_identity_oracle`` evaluates the left side explicitly and exists to
check the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import diffcore as dc
from .dn4 import ClassPrediction

DEFAULT_RIDGE = 1e-3


@dataclass
class TaskStats:
    mu: dc.DiffValue
    sigma: dc.DiffValue
    mu_adv: dc.DiffValue
    sigma_adv: dc.DiffValue
    support_cov: np.ndarray
    support_cov_inv: np.ndarray


def descriptor_stats(desc) -> tuple[dc.DiffValue, dc.DiffValue]:
    """Mean and 1/m covariance of each descriptor set.

    ``desc`` is (m, d) or batched (..., m, d).
    """
    desc = dc.as_value(desc)
    if desc.ndim < 2 or desc.shape[-2] < 2:
        raise ValueError(f"need at least two descriptors per set, got shape {desc.shape}")
    return dc.mean_cov(desc)


def task_covariance(support_desc, ridge: float = DEFAULT_RIDGE) -> tuple[np.ndarray, np.ndarray]:
    """Pooled covariance of every support descriptor and its ridge inverse.

    Both are returned as constants: the inverse is a conditioning input to the
    distance and is not differentiated through.
    """
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    data = support_desc.data if isinstance(support_desc, dc.DiffValue) else np.asarray(support_desc, dtype=np.float64)
    rows = data.reshape(-1, data.shape[-1])
    if rows.shape[0] < 2:
        raise ValueError("need at least two support descriptors")
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / rows.shape[0]
    d = cov.shape[0]
    try:
        factor = linalg.cho_factor(cov + ridge * np.eye(d), lower=True)
    except linalg.LinAlgError as exc:
        raise FloatingPointError(f"support covariance is not positive definite after ridge {ridge}: {exc}") from None
    inv = linalg.cho_solve(factor, np.eye(d))
    inv = 0.5 * (inv + inv.T)
    return cov, inv


def mahalanobis_sq(mu, mu_adv, precision) -> dc.DiffValue:
    """(mu - mu_adv)^T P (mu - mu_adv) for each row of a (..., d) batch."""
    diff = dc.sub(mu, mu_adv)
    d = diff.shape[-1]
    row = dc.reshape(diff, diff.shape[:-1] + (1, d))
    proj = dc.matmul(row, np.asarray(precision))
    return dc.sum(dc.mul(dc.reshape(proj, diff.shape), diff), axis=-1)


def whitened_trace_form(sigma1, sigma2, precision) -> dc.DiffValue:
    """Tr[S1 A S1 A] - 2 Tr[S1 A S2 A] + Tr[S2 A S2 A] with A = ``precision``."""
    precision = np.asarray(precision)
    b1 = dc.matmul(sigma1, precision)
    b2 = dc.matmul(sigma2, precision)
    t11 = dc.trace(dc.matmul(b1, b1))
    t12 = dc.trace(dc.matmul(b1, b2))
    t22 = dc.trace(dc.matmul(b2, b2))
    return dc.add(dc.sub(t11, dc.scale(t12, 2.0)), t22)


def tcd_distance(stats: TaskStats) -> dc.DiffValue:
    """Task-conditioned distance; one value per image when the stats are batched."""
    first = mahalanobis_sq(stats.mu, stats.mu_adv, stats.support_cov_inv)
    second = whitened_trace_form(stats.sigma, stats.sigma_adv, stats.support_cov_inv)
    return dc.add(first, second)


def _inv_sqrt(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if vals.min() <= 0:
        raise ValueError("matrix is not positive definite")
    return (vecs / np.sqrt(vals)) @ vecs.T


def trace_identity_oracle(sigma1, sigma2, sigma) -> float:
    """||S^-1/2 S1 S^-1/2 - S^-1/2 S2 S^-1/2||_F^2 with an explicit eigen square root."""
    w = _inv_sqrt(np.asarray(sigma, dtype=np.float64))
    diff = w @ np.asarray(sigma1) @ w - w @ np.asarray(sigma2) @ w
    return float(np.sum(diff * diff))


def wasserstein2_approx(mu, sigma, mu_adv, sigma_adv) -> dc.DiffValue:
    """||mu - mu_adv||^2 + ||sigma - sigma_adv||_F^2 (no coupling square root)."""
    dm = dc.sub(mu, mu_adv)
    ds = dc.sub(sigma, sigma_adv)
    return dc.add(dc.sum(dc.mul(dm, dm), axis=-1), dc.sum(dc.mul(ds, ds), axis=(-2, -1)))


def class_consistency(pred: ClassPrediction, pred_adv: ClassPrediction) -> dc.DiffValue:
    """Squared L2 distance between clean and adversarial class probabilities."""
    p, q = pred.probabilities, pred_adv.probabilities
    if p.shape != q.shape:
        raise ValueError(f"prediction shapes differ: {p.shape} vs {q.shape}")
    diff = dc.sub(p, q)
    return dc.sum(dc.mul(diff, diff), axis=-1)


def reg_loss(stats: TaskStats, pred: ClassPrediction, pred_adv: ClassPrediction,
             use_fea: bool = True, use_class: bool = True) -> dc.DiffValue:
    """Feature-distribution term plus class-consistency term (per image)."""
    terms = []
    if use_fea:
        terms.append(tcd_distance(stats))
    if use_class:
        terms.append(class_consistency(pred, pred_adv))
    if not terms:
        return dc.constant(np.zeros(pred.probabilities.shape[:-1]))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def build_stats(clean_desc, adv_desc, support_desc, ridge: float = DEFAULT_RIDGE,
                scope: str = "image", task_cov: tuple[np.ndarray, np.ndarray] | None = None) -> TaskStats:
    """Gaussian fits of clean and adversarial descriptors against the support covariance.

    ``scope="image"`` fits one Gaussian per query image; ``"batch"`` pools all
    query descriptors of the episode into a single fit.  ``task_cov`` supplies
    a precomputed ``(cov, inverse)`` pair instead of deriving it from
    ``support_desc``.
    """
    clean_desc, adv_desc = dc.as_value(clean_desc), dc.as_value(adv_desc)
    if scope == "batch":
        d = clean_desc.shape[-1]
        clean_desc = dc.reshape(clean_desc, (1, -1, d))
        adv_desc = dc.reshape(adv_desc, (1, -1, d))
    elif scope != "image":
        raise ValueError(f"unknown stats scope {scope!r}")
    mu, sigma = descriptor_stats(clean_desc)
    mu_adv, sigma_adv = descriptor_stats(adv_desc)
    cov, inv = task_covariance(support_desc, ridge) if task_cov is None else task_cov
    return TaskStats(mu, sigma, mu_adv, sigma_adv, cov, inv)
