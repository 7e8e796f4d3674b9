"""White-box L-inf attacks on query images.

Attacks only see a gradient oracle ``grad_fn(x) -> dL/dx`` for the query batch;
support images never reach them.  Every output satisfies
``|x_adv - x|_inf <= eps`` and lies in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc

DEFAULT_ALPHA = 1.0 / 255.0
START_NOISE = 0.001

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    eps: float = 0.01
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    eps_max: float = 0.01

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.eps <= self.eps_max:
            raise ValueError(f"eps={self.eps} outside [0, {self.eps_max}]")
        if self.kind == "pgd" and self.alpha <= 0:
            raise ValueError("PGD step alpha must be positive")


class AttackError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite input gradient at attack step {step}")
        self.step = step


def loss_gradient(loss_fn: Callable[[dc.DiffValue], dc.DiffValue]) -> GradFn:
    """Turn a scalar loss builder over the query batch into a gradient oracle."""

    def grad_fn(x: np.ndarray) -> np.ndarray:
        graph = dc.Graph()
        with graph.record():
            leaf = dc.DiffValue(x, requires_grad=True)
            loss = loss_fn(leaf)
        return dc.input_gradient(graph, loss, leaf)

    return grad_fn


def _checked(g: np.ndarray, step: int) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise AttackError(step)
    return g


def fgsm_perturb(x: np.ndarray, grad: np.ndarray, eps: float) -> np.ndarray:
    """One signed-gradient step of size eps, clipped to [0, 1]."""
    _checked(grad, 0)
    return np.clip(x + eps * dc.sign(grad), 0.0, 1.0)


def fgsm(grad_fn: GradFn, x: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    return fgsm_perturb(x, grad_fn(x), eps)


def pgd_iterations(eps: float) -> int:
    """Number of PGD steps for a budget eps in [0, 1] pixel units.

    ``min(255*eps + 4, 1.25*255*eps)`` rounded to nearest (halves up), at least 1.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    raw = min(255.0 * eps + 4.0, 255.0 * eps * 1.25)
    return max(1, int(math.floor(raw + 0.5)))


def start_noise(shape: tuple[int, ...], seed: int, scale: float = START_NOISE) -> np.ndarray:
    """Gaussian start noise with one RNG stream per image (leading axis)."""
    noise = np.empty(shape)
    for i in range(shape[0]):
        noise[i] = np.random.default_rng([seed, i]).standard_normal(shape[1:])
    return scale * noise


def pgd(grad_fn: GradFn, x: np.ndarray, eps: float, alpha: float = DEFAULT_ALPHA,
        seed: int = 0, steps: int | None = None, noise: float = START_NOISE) -> np.ndarray:
    """Projected signed-gradient ascent with a small Gaussian random start.

    The start point is clipped to [0, 1] (not projected onto the eps-ball); every
    step takes the gradient at the current iterate, projects onto the eps-ball
    around ``x`` and clips to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if eps == 0:
        return x.copy()
    steps = pgd_iterations(eps) if steps is None else steps
    lo, hi = x - eps, x + eps
    cur = np.clip(x + start_noise(x.shape, seed, noise), 0.0, 1.0) if noise else x.copy()
    for t in range(steps):
        g = _checked(grad_fn(cur), t)
        cur = np.clip(np.clip(cur + alpha * dc.sign(g), lo, hi), 0.0, 1.0)
    return cur


def sample_epsilon(rng: np.random.Generator, eps_max: float) -> float:
    """|z| with z ~ N(0, (eps_max/2)^2), redrawn until it falls in [0, eps_max]."""
    if eps_max <= 0:
        raise ValueError("eps_max must be positive")
    sigma = eps_max / 2.0
    while True:
        e = abs(rng.normal(0.0, sigma))
        if e <= eps_max:
            return float(e)


def run_attack(config: AttackConfig, grad_fn: GradFn, x: np.ndarray) -> np.ndarray:
    if config.kind == "fgsm":
        return fgsm(grad_fn, x, config.eps)
    return pgd(grad_fn, x, config.eps, config.alpha, config.seed)
