"""Clean and adversarial accuracy over held-out episodes, and the F-beta score.

F-beta is the weighted harmonic mean of clean and adversarial accuracy,

    F_beta = (1 + beta^2) * clean * adv / (beta^2 * clean + adv),

so beta < 1 leans towards clean accuracy (beta = 0.5 gives it weight 4/5).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, dn4
from . import diffcore as dc
from . import embednet as en
from .episodes import Dataset, Episode, episode_rng, sample_episode
from .trainer import Checkpoint, TrainConfig, held_out_way

DEFAULT_EPSILONS = (0.003, 0.007, 0.01)
DEFAULT_BETAS = (0.5,)
REPORT_HEADER = "method,epsilon,acc_clean,acc_adv,f_beta,beta"
CURVE_HEADER = "beta,f_beta"


def f_beta(acc_clean: float, acc_adv: float, beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if acc_clean < 0 or acc_adv < 0:
        raise ValueError("accuracies must be nonnegative")
    if acc_clean == 0 and acc_adv == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * acc_clean * acc_adv / (b2 * acc_clean + acc_adv)


def f_beta_curve(acc_clean: float, acc_adv: float, beta_min: float = 0.0, beta_max: float = 2.0,
                 step: float = 0.05) -> list[tuple[float, float]]:
    """F-beta on the inclusive grid beta_min, beta_min + step, ..., beta_max."""
    if not 0 <= beta_min < beta_max:
        raise ValueError("need 0 <= beta_min < beta_max")
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(math.floor((beta_max - beta_min) / step + 1e-9)) + 1
    betas = [round(beta_min + i * step, 12) for i in range(n)]
    return [(b, f_beta(acc_clean, acc_adv, b)) for b in betas]


@dataclass
class EvalReport:
    method: str
    n_episodes: int
    acc_clean: float
    acc_adv: dict[float, float]
    betas: tuple[float, ...] = DEFAULT_BETAS
    per_episode: list = field(default_factory=list, repr=False, compare=False)

    def f_beta(self, eps: float, beta: float) -> float:
        return f_beta(self.acc_clean, self.acc_adv[eps], beta)

    def rows(self) -> list[tuple]:
        rows = [(self.method, 0.0, self.acc_clean, self.acc_clean, None, None)]
        for eps in sorted(self.acc_adv):
            if not self.betas:
                rows.append((self.method, eps, self.acc_clean, self.acc_adv[eps], None, None))
            for beta in sorted(self.betas):
                rows.append((self.method, eps, self.acc_clean, self.acc_adv[eps], self.f_beta(eps, beta), beta))
        return rows


def _cell(v) -> str:
    return "" if v is None else (repr(float(v)) if not isinstance(v, str) else v)


def report_text(report: EvalReport) -> str:
    lines = [REPORT_HEADER]
    lines += [",".join(_cell(v) for v in row) for row in report.rows()]
    lines.append(f"# n_episodes={report.n_episodes}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(report_text(report))


def read_report(path) -> EvalReport:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError(f"{path}: missing report header")
    n_episodes = 0
    method, clean = "", None
    adv: dict[float, float] = {}
    betas: set[float] = set()
    for line in lines[1:]:
        if line.startswith("# n_episodes="):
            n_episodes = int(line.split("=", 1)[1])
            continue
        if not line or line.startswith("#"):
            continue
        m, eps, acc_c, acc_a, fb, beta = line.split(",")
        method = m
        if fb == "" and beta == "" and clean is None:
            clean = float(acc_c)
            continue
        adv[float(eps)] = float(acc_a)
        if beta:
            betas.add(float(beta))
    if clean is None:
        raise ValueError(f"{path}: no clean row")
    return EvalReport(method, n_episodes, clean, adv, tuple(sorted(betas)))


def write_curve(series, path) -> None:
    Path(path).write_text(CURVE_HEADER + "\n" + "".join(f"{b!r},{v!r}\n" for b, v in series))


def method_name(config: TrainConfig) -> str:
    if config.clean_only:
        return "NT"
    return f"{config.attack.upper()}-AT" + ("" if config.mode == "none" else f"+{config.mode}")


# ---------------------------------------------------------------------------


EVAL_STREAM = 2_000_003


def held_out_episodes(dataset: Dataset, config: TrainConfig, n_episodes: int, seed: int,
                  split: str = "test", n_way: int | None = None) -> list[tuple[Episode, int]]:
    """Held-out episodes with their PGD seeds, fixed by ``seed``."""
    way = held_out_way(dataset, split, config.n_way if n_way is None else n_way)
    out = []
    for i in range(n_episodes):
        rng = episode_rng(seed, EVAL_STREAM, i)
        ep = sample_episode(dataset, split, way, config.k_shot, config.q_per_class, rng)
        out.append((ep, int(rng.integers(2 ** 31))))
    return out


def episode_hits(params, episode: Episode, config: TrainConfig, eps_list, attack: str,
                 attack_seed: int = 0) -> tuple[int, dict[float, int], int]:
    """Correct clean predictions and correct predictions under each budget.

    The attacker sees the query batch and its labels with the model and the
    support descriptors held fixed; FGSM needs one input gradient for all
    budgets.
    """
    fixed = en.frozen(params)
    ecfg = config.embed_config()
    y = episode.query_labels
    support = en.embed(fixed, episode.support, ecfg).descriptors
    pools = dn4.SupportPool.from_support(support, episode.n_way)

    def scores_of(images):
        return dn4.class_scores(en.embed(fixed, images, ecfg).descriptors, pools, config.k_nn).data

    def loss_fn(x):
        desc = en.embed(fixed, x, ecfg).descriptors
        return dn4.cross_entropy(dn4.predict(dn4.class_scores(desc, pools, config.k_nn), config.tau), y)

    grad_fn = attacks.loss_gradient(loss_fn)
    clean = int(np.sum(scores_of(episode.query).argmax(axis=-1) == y))
    grad = None
    adv = {}
    for eps in eps_list:
        if eps == 0:
            adv[eps] = clean
            continue
        if attack == "fgsm":
            if grad is None:
                grad = grad_fn(episode.query)
            x_adv = attacks.fgsm_perturb(episode.query, grad, eps)
        else:
            x_adv = attacks.pgd(grad_fn, episode.query, eps, config.alpha, attack_seed)
        adv[eps] = int(np.sum(scores_of(x_adv).argmax(axis=-1) == y))
    return clean, adv, len(y)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, eps_list=DEFAULT_EPSILONS, attack: str | None = None,
             n_episodes: int = 300, betas=DEFAULT_BETAS, seed: int = 0, workers: int = 1,
             split: str = "test", n_way: int | None = None, method: str | None = None) -> EvalReport:
    """Pooled clean and adversarial top-1 accuracy over ``n_episodes`` held-out episodes.

    ``attack`` defaults to the checkpoint's training attack.  Episodes may be
    spread over ``workers`` threads; aggregation always follows episode order.
    """
    eps_list = sorted({float(e) for e in eps_list})
    if not eps_list:
        raise ValueError("eps_list must not be empty")
    if any(e < 0 or e >= 1 for e in eps_list):
        raise ValueError("every epsilon must lie in [0, 1)")
    config = checkpoint.config
    attack = config.attack if attack is None else attack
    if attack not in ("fgsm", "pgd"):
        raise ValueError(f"unknown attack {attack!r}")
    params = checkpoint.model()
    tasks = held_out_episodes(dataset, config, n_episodes, seed, split, n_way)

    def run(i):
        ep, attack_seed = tasks[i]
        try:
            return episode_hits(params, ep, config, eps_list, attack, attack_seed)
        except (FloatingPointError, dc.NonFiniteError) as exc:
            raise FloatingPointError(f"evaluation episode {i} (seed={seed}) failed: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n_episodes)))
    else:
        results = [run(i) for i in range(n_episodes)]

    total = sum(r[2] for r in results)
    clean = sum(r[0] for r in results) / total
    adv = {e: sum(r[1][e] for r in results) / total for e in eps_list}
    return EvalReport(method_name(config) if method is None else method, n_episodes, clean, adv,
                      tuple(sorted(betas)), results)
