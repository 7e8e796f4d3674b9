"""Built-in correctness checks, run by ``mdat selfcheck``.

Each check compares a fast path against an independent oracle or asserts a
contract on random inputs, and reports pass/fail with a short detail line.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attacks, distloss, dn4, evalkit
from . import diffcore as dc
from . import embednet as en
from .episodes import Episode, generate_synthetic, sample_episode
from .trainer import TrainConfig, build_objective


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def random_spd(rng: np.random.Generator, d: int, jitter: float = 0.1) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return a @ a.T / d + jitter * np.eye(d)


def random_psd(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, max(1, d // 2)))
    return a @ a.T / d


# ---------------------------------------------------------------------------


def check_trace_identity(n: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        d = (2, 4, 8, 16)[i % 4]
        s1, s2, s = random_psd(rng, d), random_psd(rng, d), random_spd(rng, d)
        fast = distloss.whitened_trace_form(s1, s2, np.linalg.inv(s)).item()
        oracle = distloss.trace_identity_oracle(s1, s2, s)
        worst = max(worst, abs(fast - oracle) / max(abs(oracle), 1e-300))
    return worst <= 1e-8, f"max relative error {worst:.2e} over {n} triples"


def check_fbeta_table() -> tuple[bool, str]:
    cases = [((67.30, 55.23), 64.48), ((70.84, 17.25), 43.69), ((67.27, 56.97), 64.92)]
    errs = [abs(evalkit.f_beta(c, a, 0.5) - want) for (c, a), want in cases]
    return max(errs) <= 0.01, "errors " + ", ".join(f"{e:.4f}" for e in errs)


def _fd(fn: Callable[..., dc.DiffValue], inputs: dict[str, np.ndarray], name: str, coords=None) -> float:
    return dc.finite_difference_check(dc.Graph(fn), inputs, name, coords=coords)


def primitive_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Finite-difference error of every differentiable primitive on small random inputs."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    w = r(3, 4)
    spd = random_spd(rng, 3)
    idx = rng.integers(0, 4, size=(3, 1))
    w1 = r(2, 3, 5)
    w2 = r(2, 5, 4, 3)
    w3 = r(2, 5, 4, 3)
    w4 = r(1, 4, 4, 5)
    w5 = r(2, 3, 3, 4)
    w6 = r(2, 3, 3, 4)
    w7 = r(2, 2, 3, 3)
    w8 = r(4, 3, 4)
    w9 = r(4)
    w10 = r(3, 5)
    w11 = r(3)
    w12 = r(4, 2)
    w13 = r(4, 2)
    errs = {
        "add": _fd(lambda a, b: dc.sum(dc.mul(dc.add(a, b), w)), {"a": r(3, 4), "b": r(4)}, "b"),
        "sub": _fd(lambda a, b: dc.sum(dc.mul(dc.sub(a, b), w)), {"a": r(3, 4), "b": r(3, 1)}, "b"),
        "mul": _fd(lambda a, b: dc.sum(dc.mul(a, b)), {"a": r(3, 4), "b": r(3, 4)}, "a"),
        "scale/neg": _fd(lambda a: dc.sum(dc.mul(dc.neg(dc.scale(a, 2.5)), w)), {"a": r(3, 4)}, "a"),
        "matmul": _fd(lambda a, b: dc.sum(dc.mul(dc.matmul(a, b), w1)), {"a": r(2, 3, 4), "b": r(4, 5)}, "b"),
        "conv2d/x": _fd(lambda x, k: dc.sum(dc.mul(dc.conv2d(x, k), w2)),
                        {"x": r(2, 5, 4, 2), "k": r(3, 2, 3, 3)}, "x"),
        "conv2d/w": _fd(lambda x, k: dc.sum(dc.mul(dc.conv2d(x, k), w3)),
                        {"x": r(2, 5, 4, 2), "k": r(3, 2, 3, 3)}, "k"),
        "conv2d/wide": _fd(lambda x, k: dc.sum(dc.mul(dc.conv2d(x, k), w4)),
                           {"x": r(1, 4, 4, 2), "k": r(5, 2, 3, 3)}, "x"),
        "batch_norm/x": _fd(lambda x, g, b: dc.sum(dc.mul(dc.batch_norm(x, g, b), w5)),
                            {"x": r(2, 3, 3, 4), "g": r(4), "b": r(4)}, "x"),
        "batch_norm/gamma": _fd(lambda x, g, b: dc.sum(dc.mul(dc.batch_norm(x, g, b), w6)),
                                {"x": r(2, 3, 3, 4), "g": r(4), "b": r(4)}, "g"),
        "leaky_relu": _fd(lambda x: dc.sum(dc.mul(dc.leaky_relu(x), w)), {"x": r(3, 4) + 0.05}, "x"),
        "max_pool2x2": _fd(lambda x: dc.sum(dc.mul(dc.max_pool2x2(x), w7)), {"x": r(2, 4, 6, 3)}, "x"),
        "reshape/transpose": _fd(lambda x: dc.sum(dc.mul(dc.transpose(dc.reshape(x, (4, 3)), (1, 0)), w)),
                                 {"x": r(2, 6)}, "x"),
        "stack/concat": _fd(lambda a, b: dc.sum(dc.mul(dc.concat([dc.stack([a, b]), dc.stack([b, a])]), w8)),
                            {"a": r(3, 4), "b": r(3, 4)}, "a"),
        "sum/mean": _fd(lambda a: dc.add(dc.sum(dc.mul(dc.sum(a, axis=0), w9)), dc.mean(dc.mul(a, a))),
                        {"a": r(3, 4)}, "a"),
        "softmax": _fd(lambda a: dc.sum(dc.mul(dc.softmax(a), w)), {"a": r(3, 4)}, "a"),
        "log_softmax/gather": _fd(lambda a: dc.sum(dc.gather(dc.log_softmax(a), idx, axis=-1)), {"a": r(3, 4)}, "a"),
        "log": _fd(lambda a: dc.sum(dc.mul(dc.log(a), w)), {"a": rng.uniform(0.5, 2.0, (3, 4))}, "a"),
        "normalize": _fd(lambda a: dc.sum(dc.mul(dc.normalize(a), w)), {"a": r(3, 4)}, "a"),
        "cosine_similarity": _fd(lambda a, b: dc.sum(dc.mul(dc.cosine_similarity(a, b), w10)),
                                 {"a": r(3, 4), "b": r(5, 4)}, "a"),
        "mean_cov": _fd(lambda a: dc.add(dc.sum(dc.mul(dc.mean_cov(a)[1], spd)), dc.sum(dc.mul(dc.mean_cov(a)[0], w11))),
                        {"a": r(6, 3)}, "a"),
        "trace": _fd(lambda a: dc.trace(dc.matmul(a, a)), {"a": r(3, 3)}, "a"),
        "topk_cosine_sum/query": _fd(lambda q, p: dc.sum(dc.mul(dn4.topk_cosine_sum(dc.normalize(q), dc.normalize(p), 2, 2), w12)),
                                     {"q": r(4, 3), "p": r(10, 3)}, "q"),
        "topk_cosine_sum/pool": _fd(lambda q, p: dc.sum(dc.mul(dn4.topk_cosine_sum(dc.normalize(q), dc.normalize(p), 2, 2), w13)),
                                    {"q": r(4, 3), "p": r(10, 3)}, "p"),
    }
    return errs


def check_primitive_gradients() -> tuple[bool, str]:
    errs = primitive_gradient_errors()
    worst = max(errs, key=errs.get)
    return errs[worst] < 1e-4, f"{len(errs)} primitives, worst {worst} {errs[worst]:.2e}"


def toy_episode(seed: int = 0, way: int = 2, shot: int = 1, queries: int = 2, res: int = 8) -> Episode:
    ds = generate_synthetic(2 * max(way, 2), shot + queries, res, seed, n_way=max(way, 2))
    return sample_episode(ds, "train", way, shot, queries, np.random.default_rng(seed))


def toy_config(mode: str = "both") -> TrainConfig:
    return TrainConfig(n_way=2, k_shot=1, q_per_class=2, widths=(4, 4, 4, 4), mode=mode, lam=0.5, val_episodes=0)


def episode_loss_gradient_error(seed: int = 0, coords: int = 40) -> float:
    """FD check of the full objective in every parameter tensor, adversarial queries held fixed."""
    cfg = toy_config()
    ep = toy_episode(seed)
    params = en.init_params(cfg.embed_config(), seed)
    # adversarial queries held fixed: a random signed step inside the budget
    x_adv = np.clip(ep.query + 0.01 * np.sign(np.random.default_rng(seed).standard_normal(ep.query.shape)), 0, 1)
    buffers = {k: v for k, v in params.items() if not v.requires_grad}
    # the support covariance inverse is a stop-gradient constant, so pin it
    support = en.embed(params, ep.support, cfg.embed_config(), training=True).descriptors
    task_cov = distloss.task_covariance(support, cfg.ridge)

    def objective(**p):
        return build_objective({**buffers, **{k.replace("__", "."): v for k, v in p.items()}}, ep, cfg, 0.01,
                               x_adv=x_adv, task_cov=task_cov)["loss"]

    inputs = {k.replace(".", "__"): v.data for k, v in params.items() if v.requires_grad}
    worst = 0.0
    for name in inputs:
        worst = max(worst, dc.finite_difference_check(dc.Graph(objective), inputs, name, coords=coords, seed=seed))
    return worst


def check_episode_gradient() -> tuple[bool, str]:
    err = episode_loss_gradient_error()
    return err < 1e-4, f"full objective, max relative error {err:.2e}"


def check_attack_bounds(n: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_excess = -np.inf
    in_range = True
    for i in range(n):
        shape = (int(rng.integers(1, 4)), 2, 3, 3)
        x = rng.uniform(0, 1, shape)
        x[rng.uniform(size=shape) < 0.2] = rng.choice([0.0, 1.0])
        eps = float(rng.uniform(0, 0.05))
        target = rng.uniform(0, 1, shape)
        grad_fn = lambda z, t=target: 2 * (z - t)
        if i % 2:
            out = attacks.fgsm(grad_fn, x, eps)
        else:
            out = attacks.pgd(grad_fn, x, eps, float(rng.uniform(0.001, 0.02)), seed=i)
        worst_excess = max(worst_excess, float(np.max(np.abs(out - x))) - eps)
        in_range &= bool(out.min() >= 0 and out.max() <= 1)
    steps = [attacks.pgd_iterations(e) for e in (0.003, 0.007, 0.01)]
    ok = worst_excess <= 1e-12 and in_range and steps == [1, 2, 3]
    return ok, f"max excess {worst_excess:.1e}, in [0,1]: {in_range}, pgd steps {steps}"


def check_fgsm_fixed_point() -> tuple[bool, str]:
    x = np.random.default_rng(1).uniform(0.2, 0.8, (2, 3, 4, 4))
    flat = attacks.fgsm(lambda z: np.zeros_like(z), x, 0.01)
    same = bool(np.array_equal(flat, x))
    return same, "zero gradient leaves the input unchanged" if same else "zero gradient moved the input"


def check_dn4_oracle(n: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        c, m, k, p, d = rng.integers(2, 5), rng.integers(1, 17), 0, rng.integers(3, 33), rng.integers(2, 9)
        k = int(rng.integers(1, min(p, 5) + 1))
        q = rng.standard_normal((m, d))
        pools = rng.standard_normal((c, p, d))
        fast = dn4.class_scores(q, dn4.SupportPool(dc.constant(pools)), k).data
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        oracle = []
        for cls in range(c):
            pn = pools[cls] / np.linalg.norm(pools[cls], axis=1, keepdims=True)
            sims = qn @ pn.T
            oracle.append(np.sort(sims, axis=1)[:, ::-1][:, :k].sum())
        worst = max(worst, float(np.max(np.abs(fast - np.array(oracle)))))
    return worst <= 1e-10, f"max abs error {worst:.1e} over {n} instances"


def check_episode_hygiene(n: int = 200) -> tuple[bool, str]:
    ds = generate_synthetic(20, 20, 8, 0)
    test_ids = set(ds.split_indices("test"))
    leaks = overlaps = 0
    for i in range(n):
        ep = sample_episode(ds, "train", 5, 5, 10, np.random.default_rng([0, i]))
        leaks += len(test_ids & set(ep.class_ids))
        overlaps += ep.overlaps()
    return leaks == 0 and overlaps == 0, f"{leaks} test-class leaks, {overlaps} support/query overlaps in {n} episodes"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("trace identity vs eigendecomposition", check_trace_identity),
    ("F-beta table values", check_fbeta_table),
    ("primitive gradients", check_primitive_gradients),
    ("episode objective gradient", check_episode_gradient),
    ("attack bounds and PGD steps", check_attack_bounds),
    ("FGSM zero-gradient fixed point", check_fgsm_fixed_point),
    ("DN4 scores vs brute force", check_dn4_oracle),
    ("episode hygiene", check_episode_hygiene),
]


def run_all(verbose: bool = False) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, ok, detail, time.perf_counter() - t)
        results.append(res)
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({res.seconds:.1f}s)", flush=True)
    return results
