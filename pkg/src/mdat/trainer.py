"""Episodic adversarial training with Adam, step-halved learning rate and checkpoints.

Per query image the objective is

    CE(x) + CE(x_adv) + lam * (L_fea + L_class)

averaged over the episode's queries, with one optimizer step per episode.
``mode`` gates the regularizer: ``none`` is plain adversarial training,
``class`` and ``fea`` keep one term, ``both`` keeps the two.  With
``eps_max = 0`` no attack is run and the adversarial term reuses the clean
one, which is clean episodic training.
"""

from __future__ import annotations

import dataclasses
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, distloss, dn4
from . import diffcore as dc
from . import embednet as en
from .episodes import Dataset, Episode, episode_rng, sample_episode

MODES = ("none", "class", "fea", "both")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
VAL_STREAM = 1_000_003  # keeps validation episodes apart from training streams


@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 5
    k_shot: int = 5
    q_per_class: int = 10
    epochs: int = 10
    episodes_per_epoch: int = 200
    base_lr: float = 0.005
    lr_halve_every: int = 10
    lam: float = 0.5
    attack: str = "fgsm"
    eps_max: float = 0.01
    alpha: float = attacks.DEFAULT_ALPHA
    mode: str = "both"
    k_nn: int = 3
    tau: float = 1.0
    ridge: float = distloss.DEFAULT_RIDGE
    stats_scope: str = "image"
    in_channels: int = 3
    widths: tuple[int, ...] = (64, 64, 64, 64)
    pool_after: tuple[int, ...] = (0, 1)
    bn_mode: str = "batch"
    val_episodes: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("n_way", "k_shot", "q_per_class", "epochs", "episodes_per_epoch",
                     "lr_halve_every", "k_nn", "in_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.val_episodes < 0:
            raise ValueError("val_episodes must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0.0 <= self.eps_max < 1.0:
            raise ValueError("eps_max must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.attack not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.stats_scope not in ("image", "batch"):
            raise ValueError(f"unknown stats_scope {self.stats_scope!r}")
        if self.tau <= 0 or self.ridge <= 0 or self.base_lr <= 0 or self.alpha <= 0:
            raise ValueError("tau, ridge, base_lr and alpha must be positive")
        self.embed_config()

    def embed_config(self) -> en.EmbedConfig:
        return en.EmbedConfig(self.in_channels, tuple(self.widths), tuple(self.pool_after), bn_mode=self.bn_mode)

    @property
    def clean_only(self) -> bool:
        return self.eps_max == 0


# ---------------------------------------------------------------------------
# key=value text for flat dataclass configs


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t for t in text.replace(" ", "").split(",") if t]
        kind = type(default[0]) if default else float
        return tuple(kind(t) for t in items)
    return text


def config_text(cfg) -> str:
    """Canonical ``key=value`` lines in field order."""
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def config_from_pairs(cls, pairs: dict[str, str], base=None):
    """Build ``cls`` from string pairs on top of ``base`` (or the defaults)."""
    base = cls() if base is None else base
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _parse_value(v, getattr(base, k)) for k, v in pairs.items()}
    return dataclasses.replace(base, **values)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


# ---------------------------------------------------------------------------
# the episode objective


class TrainingError(FloatingPointError):
    def __init__(self, message: str, epoch: int, episode: int, seed: int):
        super().__init__(f"{message} (replay with seed={seed} epoch={epoch} episode={episode})")
        self.epoch, self.episode, self.seed = epoch, episode, seed


@dataclass
class EpisodeLoss:
    loss: float
    grads: dict[str, np.ndarray]
    ce_clean: float
    ce_adv: float
    reg: float
    eps: float
    x_adv: np.ndarray


def trainable(params: dict[str, dc.DiffValue]) -> list[str]:
    return [k for k, v in params.items() if v.requires_grad]


def _head(desc, pools, config: TrainConfig) -> dn4.ClassPrediction:
    return dn4.predict(dn4.class_scores(desc, pools, config.k_nn), config.tau)


def query_loss_gradient(params, support_desc, labels, n_way: int, config: TrainConfig) -> attacks.GradFn:
    """Gradient oracle of the clean query loss with the model and support held fixed."""
    fixed = en.frozen(params)
    ecfg = config.embed_config()
    pools = dn4.SupportPool.from_support(dc.detach(support_desc), n_way)

    def loss_fn(x):
        desc = en.embed(fixed, x, ecfg, training=True, update_stats=False).descriptors
        return dn4.cross_entropy(_head(desc, pools, config), labels)

    return attacks.loss_gradient(loss_fn)


def build_objective(params, episode: Episode, config: TrainConfig, eps: float,
                    attack_seed: int = 0, x_adv: np.ndarray | None = None,
                    graph: dc.Graph | None = None, task_cov=None) -> dict:
    """Record the episode objective on the active tape.

    ``x_adv`` fixes the adversarial queries; otherwise they are generated
    from the current model with ``config.attack`` at budget ``eps`` (FGSM
    reuses the input gradient of this very graph and so needs ``graph``).
    ``task_cov`` pins the support covariance and its inverse, which are
    constants of the backward pass anyway.  Returns the pieces as graph values plus the adversarial images used.
    """
    ecfg = config.embed_config()
    y = episode.query_labels
    support = en.embed(params, episode.support, ecfg, training=True).descriptors
    pools = dn4.SupportPool.from_support(support, episode.n_way)
    x = dc.DiffValue(episode.query, requires_grad=True)
    clean_desc = en.embed(params, x, ecfg, training=True).descriptors
    pred = _head(clean_desc, pools, config)
    ce = dn4.cross_entropy(pred, y)

    if x_adv is None and eps == 0:
        return {"loss": dc.add(ce, ce), "ce": ce, "ce_adv": ce, "reg": None, "x_adv": episode.query.copy()}

    if x_adv is None:
        if config.attack == "fgsm":
            if graph is None:
                raise ValueError("FGSM generation inside the objective needs the recording graph")
            x_adv = attacks.fgsm_perturb(episode.query, dc.input_gradient(graph, ce, x), eps)
        else:
            grad_fn = query_loss_gradient(params, support, y, episode.n_way, config)
            x_adv = attacks.pgd(grad_fn, episode.query, eps, config.alpha, attack_seed)

    adv_desc = en.embed(params, x_adv, ecfg, training=True).descriptors
    pred_adv = _head(adv_desc, pools, config)
    ce_adv = dn4.cross_entropy(pred_adv, y)
    loss = dc.add(ce, ce_adv)
    reg = None
    if config.mode != "none" and config.lam > 0:
        use_fea = config.mode in ("fea", "both")
        use_class = config.mode in ("class", "both")
        stats = distloss.build_stats(clean_desc, adv_desc, support, config.ridge, config.stats_scope, task_cov) if use_fea else None
        if stats is None:
            reg = distloss.class_consistency(pred, pred_adv)
        else:
            reg = distloss.reg_loss(stats, pred, pred_adv, use_fea, use_class)
        reg = dc.mean(reg)
        loss = dc.add(loss, dc.scale(reg, config.lam))
    return {"loss": loss, "ce": ce, "ce_adv": ce_adv, "reg": reg, "x_adv": x_adv}


def episode_loss(params, episode: Episode, config: TrainConfig, eps: float,
                 attack_seed: int = 0, x_adv: np.ndarray | None = None) -> EpisodeLoss:
    """Loss of one episode and its gradient with respect to every trainable parameter."""
    graph = dc.Graph()
    with graph.record():
        parts = build_objective(params, episode, config, eps, attack_seed, x_adv, graph)
    graph.backward(parts["loss"])
    grads = {k: params[k].grad.copy() for k in trainable(params)}
    return EpisodeLoss(
        loss=parts["loss"].item(),
        grads=grads,
        ce_clean=parts["ce"].item(),
        ce_adv=parts["ce_adv"].item(),
        reg=0.0 if parts["reg"] is None else parts["reg"].item(),
        eps=eps,
        x_adv=parts["x_adv"],
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, dc.DiffValue], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - ADAM_BETA1) * g if m is None else ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = (1 - ADAM_BETA2) * g * g if v is None else ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def lr_schedule(epoch: int, base_lr: float, halve_every: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base_lr * 0.5 ** (epoch // halve_every)


# ---------------------------------------------------------------------------
# checkpoints


CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState
    epoch: int = 0  # completed epochs
    val_acc: float = float("nan")
    best_val_acc: float = float("nan")
    best_epoch: int = -1

    def model(self) -> dict[str, dc.DiffValue]:
        """Fresh parameter values (trainable ones require grad)."""
        fresh = en.init_params(self.config.embed_config(), 0)
        check_compatible(self, self.config.embed_config())
        return {k: dc.DiffValue(self.params[k].copy(), requires_grad=fresh[k].requires_grad, name=k) for k in fresh}


def snapshot(config: TrainConfig, params, state: AdamState, epoch: int, val_acc: float,
             best_val_acc: float, best_epoch: int) -> Checkpoint:
    opt = AdamState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()}, state.step)
    return Checkpoint(config, {k: v.data.copy() for k, v in params.items()}, opt, epoch, val_acc, best_val_acc, best_epoch)


def check_compatible(ckpt: Checkpoint, embed_config: en.EmbedConfig) -> None:
    expected = en.init_params(embed_config, 0)
    missing = sorted(set(expected) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, value in expected.items():
        if ckpt.params[name].shape != value.shape:
            raise CheckpointError(f"tensor {name}: shape {ckpt.params[name].shape} in checkpoint, "
                                  f"{value.shape} expected")


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def _state_text(ckpt: Checkpoint) -> str:
    return (f"state.epoch={ckpt.epoch}\nstate.val_acc={ckpt.val_acc!r}\n"
            f"state.best_val_acc={ckpt.best_val_acc!r}\nstate.best_epoch={ckpt.best_epoch}\n"
            f"state.episode_streams=seed,epoch,episode\n")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    text = (config_text(ckpt.config) + _state_text(ckpt)).encode()
    buf.write(struct.pack("<I", len(text)) + text)
    _write_table(buf, ckpt.params)
    opt = {"adam.step": np.array(float(ckpt.optimizer.step))}
    for name in ckpt.optimizer.m:
        opt[f"adam.m.{name}"] = ckpt.optimizer.m[name]
        opt[f"adam.v.{name}"] = ckpt.optimizer.v[name]
    _write_table(buf, opt)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, embed_config: en.EmbedConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``embed_config`` also check it fits that architecture."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    pairs = parse_pairs(r.take(n).decode(), str(path))
    state = {k: pairs.pop(k) for k in list(pairs) if k.startswith("state.")}
    config = config_from_pairs(TrainConfig, pairs)
    params = r.table()
    opt_table = r.table()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    step = int(opt_table.pop("adam.step", np.array(0.0)))
    m = {k[len("adam.m."):]: v for k, v in opt_table.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in opt_table.items() if k.startswith("adam.v.")}
    ckpt = Checkpoint(config, params, AdamState(m, v, step), int(state.get("state.epoch", 0)),
                      float(state.get("state.val_acc", "nan")), float(state.get("state.best_val_acc", "nan")),
                      int(state.get("state.best_epoch", -1)))
    check_compatible(ckpt, config.embed_config() if embed_config is None else embed_config)
    return ckpt


# ---------------------------------------------------------------------------
# the loop


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    mean_loss: float
    val_acc_clean: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.mean_loss!r},{self.val_acc_clean!r}"


METRICS_HEADER = "epoch,lr,mean_loss,val_acc_clean"


@dataclass
class EpisodeRecord:
    epoch: int
    episode: int
    split: str
    class_ids: list[int]
    support_index: np.ndarray
    query_index: np.ndarray
    eps: float
    loss: float

    def line(self) -> str:
        sup = ";".join(",".join(map(str, row)) for row in self.support_index)
        qry = ";".join(",".join(map(str, row)) for row in self.query_index)
        return (f"{self.epoch} {self.episode} {self.split} {','.join(map(str, self.class_ids))} "
                f"{sup} {qry} {self.eps!r} {self.loss!r}")

    @classmethod
    def parse(cls, line: str) -> "EpisodeRecord":
        ep, idx, split, classes, sup, qry, eps, loss = line.split()
        rows = lambda s: np.array([[int(t) for t in r.split(",")] for r in s.split(";")])
        return cls(int(ep), int(idx), split, [int(c) for c in classes.split(",")], rows(sup), rows(qry),
                   float(eps), float(loss))


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    metrics: list[EpochMetrics]
    episodes: list[EpisodeRecord]


def draw_training_episode(dataset: Dataset, config: TrainConfig, epoch: int, index: int):
    """The episode, attack budget and attack seed for one training step."""
    rng = episode_rng(config.seed, epoch, index)
    ep = sample_episode(dataset, "train", config.n_way, config.k_shot, config.q_per_class, rng)
    eps = 0.0 if config.clean_only else attacks.sample_epsilon(rng, config.eps_max)
    return ep, eps, int(rng.integers(2 ** 31))


def held_out_way(dataset: Dataset, split: str, n_way: int) -> int:
    """Way of held-out episodes: ``n_way``, capped by the classes the split has."""
    return min(n_way, len(dataset.split_indices(split)))


def validation_episodes(dataset: Dataset, config: TrainConfig) -> list[Episode]:
    way = held_out_way(dataset, "val", config.n_way)
    return [sample_episode(dataset, "val", way, config.k_shot, config.q_per_class,
                           episode_rng(config.seed, VAL_STREAM, i)) for i in range(config.val_episodes)]


def clean_accuracy(params, episodes: list[Episode], config: TrainConfig) -> float:
    """Pooled top-1 accuracy on clean queries, or nan with no episodes."""
    if not episodes:
        return float("nan")
    fixed = en.frozen(params)
    ecfg = config.embed_config()
    hits = total = 0
    for ep in episodes:
        support = en.embed(fixed, ep.support, ecfg).descriptors
        pools = dn4.SupportPool.from_support(support, ep.n_way)
        scores = dn4.class_scores(en.embed(fixed, ep.query, ecfg).descriptors, pools, config.k_nn)
        hits += int(np.sum(scores.data.argmax(axis=-1) == ep.query_labels))
        total += len(ep.query_labels)
    return hits / total


def _better(val: float, best: float) -> bool:
    if math.isnan(val):
        return math.isnan(best)
    return math.isnan(best) or val > best


def train(config: TrainConfig, dataset: Dataset, out_dir=None, resume: Checkpoint | None = None,
          best: Checkpoint | None = None, stop_after: int | None = None, progress=None) -> TrainResult:
    """Run the configured epochs; returns the final and best-validation checkpoints.

    ``resume`` continues from a checkpoint's completed-epoch count (its best
    companion, if any, is passed as ``best``).  ``stop_after`` ends the run
    after that many completed epochs, as an interruption would.  With
    ``out_dir`` the run writes ``last.ckpt``, ``best.ckpt``, ``metrics.csv``
    and ``episodes.log`` there after every epoch.
    """
    c, h, w = dataset.image_shape
    if c != config.in_channels:
        raise ValueError(f"dataset has {c} channels, config expects {config.in_channels}")
    config.embed_config().descriptor_grid(h, w)
    need = config.k_shot + config.q_per_class
    if len(dataset.split_indices("train")) < config.n_way:
        raise ValueError(f"split 'train' has fewer than {config.n_way} classes")
    if config.val_episodes and len(dataset.split_indices("val")) < 2:
        raise ValueError("split 'val' needs at least two classes")
    for cls in dataset.classes:
        if cls.split != "test" and cls.images.shape[0] < need:
            raise ValueError(f"class {cls.name!r} has {cls.images.shape[0]} images, episodes need {need}")

    if resume is None:
        params = en.init_params(config.embed_config(), config.seed)
        state = AdamState()
        start = 0
        best_acc, best_epoch, last_acc = float("nan"), -1, float("nan")
        best_ckpt = None
    else:
        if dataclasses.replace(resume.config, epochs=config.epochs) != config:
            raise CheckpointError("resume checkpoint was trained with a different configuration")
        params = Checkpoint(config, resume.params, resume.optimizer).model()
        state = AdamState({k: v.copy() for k, v in resume.optimizer.m.items()},
                          {k: v.copy() for k, v in resume.optimizer.v.items()}, resume.optimizer.step)
        start = resume.epoch
        best_acc, best_epoch, last_acc = resume.best_val_acc, resume.best_epoch, resume.val_acc
        best_ckpt = best

    out = Path(out_dir) if out_dir is not None else None
    metrics: list[EpochMetrics] = []
    records: list[EpisodeRecord] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            metrics = _read_metrics(out / "metrics.csv")[:start]
            records = [r for r in _read_episode_log(out / "episodes.log") if r.epoch < start]

    val_eps = validation_episodes(dataset, config)
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    final = snapshot(config, params, state, start, last_acc, best_acc, best_epoch)
    for epoch in range(start, end):
        lr = lr_schedule(epoch, config.base_lr, config.lr_halve_every)
        losses = []
        for i in range(config.episodes_per_epoch):
            ep, eps, attack_seed = draw_training_episode(dataset, config, epoch, i)
            try:
                res = episode_loss(params, ep, config, eps, attack_seed)
            except (FloatingPointError, dc.NonFiniteError) as exc:
                raise TrainingError(str(exc), epoch, i, config.seed) from exc
            if not math.isfinite(res.loss):
                raise TrainingError("non-finite episode loss", epoch, i, config.seed)
            adam_step(params, res.grads, state, lr)
            losses.append(res.loss)
            records.append(EpisodeRecord(epoch, i, ep.split, ep.class_ids, ep.support_index, ep.query_index,
                                         eps, res.loss))
            if progress is not None:
                progress(epoch, i, res)
        last_acc = clean_accuracy(params, val_eps, config)
        metrics.append(EpochMetrics(epoch, lr, float(np.mean(losses)), last_acc))
        if _better(last_acc, best_acc) or best_ckpt is None:
            best_acc, best_epoch = last_acc, epoch
            best_ckpt = None  # filled below once the snapshot exists
        final = snapshot(config, params, state, epoch + 1, last_acc, best_acc, best_epoch)
        if best_ckpt is None:
            best_ckpt = final
        if out is not None:
            save_checkpoint(final, out / "last.ckpt")
            save_checkpoint(best_ckpt, out / "best.ckpt")
            _write_metrics(out / "metrics.csv", metrics)
            _write_episode_log(out / "episodes.log", records)
    if best_ckpt is None:
        best_ckpt = final
    return TrainResult(final, best_ckpt, metrics, records)


def _write_metrics(path: Path, metrics: list[EpochMetrics]) -> None:
    path.write_text(METRICS_HEADER + "\n" + "".join(m.line() + "\n" for m in metrics))


def _read_metrics(path: Path) -> list[EpochMetrics]:
    if not path.exists():
        return []
    rows = []
    for line in path.read_text().splitlines()[1:]:
        e, lr, loss, acc = line.split(",")
        rows.append(EpochMetrics(int(e), float(lr), float(loss), float(acc)))
    return rows


def _write_episode_log(path: Path, records: list[EpisodeRecord]) -> None:
    path.write_text("# epoch episode split classes support query eps loss\n"
                    + "".join(r.line() + "\n" for r in records))


def _read_episode_log(path: Path) -> list[EpisodeRecord]:
    if not path.exists():
        return []
    return [EpisodeRecord.parse(l) for l in path.read_text().splitlines() if l and not l.startswith("#")]


def read_episode_log(path) -> list[EpisodeRecord]:
    return _read_episode_log(Path(path))
