"""Four-block convolutional embedding producing deep local descriptors.

Each block is conv3x3 -> batch norm -> leaky ReLU, with an optional 2x2 max
pool after it.  The final feature map of shape (h, w, d) is read out as
``m = h*w`` local descriptors of dimension ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class EmbedConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (64, 64, 64, 64)
    pool_after: tuple[int, ...] = (0, 1)  # zero-based block indices
    slope: float = 0.2
    bn_mode: str = "batch"  # "batch" or "running"

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError(f"expected four blocks, got widths {self.widths}")
        if any(w <= 0 for w in self.widths) or self.in_channels <= 0:
            raise ValueError("channel widths must be positive")
        if self.bn_mode not in ("batch", "running"):
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")

    @property
    def pool_factor(self) -> int:
        return 2 ** len(self.pool_after)

    def descriptor_grid(self, h: int, w: int) -> tuple[int, int]:
        f = self.pool_factor
        if h % f or w % f:
            raise ValueError(f"resolution {h}x{w} is not divisible by the pooling factor {f}")
        return h // f, w // f


@dataclass
class LocalDescriptorMap:
    """Descriptors for a batch of images: ``descriptors`` is (n, m, d)."""

    descriptors: dc.DiffValue
    grid: tuple[int, int]
    image_ids: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.descriptors.shape[1]

    @property
    def d(self) -> int:
        return self.descriptors.shape[2]


def param_names(config: EmbedConfig) -> list[str]:
    names = []
    for i in range(4):
        names += [f"block{i}.conv", f"block{i}.bn.weight", f"block{i}.bn.bias",
                  f"block{i}.bn.running_mean", f"block{i}.bn.running_var"]
    return names


def init_params(config: EmbedConfig, seed: int) -> dict[str, dc.DiffValue]:
    """Fan-in scaled uniform kernels, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(seed)
    params: dict[str, dc.DiffValue] = {}
    cin = config.in_channels
    for i, cout in enumerate(config.widths):
        bound = 1.0 / np.sqrt(cin * 9)
        kernel = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
        params[f"block{i}.conv"] = dc.parameter(kernel, f"block{i}.conv")
        params[f"block{i}.bn.weight"] = dc.parameter(np.ones(cout), f"block{i}.bn.weight")
        params[f"block{i}.bn.bias"] = dc.parameter(np.zeros(cout), f"block{i}.bn.bias")
        # buffers, never differentiated
        params[f"block{i}.bn.running_mean"] = dc.DiffValue(np.zeros(cout), name=f"block{i}.bn.running_mean")
        params[f"block{i}.bn.running_var"] = dc.DiffValue(np.ones(cout), name=f"block{i}.bn.running_var")
        cin = cout
    return params


def frozen(params: dict[str, dc.DiffValue]) -> dict[str, dc.DiffValue]:
    """Read-only view of ``params`` sharing data, with gradients switched off."""
    return {k: dc.DiffValue(v.data, name=k) for k, v in params.items()}


def embed(params, images, config: EmbedConfig, training: bool = False,
          update_stats: bool | None = None) -> LocalDescriptorMap:
    """Embed a batch of images (n, c, h, w) in [0, 1] into local descriptors.

    A single (c, h, w) image is accepted and treated as a batch of one.  In
    ``running`` bn mode, ``training=True`` normalizes with batch statistics
    and, unless ``update_stats`` is False, folds them into the running
    averages in place.
    """
    update_stats = training if update_stats is None else update_stats
    x = dc.as_value(images)
    if x.ndim == 3:
        x = dc.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ValueError(f"expected images (n, {config.in_channels}, h, w), got {x.shape}")
    grid = config.descriptor_grid(x.shape[2], x.shape[3])

    h = dc.transpose(x, (0, 2, 3, 1))  # channels-last from here on
    for i in range(4):
        h = dc.conv2d(h, params[f"block{i}.conv"])
        rm, rv = params[f"block{i}.bn.running_mean"], params[f"block{i}.bn.running_var"]
        stats = None
        if config.bn_mode == "running":
            if training and update_stats:
                axes = (0, 1, 2)
                n = h.data.size // h.shape[-1]
                rm.data = (1 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * h.data.mean(axis=axes)
                rv.data = (1 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * h.data.var(axis=axes) * n / max(n - 1, 1)
            elif not training:
                stats = (rm.data, rv.data)
        h = dc.batch_norm(h, params[f"block{i}.bn.weight"], params[f"block{i}.bn.bias"], BN_EPS, stats)
        h = dc.leaky_relu(h, config.slope)
        if i in config.pool_after:
            h = dc.max_pool2x2(h)

    n, gh, gw, d = h.shape
    desc = dc.reshape(h, (n, gh * gw, d))
    return LocalDescriptorMap(desc, (gh, gw))
