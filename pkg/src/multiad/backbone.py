"""Dilated residual feature extractor with squeeze-and-excitation and low/high fusion.

Spatial reduction happens only in the stem (stride-2 conv, stride-2 pool); the four
stages are stride 1 with growing dilation, so every pyramid level is ``input / 4``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (
    BNStats,
    Tensor,
    batch_norm,
    concat,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    sigmoid,
)


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stem_filters: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    se_enabled: bool = True
    fusion_enabled: bool = True
    se_reduction: int = 4
    fused_width: int | None = None

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.dilations = tuple(int(r) for r in self.dilations)
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != 4 or len(self.dilations) != 4:
            raise ValueError("backbone needs exactly four stage widths and four dilations")
        if any(w <= 0 for w in self.widths) or self.stem_filters <= 0 or self.in_channels <= 0:
            raise ValueError("channel widths must be positive")
        if any(r < 1 for r in self.dilations):
            raise ValueError("dilation rates must be >= 1")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.se_reduction < 1 or any(w % self.se_reduction for w in self.widths):
            raise ValueError(f"se_reduction {self.se_reduction} must divide every stage width")
        if self.fused_width is not None and self.fused_width <= 0:
            raise ValueError("fused_width must be positive")

    @property
    def fused_channels(self) -> int:
        return self.fused_width if self.fused_width is not None else max(1, self.widths[3] // 2)

    @property
    def level_channels(self) -> list[int]:
        chans = list(self.widths)
        if self.fusion_enabled:
            chans.append(self.fused_channels)
        return chans

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["dilations"] = list(self.dilations)
        return d


@dataclass
class Network:
    """Named parameters plus batch-norm running statistics of one model."""

    params: dict[str, Tensor] = field(default_factory=dict)
    stats: dict[str, BNStats] = field(default_factory=dict)
    bn_momentum: float = 0.1

    def add_conv(self, name: str, cout: int, cin: int, k: int, rng: np.random.Generator) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[name] = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32))

    def add_linear(self, name: str, out_f: int, in_f: int, rng: np.random.Generator, bias: bool = False) -> None:
        std = np.sqrt(2.0 / in_f)
        self.params[name + ".weight"] = Tensor((rng.standard_normal((out_f, in_f)) * std).astype(np.float32))
        if bias:
            self.params[name + ".bias"] = Tensor(np.zeros(out_f, dtype=np.float32))

    def add_bn(self, name: str, c: int) -> None:
        self.params[name + ".gamma"] = Tensor(np.ones(c, dtype=np.float32))
        self.params[name + ".beta"] = Tensor(np.zeros(c, dtype=np.float32))
        self.stats[name] = BNStats.fresh(c)

    def bn(self, x: Tensor, name: str, mode: str, update_stats: bool = True) -> Tensor:
        return batch_norm(
            x,
            self.params[name + ".gamma"],
            self.params[name + ".beta"],
            self.stats[name],
            mode,
            momentum=self.bn_momentum,
            update_stats=update_stats,
        )

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def frozen_view(self) -> "Network":
        """Same values, no gradient tracking; BN statistics are shared, not copied."""
        return Network({k: v.detach() for k, v in self.params.items()}, self.stats, self.bn_momentum)

    def copy(self) -> "Network":
        return Network(
            {k: Tensor(v.data.copy()) for k, v in self.params.items()},
            {k: BNStats(s.mean.copy(), s.var.copy()) for k, s in self.stats.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.stats.items():
            out[k + ".running_mean"] = s.mean
            out[k + ".running_var"] = s.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = arrays[k].astype(np.float32)
        for k, s in self.stats.items():
            s.mean = arrays[k + ".running_mean"].astype(np.float32)
            s.var = arrays[k + ".running_var"].astype(np.float32)


@dataclass
class FeaturePyramid:
    """Stage outputs F1..F4, followed by the fused map when fusion is enabled."""

    levels: list[Tensor]
    has_fused: bool = False

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    @property
    def stage4(self) -> Tensor:
        return self.levels[3]


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> Network:
    net = Network()
    net.add_conv("stem.conv", config.stem_filters, config.in_channels, 7, rng)
    net.add_bn("stem.bn", config.stem_filters)
    cin = config.stem_filters
    for s, width in enumerate(config.widths, start=1):
        for b in range(config.blocks_per_stage):
            p = f"stage{s}.block{b}"
            net.add_conv(p + ".conv1", width, cin, 3, rng)
            net.add_bn(p + ".bn1", width)
            net.add_conv(p + ".conv2", width, width, 3, rng)
            net.add_bn(p + ".bn2", width)
            if cin != width:
                net.add_conv(p + ".proj", width, cin, 1, rng)
                net.add_bn(p + ".bnp", width)
            cin = width
        hidden = width // config.se_reduction
        net.add_linear(f"stage{s}.se.fc1", hidden, width, rng)
        net.add_linear(f"stage{s}.se.fc2", width, hidden, rng)
    net.add_conv("fuse.conv", config.fused_channels, config.widths[0] + config.widths[3], 1, rng)
    net.add_bn("fuse.bn", config.fused_channels)
    return net


def stem(image: Tensor, net: Network, mode: str = "eval") -> Tensor:
    """7x7/2 conv, BN, ReLU, 3x3/2 max-pool: ``[b,c,h,w] -> [b,f,h/4,w/4]``."""
    h, w = image.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"input extent {h}x{w} must be divisible by 4")
    x = conv2d(image, net.params["stem.conv"], stride=2, padding=3)
    x = relu(net.bn(x, "stem.bn", mode))
    return max_pool2d(x, 3, stride=2, padding=1)


def se_block(x: Tensor, tau1: Tensor, tau2: Tensor) -> Tensor:
    """Squeeze (channel means), excite (FC-ReLU-FC-sigmoid), rescale channels."""
    b, c = x.shape[:2]
    if tau1.shape[1] != c or tau2.shape[0] != c or tau2.shape[1] != tau1.shape[0]:
        raise ValueError(f"SE weights {tau1.shape}/{tau2.shape} do not fit {c} channels")
    z = global_avg_pool(x)
    s = sigmoid(linear(relu(linear(z, tau1)), tau2))
    return x * s.reshape(b, c, 1, 1)


def res_block(x: Tensor, net: Network, prefix: str, dilation: int, mode: str = "eval") -> Tensor:
    p = net.params
    y = conv2d(x, p[prefix + ".conv1"], padding=dilation, dilation=dilation)
    y = relu(net.bn(y, prefix + ".bn1", mode))
    y = conv2d(y, p[prefix + ".conv2"], padding=dilation, dilation=dilation)
    y = net.bn(y, prefix + ".bn2", mode)
    if prefix + ".proj" in p:
        shortcut = net.bn(conv2d(x, p[prefix + ".proj"]), prefix + ".bnp", mode)
    else:
        shortcut = x
    return relu(y + shortcut)


def fuse_features(f_low: Tensor, f_up: Tensor, net: Network, mode: str = "eval") -> Tensor:
    if f_low.shape[0] != f_up.shape[0] or f_low.shape[2:] != f_up.shape[2:]:
        raise ValueError(f"cannot fuse maps of shape {f_low.shape} and {f_up.shape}")
    x = conv2d(concat([f_low, f_up], axis=1), net.params["fuse.conv"])
    return relu(net.bn(x, "fuse.bn", mode))


def forward_pyramid(image: Tensor, net: Network, config: BackboneConfig, mode: str = "eval") -> FeaturePyramid:
    x = stem(image, net, mode)
    levels = []
    for s, dilation in enumerate(config.dilations, start=1):
        for b in range(config.blocks_per_stage):
            x = res_block(x, net, f"stage{s}.block{b}", dilation, mode)
        if config.se_enabled:
            x = se_block(x, net.params[f"stage{s}.se.fc1.weight"], net.params[f"stage{s}.se.fc2.weight"])
        levels.append(x)
    if config.fusion_enabled:
        levels.append(fuse_features(levels[0], levels[3], net, mode))
    return FeaturePyramid(levels, has_fused=config.fusion_enabled)


def calibrate_bn_stats(net: Network, config: BackboneConfig, images: np.ndarray) -> None:
    """Set every BN site's running statistics to the population statistics of ``images``.

    One full-batch train-mode pass with momentum 1; parameters are untouched.
    """
    saved = net.bn_momentum
    net.bn_momentum = 1.0
    try:
        forward_pyramid(Tensor(images), net.frozen_view(), config, "train")
    finally:
        net.bn_momentum = saved
