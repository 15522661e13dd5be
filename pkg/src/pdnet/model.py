"""Dual-stream saliency network: an RGB encoder-decoder (master) whose
bottleneck features are modulated by a depth-only encoder (subnet).

Convolutions that feed a BatchNorm carry no bias term (the normalization
would cancel it).  All weights are drawn from a truncated normal
(stddev 0.1); BN starts at gamma = 1, beta = 0; remaining biases at 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import _acc, _record, _result
from .tensor import DEFAULT_DTYPE, Rng, ShapeError, Tensor, truncated_normal_init

INIT_STD = 0.1
BCE_CLAMP = 1e-7


class ConfigError(ValueError):
    """A model configuration violates its invariants."""


def _power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class MasterConfig:
    input_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3)
    input_size: int = 64
    side_outputs: bool = True

    def validate(self):
        if self.input_channels not in (3, 4):
            raise ConfigError(f"input_channels must be 3 or 4, got {self.input_channels}")
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"bad stage_channels {self.stage_channels}")
        if len(self.convs_per_block) != len(self.stage_channels):
            raise ConfigError(
                f"convs_per_block has {len(self.convs_per_block)} entries for "
                f"{len(self.stage_channels)} stages")
        if any(k < 1 for k in self.convs_per_block):
            raise ConfigError(f"bad convs_per_block {self.convs_per_block}")
        if not _power_of_two(self.input_size):
            raise ConfigError(f"input_size must be a power of two, got {self.input_size}")
        blocks = len(self.stage_channels)
        if self.input_size < (1 << (blocks + 1)):
            raise ConfigError(
                f"input_size {self.input_size} leaves no bottleneck pixels for "
                f"{blocks} blocks (need >= {1 << (blocks + 1)})")


@dataclass(frozen=True)
class SubNetConfig:
    input_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3)
    fusion_stage: int = 3  # index of the master encoder stage whose output is fused

    def validate(self, master: MasterConfig, fusion: "FusionSpec"):
        if self.input_channels != 1:
            raise ConfigError(f"subnet input_channels must be 1, got {self.input_channels}")
        if not (0 <= self.fusion_stage < len(master.stage_channels)):
            raise ConfigError(
                f"fusion_stage {self.fusion_stage} out of range for "
                f"{len(master.stage_channels)} master stages")
        if len(self.stage_channels) < self.fusion_stage + 1:
            raise ConfigError("subnet has fewer stages than fusion_stage + 1")
        if len(self.convs_per_block) < self.fusion_stage + 1:
            raise ConfigError("subnet convs_per_block shorter than fusion_stage + 1")
        if fusion.mode != "concat":
            sub_c = self.stage_channels[self.fusion_stage]
            mast_c = master.stage_channels[self.fusion_stage]
            if sub_c != mast_c:
                raise ConfigError(
                    f"fusion mode {fusion.mode!r} needs matching channels at the fusion "
                    f"stage: subnet {sub_c} vs master {mast_c}")


@dataclass(frozen=True)
class FusionSpec:
    mode: str = "gate"  # gate | add | concat
    alpha: float = 1.0  # alpha = 0 disables the depth path (used by equivalence tests)

    def validate(self):
        if self.mode not in ("gate", "add", "concat"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.alpha < 0:
            raise ConfigError(f"fusion alpha must be non-negative, got {self.alpha}")


def compute_alpha(subnet_channels: int, master_channels: int) -> float:
    """Feature-map-count ratio used when the combination factor is 'auto'."""
    if subnet_channels <= 0 or master_channels <= 0:
        raise ValueError("channel counts must be positive")
    return subnet_channels / master_channels


# ---------------------------------------------------------------------------
# Layers


class Conv2d:
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True,
                 dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.w = truncated_normal_init((cout, cin, k, k), INIT_STD, rng, dtype,
                                       requires_grad=True)
        self.b = Tensor(np.zeros((1, cout, 1, 1), dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, self.stride, self.padding)

    def named_params(self, pre):
        yield pre + ".w", self.w
        if self.b is not None:
            yield pre + ".b", self.b

    def named_buffers(self, pre):
        return ()


class ConvTranspose2d:
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=True,
                 dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.padding = padding
        self.w = truncated_normal_init((cin, cout, k, k), INIT_STD, rng, dtype,
                                       requires_grad=True)
        self.b = Tensor(np.zeros((1, cout, 1, 1), dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return ops.transposed_conv2d(x, self.w, self.b, self.stride, self.padding)

    def named_params(self, pre):
        yield pre + ".w", self.w
        if self.b is not None:
            yield pre + ".b", self.b

    def named_buffers(self, pre):
        return ()


class BatchNorm2d:
    def __init__(self, c, dtype=DEFAULT_DTYPE, eps=1e-5, momentum=0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones((1, c, 1, 1), dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, c, 1, 1), dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype)
        self.running_var = np.ones(c, dtype)

    def __call__(self, x, training):
        # A frozen layer is a fixed feature extractor: it normalizes with its
        # stored statistics and stops updating them.
        train = training and not self.gamma.frozen
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, train, self.eps, self.momentum)

    def named_params(self, pre):
        yield pre + ".gamma", self.gamma
        yield pre + ".beta", self.beta

    def buffer_items(self, pre):
        yield pre + ".running_mean", self, "running_mean"
        yield pre + ".running_var", self, "running_var"


class _ConvBN:
    """3x3 conv (no bias) -> BN -> ReLU."""

    def __init__(self, cin, cout, rng, dtype):
        self.conv = Conv2d(cin, cout, 3, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype)

    def __call__(self, x, training):
        return ops.relu(self.bn(self.conv(x), training))

    def named_params(self, pre):
        yield from self.conv.named_params(pre + ".conv")
        yield from self.bn.named_params(pre + ".bn")

    def buffer_items(self, pre):
        yield from self.bn.buffer_items(pre + ".bn")


class EncoderBlock:
    def __init__(self, cin, cout, n_convs, rng, dtype):
        self.units = [_ConvBN(cin if i == 0 else cout, cout, rng, dtype)
                      for i in range(n_convs)]

    def __call__(self, x, training):
        for u in self.units:
            x = u(x, training)
        return x, ops.max_pool2d(x)

    def named_params(self, pre):
        for i, u in enumerate(self.units):
            yield from u.named_params(f"{pre}.c{i}")

    def buffer_items(self, pre):
        for i, u in enumerate(self.units):
            yield from u.buffer_items(f"{pre}.c{i}")


class DecoderBlock:
    """2x upsampling tconv, copy-crop concat with the encoder skip, conv-BN-ReLU,
    and an optional 1-channel linear side head upsampled to input resolution."""

    def __init__(self, cin, cskip, side_factor, rng, dtype, side):
        self.up = ConvTranspose2d(cin, cskip, 2, rng, stride=2, bias=False, dtype=dtype)
        self.fuse = _ConvBN(2 * cskip, cskip, rng, dtype)
        self.side = Conv2d(cskip, 1, 3, rng, dtype=dtype) if side else None
        self.side_up = None
        if side and side_factor > 1:
            self.side_up = ConvTranspose2d(1, 1, side_factor, rng, stride=side_factor,
                                           dtype=dtype)

    def __call__(self, x, skip, training):
        x = self.up(x)
        _, _, h, w = x.shape
        skip = ops.center_crop(skip, h, w)
        x = self.fuse(ops.concat_channels([x, skip]), training)
        side = None
        if self.side is not None:
            side = self.side(x)
            if self.side_up is not None:
                side = self.side_up(side)
        return x, side

    def named_params(self, pre):
        yield from self.up.named_params(pre + ".up")
        yield from self.fuse.named_params(pre + ".fuse")
        if self.side is not None:
            yield from self.side.named_params(pre + ".side")
        if self.side_up is not None:
            yield from self.side_up.named_params(pre + ".sideup")

    def buffer_items(self, pre):
        yield from self.fuse.buffer_items(pre + ".fuse")


class MasterNet:
    """RGB encoder-decoder with copy-crop skips and side-output pyramid."""

    def __init__(self, config: MasterConfig, rng: Rng, dtype=DEFAULT_DTYPE,
                 bottleneck_extra: int = 0, extra_after_stage: int | None = None):
        config.validate()
        self.config = config
        chans = config.stage_channels
        blocks = len(chans)
        self.enc = []
        cin = config.input_channels
        for i, (c, k) in enumerate(zip(chans, config.convs_per_block)):
            self.enc.append(EncoderBlock(cin, c, k, rng, dtype))
            cin = c
            if extra_after_stage == i and i != blocks - 1:
                cin += bottleneck_extra
        self.dec = []
        for i in reversed(range(blocks)):
            if i == blocks - 1:
                cdeep = chans[i] + (bottleneck_extra if extra_after_stage == blocks - 1 else 0)
            else:
                cdeep = chans[i + 1]
            self.dec.append(DecoderBlock(cdeep, chans[i], 1 << i, rng, dtype,
                                         config.side_outputs))
        final_in = blocks if config.side_outputs else chans[0]
        self.final = Conv2d(final_in, 1, 3, rng, dtype=dtype)

    def named_params(self, pre="master"):
        for i, b in enumerate(self.enc):
            yield from b.named_params(f"{pre}.enc{i}")
        for i, b in enumerate(self.dec):
            yield from b.named_params(f"{pre}.dec{i}")
        yield from self.final.named_params(f"{pre}.final")

    def buffer_items(self, pre="master"):
        for i, b in enumerate(self.enc):
            yield from b.buffer_items(f"{pre}.enc{i}")
        for i, b in enumerate(self.dec):
            yield from b.buffer_items(f"{pre}.dec{i}")


class SubNet:
    """Depth-only encoder mirroring the master block pattern up to the fusion stage."""

    def __init__(self, config: SubNetConfig, rng: Rng, dtype=DEFAULT_DTYPE):
        self.config = config
        self.enc = []
        cin = config.input_channels
        for i in range(config.fusion_stage + 1):
            c = config.stage_channels[i]
            self.enc.append(EncoderBlock(cin, c, config.convs_per_block[i], rng, dtype))
            cin = c

    def forward(self, depth: Tensor, training: bool) -> Tensor:
        dmin, dmax = float(depth.data.min()), float(depth.data.max())
        if dmin < 0.0 or dmax > 1.0:
            raise ValueError(
                f"depth values outside [0,1] (range [{dmin:.4g}, {dmax:.4g}]); "
                "preprocessing contract violated")
        h = depth
        for blk in self.enc:
            _, h = blk(h, training)
        return h

    def named_params(self, pre="subnet"):
        for i, b in enumerate(self.enc):
            yield from b.named_params(f"{pre}.enc{i}")

    def buffer_items(self, pre="subnet"):
        for i, b in enumerate(self.enc):
            yield from b.buffer_items(f"{pre}.enc{i}")


def fuse_features(i_o: Tensor, d_o: Tensor, spec: FusionSpec) -> Tensor:
    """Inject depth features into master features: gate, add, or channel concat."""
    if spec.mode in ("gate", "add"):
        return ops.scale_combine(i_o, d_o, spec.alpha, spec.mode)
    n, _, h, w = i_o.shape
    dn, _, dh, dw = d_o.shape
    if (dn, dh, dw) != (n, h, w):
        raise ShapeError(f"fuse_features: mismatched N/H/W {d_o.shape} vs {i_o.shape}")
    return ops.concat_channels([i_o, ops.scale(d_o, spec.alpha)])


class PDNet:
    """Master stream plus optional depth subnet, assembled per fusion spec.

    With ``subnet_config=None`` this is the plain master network (the
    RGB-only and 4-channel ablation variants).
    """

    def __init__(self, master_config: MasterConfig, subnet_config: SubNetConfig | None,
                 fusion: FusionSpec | None, rng: Rng, dtype=DEFAULT_DTYPE):
        master_config.validate()
        self.dtype = np.dtype(dtype)
        self.master_config = master_config
        self.subnet_config = subnet_config
        self.fusion = fusion
        extra = 0
        stage = None
        if subnet_config is not None:
            if fusion is None:
                raise ConfigError("a subnet needs a fusion spec")
            fusion.validate()
            subnet_config.validate(master_config, fusion)
            stage = subnet_config.fusion_stage
            if fusion.mode == "concat":
                extra = subnet_config.stage_channels[stage]
        # master params always come first, so master init is independent of
        # whether a subnet exists (alpha-off equivalence relies on this)
        self.master = MasterNet(master_config, rng.child(0), dtype,
                                bottleneck_extra=extra, extra_after_stage=stage)
        self.subnet = SubNet(subnet_config, rng.child(1), dtype) \
            if subnet_config is not None else None

    @property
    def fusion_stage(self) -> int | None:
        return self.subnet_config.fusion_stage if self.subnet_config else None

    def _check_input(self, rgb: Tensor, depth: Tensor | None):
        n, c, h, w = rgb.shape
        want = self.master_config.input_channels
        if c != want:
            raise ShapeError(f"expected {want}-channel input, got {c}")
        blocks = len(self.master_config.stage_channels)
        if h != w or h % (1 << blocks) or h < (1 << (blocks + 1)):
            raise ShapeError(
                f"input must be square, divisible by 2^{blocks} and >= "
                f"{1 << (blocks + 1)}, got {h}x{w}")
        if depth is not None:
            dn, dc, dh, dw = depth.shape
            if dc != 1:
                raise ShapeError(f"depth must have 1 channel, got {dc}")
            if (dn, dh, dw) != (n, h, w):
                raise ShapeError(f"depth resolution {depth.shape} does not match rgb {rgb.shape}")

    def forward(self, rgb: Tensor, depth: Tensor | None = None,
                training: bool = False) -> tuple[Tensor, list[Tensor]]:
        """Returns the saliency map S in (0,1) and the linear side outputs."""
        self._check_input(rgb, depth)
        if depth is not None and self.subnet is None:
            raise ShapeError("depth provided but this model has no subnet")
        h = rgb
        skips = []
        for i, blk in enumerate(self.master.enc):
            skip, h = blk(h, training)
            skips.append(skip)
            if depth is not None and i == self.fusion_stage:
                d_o = self.subnet.forward(depth, training)
                h = fuse_features(h, d_o, self.fusion)
        sides = []
        for blk, skip in zip(self.master.dec, reversed(skips)):
            h, side = blk(h, skip, training)
            if side is not None:
                sides.append(side)
        if self.master_config.side_outputs:
            s = ops.sigmoid(self.master.final(ops.concat_channels(sides)))
        else:
            s = ops.sigmoid(self.master.final(h))
        return s, sides

    def named_params(self):
        yield from self.master.named_params("master")
        if self.subnet is not None:
            yield from self.subnet.named_params("subnet")

    def named_buffers(self):
        """Yields (name, owner_layer, attribute) for BN running statistics."""
        items = list(self.master.buffer_items("master"))
        if self.subnet is not None:
            items += list(self.subnet.buffer_items("subnet"))
        return items

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups = {"master_encoder": [], "master_decoder": [], "subnet": []}
        for name, t in self.named_params():
            if name.startswith("master.enc"):
                groups["master_encoder"].append((name, t))
            elif name.startswith("subnet."):
                groups["subnet"].append((name, t))
            else:
                groups["master_decoder"].append((name, t))
        return groups

    def zero_grads(self):
        for _, t in self.named_params():
            t.zero_grad()


def freeze_prior(model: PDNet) -> PDNet:
    """Flag every master-encoder parameter frozen; idempotent."""
    for _, t in model.param_groups()["master_encoder"]:
        t.freeze()
    return model


# ---------------------------------------------------------------------------
# Losses


def bce_loss(pred: Tensor, target: Tensor, clamp: float = BCE_CLAMP) -> Tensor:
    """Pixel-wise binary cross entropy, normalized per image by W*H and
    averaged over the batch; log arguments clamped at ``clamp``."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: shape mismatch {pred.shape} vs {target.shape}")
    g = target.data
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("bce_loss: ground truth must be binary 0/1")
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    per = -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))
    out = np.full((1, 1, 1, 1), per.mean(), dtype=pred.data.dtype)

    t = _result(out, pred)
    if t.requires_grad:
        inv = 1.0 / per.size
        inside = (pred.data > clamp) & (pred.data < 1.0 - clamp)

        def bwd():
            if t.grad is None:
                return
            gout = p.dtype.type(float(t.grad.reshape(())) * inv)
            _acc(pred, gout * inside * (p - g) / (p * (1.0 - p)))

        _record(t, bwd)
    return t


def total_loss(s: Tensor, side_outputs: list[Tensor], target: Tensor,
               side_weight: float = 0.5) -> Tensor:
    """bce(S, G) plus side_weight times the mean BCE of the sigmoid'd side maps."""
    loss = bce_loss(s, target)
    if side_weight and side_outputs:
        acc = None
        for raw in side_outputs:
            term = bce_loss(ops.sigmoid(raw), target)
            acc = term if acc is None else ops.add(acc, term)
        loss = ops.add(loss, ops.scale(acc, side_weight / len(side_outputs)))
    return loss
