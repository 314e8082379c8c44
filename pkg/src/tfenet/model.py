"""Tubular feature fusion blocks and the TfeNet encoder-decoder.

Layers are small classes over a shared :class:`ParamStore`: ``forward``
caches what backward needs, ``backward`` accumulates parameter
gradients and returns the input gradient.  Single patch, no batch axis.

Architecture: each encoder level is a fusion block followed by 2x max
pooling; the deepest level acts as the bottleneck.  Each decoder level
upsamples, concatenates the skip connection and applies a fusion block,
except the final full-resolution level which uses a plain residual
block to keep the most expensive level cheap.  A 1x1x1 convolution and
a sigmoid produce the likelihood map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ArgumentError
from .geometry import Axis, KernelSpec
from .params import ParamStore


@dataclass(frozen=True)
class TfeNetConfig:
    """Network shape knobs.

    widths are channels per level, shallow to deep; k and q parameterise
    every direction-aware branch; group_supervision adds that many
    auxiliary decoder probability heads (0 disables them).
    """

    levels: int = 4
    widths: tuple[int, ...] = (8, 16, 32, 64)
    k: int = 7
    q: float = float(np.pi / 4)
    in_channels: int = 1
    final_block: str = "resconv"
    group_supervision: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ArgumentError(f"levels must be >= 2, got {self.levels}")
        if len(self.widths) != self.levels:
            raise ArgumentError(
                f"widths must have one entry per level: {len(self.widths)} != {self.levels}")
        if self.k % 2 == 0 or self.k < 1:
            raise ArgumentError(f"k must be odd and >= 1, got {self.k}")
        if self.final_block != "resconv":
            raise ArgumentError(f"unsupported final_block {self.final_block!r}")
        if not 0 <= self.group_supervision <= self.levels - 2:
            raise ArgumentError(
                f"group_supervision must be in [0, {self.levels - 2}]")

    def to_dict(self) -> dict:
        return {"levels": self.levels, "widths": list(self.widths), "k": self.k,
                "q": self.q, "in_channels": self.in_channels,
                "final_block": self.final_block,
                "group_supervision": self.group_supervision}

    @staticmethod
    def from_dict(d: dict) -> "TfeNetConfig":
        return TfeNetConfig(levels=int(d["levels"]), widths=tuple(d["widths"]),
                            k=int(d["k"]), q=float(d["q"]),
                            in_channels=int(d.get("in_channels", 1)),
                            final_block=d.get("final_block", "resconv"),
                            group_supervision=int(d.get("group_supervision", 0)))


# ---------------------------------------------------------------------------
# Elementary layers
# ---------------------------------------------------------------------------

class Conv3dLayer:
    def __init__(self, store, name, cin, cout, ksize, rng, bias=True,
                 pad_mode="zeros", lr_mult=1.0, zero_init=False):
        fan_in = cin * int(np.prod(ksize))
        if zero_init:
            w = np.zeros((cout, cin, *ksize))
        else:
            w = rng.standard_normal((cout, cin, *ksize)) * np.sqrt(2.0 / fan_in)
        self.w = store.add(f"{name}.weight", w, lr_multiplier=lr_mult)
        self.b = store.add(f"{name}.bias", np.zeros(cout),
                           lr_multiplier=lr_mult) if bias else None
        self.pad_mode = pad_mode
        self.cache = None

    def forward(self, x):
        y, self.cache = ops.conv3d_forward(
            x, self.w.value, None if self.b is None else self.b.value, self.pad_mode)
        return y

    def backward(self, dy):
        dx, dw, db = ops.conv3d_backward(dy, self.cache)
        self.w.grad += dw
        if self.b is not None:
            self.b.grad += db
        return dx


class InstanceNormLayer:
    def __init__(self, store, name, channels, lr_mult=1.0, eps=1e-5):
        self.g = store.add(f"{name}.gamma", np.ones(channels), lr_multiplier=lr_mult)
        self.s = store.add(f"{name}.shift", np.zeros(channels), lr_multiplier=lr_mult)
        self.eps = eps
        self.cache = None

    def forward(self, x):
        y, self.cache = ops.instance_norm_forward(x, self.g.value, self.s.value, self.eps)
        return y

    def backward(self, dy):
        dx, dg, ds = ops.instance_norm_backward(dy, self.cache)
        self.g.grad += dg
        self.s.grad += ds
        return dx


class ConvINReLU:
    """conv -> instance norm -> ReLU, the block used after every conv."""

    def __init__(self, store, name, cin, cout, ksize, rng, pad_mode="zeros",
                 lr_mult=1.0):
        self.conv = Conv3dLayer(store, f"{name}.conv", cin, cout, ksize, rng,
                                pad_mode=pad_mode, lr_mult=lr_mult)
        self.norm = InstanceNormLayer(store, f"{name}.norm", cout, lr_mult=lr_mult)
        self.mask = None

    def forward(self, x):
        y = self.norm.forward(self.conv.forward(x))
        y, self.mask = ops.relu_forward(y)
        return y

    def backward(self, dy):
        return self.conv.backward(self.norm.backward(ops.relu_backward(dy, self.mask)))


class AngleHead:
    """Per-voxel rotation angles Q = q * tanh(IN(conv3(x))), 4 channels.

    Conv weights and biases start at exactly 0, so a fresh head emits
    zero angles and the kernel starts straight.
    """

    def __init__(self, store, name, cin, q, rng, lr_mult=1.0):
        self.conv = Conv3dLayer(store, f"{name}.conv", cin, 4, (3, 3, 3), rng,
                                lr_mult=lr_mult, zero_init=True)
        self.norm = InstanceNormLayer(store, f"{name}.norm", 4, lr_mult=lr_mult)
        self.q = q
        self.tanh_cache = None

    def forward(self, x):
        t, self.tanh_cache = ops.tanh_forward(self.norm.forward(self.conv.forward(x)))
        return self.q * t

    def backward(self, dq):
        dt = ops.tanh_backward(dq * self.q, self.tanh_cache)
        return self.conv.backward(self.norm.backward(dt))


class DAConvLayer:
    """Direction-aware linear convolution with its own angle head."""

    def __init__(self, store, name, cin, cout, spec: KernelSpec, rng,
                 head_lr_mult=1.0):
        fan_in = cin * spec.taps
        w = rng.standard_normal((cout, cin, spec.taps)) * np.sqrt(2.0 / fan_in)
        self.w = store.add(f"{name}.weight", w)
        self.b = store.add(f"{name}.bias", np.zeros(cout))
        self.head = AngleHead(store, f"{name}.head", cin, spec.q, rng,
                              lr_mult=head_lr_mult)
        self.spec = spec
        self.cache = None

    def forward(self, x):
        q = self.head.forward(x)
        y, self.cache = ops.daconv_forward(x, self.w.value, self.b.value, q, self.spec)
        return y

    def forward_dense(self, x):
        """Straight-kernel twin: the same tap weights applied as a dense
        axis-aligned convolution with replicated borders (what the
        deformable path degenerates to at zero angles)."""
        k = self.spec.taps
        shape = {Axis.X: (1, 1, k), Axis.Y: (1, k, 1), Axis.Z: (k, 1, 1)}[self.spec.axis]
        w = self.w.value.reshape(self.w.value.shape[0], self.w.value.shape[1], *shape)
        y, _ = ops.conv3d_forward(x, w, self.b.value, pad_mode="edge")
        return y

    def backward(self, dy):
        dx, dw, db, dq = ops.daconv_backward(dy, self.cache)
        self.w.grad += dw
        self.b.grad += db
        return dx + self.head.backward(dq)


class DABranch:
    """DAConv -> instance norm -> ReLU."""

    def __init__(self, store, name, cin, cout, spec, rng, head_lr_mult=1.0):
        self.conv = DAConvLayer(store, f"{name}.conv", cin, cout, spec, rng,
                                head_lr_mult=head_lr_mult)
        self.norm = InstanceNormLayer(store, f"{name}.norm", cout)
        self.mask = None

    def forward(self, x, dense=False):
        y = self.conv.forward_dense(x) if dense else self.conv.forward(x)
        y = self.norm.forward(y)
        y, self.mask = ops.relu_forward(y)
        return y

    def backward(self, dy):
        return self.conv.backward(self.norm.backward(ops.relu_backward(dy, self.mask)))


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

class TffmBlock:
    """Tubular feature fusion: x/y/z direction-aware branches plus a
    dense 3x3x3 branch, concatenated, fused by a 3x3x3 conv, with a
    1x1x1 residual of the input added on."""

    def __init__(self, store, name, cin, cout, k, q, rng, head_lr_mult=1.0):
        spec = lambda ax: KernelSpec(axis=ax, taps=k, dilation=1, q=q)
        self.bx = DABranch(store, f"{name}.bx", cin, cout, spec(Axis.X), rng, head_lr_mult)
        self.by = DABranch(store, f"{name}.by", cin, cout, spec(Axis.Y), rng, head_lr_mult)
        self.bz = DABranch(store, f"{name}.bz", cin, cout, spec(Axis.Z), rng, head_lr_mult)
        self.bc = ConvINReLU(store, f"{name}.bc", cin, cout, (3, 3, 3), rng)
        self.fuse = ConvINReLU(store, f"{name}.fuse", 4 * cout, cout, (3, 3, 3), rng)
        self.res = ConvINReLU(store, f"{name}.res", cin, cout, (1, 1, 1), rng)
        self.cout = cout

    def forward(self, x, dense=False):
        parts = [self.bx.forward(x, dense), self.by.forward(x, dense),
                 self.bz.forward(x, dense), self.bc.forward(x)]
        fused = self.fuse.forward(np.concatenate(parts, axis=0))
        return fused + self.res.forward(x)

    def backward(self, dy):
        dx = self.res.backward(dy)
        df = self.fuse.backward(dy)
        c = self.cout
        dx += self.bx.backward(df[0 * c:1 * c])
        dx += self.by.backward(df[1 * c:2 * c])
        dx += self.bz.backward(df[2 * c:3 * c])
        dx += self.bc.backward(df[3 * c:4 * c])
        return dx


class ResConvBlock:
    """Two 3x3x3 convs plus a 1x1x1 residual, each with norm + ReLU."""

    def __init__(self, store, name, cin, cout, rng):
        self.c1 = ConvINReLU(store, f"{name}.c1", cin, cout, (3, 3, 3), rng)
        self.c2 = ConvINReLU(store, f"{name}.c2", cout, cout, (3, 3, 3), rng)
        self.res = ConvINReLU(store, f"{name}.res", cin, cout, (1, 1, 1), rng)

    def forward(self, x, dense=False):
        return self.c2.forward(self.c1.forward(x)) + self.res.forward(x)

    def backward(self, dy):
        return self.c1.backward(self.c2.backward(dy)) + self.res.backward(dy)


class DecoderUp:
    """2x trilinear upsample followed by a 3x3x3 conv + norm + ReLU."""

    def __init__(self, store, name, cin, cout, rng):
        self.conv = ConvINReLU(store, f"{name}", cin, cout, (3, 3, 3), rng)
        self.up_cache = None

    def forward(self, x):
        y, self.up_cache = ops.upsample2_forward(x)
        return self.conv.forward(y)

    def backward(self, dy):
        return ops.upsample2_backward(self.conv.backward(dy), self.up_cache)


# ---------------------------------------------------------------------------
# The network
# ---------------------------------------------------------------------------

class TfeNet:
    """Encoder-decoder segmentation network over direction-aware blocks.

    Angle heads in the encoder and bottleneck carry learning-rate
    multiplier 0.1; decoder heads train at the base rate.
    """

    def __init__(self, config: TfeNetConfig = TfeNetConfig(), seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        ws = config.widths
        levels = config.levels
        k, q = config.k, config.q

        self.encoder = []
        cin = config.in_channels
        for i in range(levels):
            name = f"enc{i}" if i < levels - 1 else "bot"
            self.encoder.append(TffmBlock(self.store, name, cin, ws[i], k, q, rng,
                                          head_lr_mult=0.1))
            cin = ws[i]

        self.ups = []
        self.decoder = []
        for i in range(levels - 2, -1, -1):
            self.ups.append(DecoderUp(self.store, f"dec{i}.up", ws[i + 1], ws[i], rng))
            if i == 0:
                block = ResConvBlock(self.store, f"dec{i}.block", 2 * ws[i], ws[i], rng)
            else:
                block = TffmBlock(self.store, f"dec{i}.block", 2 * ws[i], ws[i], k, q,
                                  rng, head_lr_mult=1.0)
            self.decoder.append(block)

        self.head = Conv3dLayer(self.store, "head", ws[0], 1, (1, 1, 1), rng)
        self.aux_heads = []
        for j in range(config.group_supervision):
            # auxiliary probability maps off intermediate decoder levels,
            # shallowest eligible level first
            self.aux_heads.append(Conv3dLayer(self.store, f"aux{j}",
                                              ws[j + 1], 1, (1, 1, 1), rng))
        self._sig_cache = None
        self._pool_caches = None
        self._skip_shapes = None
        self._aux_maps = []

    # -- plumbing ----------------------------------------------------------

    def required_multiple(self) -> int:
        return 2 ** (self.config.levels - 1)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[0] != self.config.in_channels:
            raise ArgumentError(
                f"input must be ({self.config.in_channels}, D, H, W), got {x.shape}")
        m = self.required_multiple()
        if any(s % m for s in x.shape[1:]):
            raise ArgumentError(
                f"spatial dims must be divisible by {m}, got {x.shape[1:]}")

    def parameter_count(self) -> int:
        return self.store.count()

    # -- forward/backward --------------------------------------------------

    def forward(self, x, dense=False):
        """Likelihood map (1, D, H, W) in (0, 1) for input (C, D, H, W).

        With ``dense=True`` every direction-aware conv runs its
        straight-kernel twin (angle heads bypassed); used to verify the
        zero-angle collapse.
        """
        x = np.ascontiguousarray(x, dtype=self.store.dtype)
        self._check_input(x)
        levels = self.config.levels
        skips = []
        self._pool_caches = []
        h = x
        for i in range(levels - 1):
            h = self.encoder[i].forward(h, dense)
            skips.append(h)
            h, pc = ops.maxpool2_forward(h)
            self._pool_caches.append(pc)
        h = self.encoder[levels - 1].forward(h, dense)

        self._aux_maps = []
        for j, (up, block) in enumerate(zip(self.ups, self.decoder)):
            h = up.forward(h)
            skip = skips[levels - 2 - j]
            h = block.forward(np.concatenate([skip, h], axis=0), dense)
            level = levels - 2 - j
            if level != 0 and level <= self.config.group_supervision:
                self._aux_maps.append((level, h))

        logits = self.head.forward(h)
        y, self._sig_cache = ops.sigmoid_forward(logits)
        self._skip_channels = [s.shape[0] for s in skips]
        return y

    def auxiliary_maps(self):
        """Full-resolution auxiliary probability maps (group supervision).

        Empty when group_supervision is 0.  Maps come from intermediate
        decoder levels, upsampled to input resolution.
        """
        out = []
        for level, feat in self._aux_maps:
            aux = self.aux_heads[level - 1]
            m, _ = ops.sigmoid_forward(aux.forward(feat))
            for _ in range(level):
                m, _ = ops.upsample2_forward(m)
            out.append(m)
        return out

    def backward(self, dprob):
        """Accumulate parameter gradients for upstream d(loss)/d(prob)."""
        dlogits = ops.sigmoid_backward(dprob.astype(self.store.dtype, copy=False),
                                       self._sig_cache)
        dh = self.head.backward(dlogits)
        levels = self.config.levels
        dskips = [None] * (levels - 1)
        for j in range(levels - 2, -1, -1):
            dcat = self.decoder[j].backward(dh)
            level = levels - 2 - j
            c = self._skip_channels[level]
            dskips[level] = dcat[:c]
            dh = self.ups[j].backward(dcat[c:])
        dh = self.encoder[levels - 1].backward(dh)
        for i in range(levels - 2, -1, -1):
            dh = ops.maxpool2_backward(dh, self._pool_caches[i])
            dh += dskips[i]
            dh = self.encoder[i].backward(dh)
        return dh
