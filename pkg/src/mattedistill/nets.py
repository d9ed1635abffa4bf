"""Teacher and student matting networks plus their attention components.

Both networks share one encoder-decoder skeleton and differ only in the
first convolution's input channels: the teacher sees RGB plus a trimap
plane (4), the student sees RGB alone (3).  The encoder's four stage
outputs are the feature taps the distillation losses consume.

Also defined here: the global-context block (softmax-pooled context,
bottleneck transform, residual add) and the spatial-attention mask
(channel avg/max pooling, temperature, 7x7 conv, spatial softmax).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, parameter, conv2d, relu, clamp, concat,
                     layer_norm, softmax, channel_avg, channel_max,
                     upsample_bilinear_x2)

__all__ = [
    "ENC_WIDTHS",
    "DEC_WIDTHS",
    "ConvParams",
    "GcParams",
    "AttnParams",
    "NetParams",
    "init_conv",
    "init_gc_params",
    "init_attn_params",
    "init_net_params",
    "widen_input",
    "gc_block",
    "spatial_attention",
    "encoder_taps",
    "net_forward",
    "student_forward",
    "teacher_forward",
]

ENC_WIDTHS = (16, 32, 64, 64)
DEC_WIDTHS = (64, 64, 32, 16)  # encoder widths mirrored
GC_RATIO = 4


def _kaiming_uniform(rng, out_ch, in_ch, k):
    """Uniform(-b, b) with b = sqrt(6 / fan_in), fan_in = in_ch * k * k."""
    bound = np.sqrt(6.0 / (in_ch * k * k))
    return rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def init_conv(rng, out_ch, in_ch, k, zero=False):
    if zero:
        w = np.zeros((out_ch, in_ch, k, k))
    else:
        w = _kaiming_uniform(rng, out_ch, in_ch, k)
    return ConvParams(w=parameter(w), b=parameter(np.zeros(out_ch)))


@dataclass
class GcParams:
    """Global-context block parameters for a C-channel feature map."""

    wk: ConvParams   # C -> 1 attention logits
    wv1: ConvParams  # C -> C/r bottleneck
    ln_gamma: Tensor
    ln_beta: Tensor
    wv2: ConvParams  # C/r -> C, zero-initialized so the block starts as identity
    channels: int

    def named(self, prefix):
        out = {}
        out.update(self.wk.named(f"{prefix}.wk"))
        out.update(self.wv1.named(f"{prefix}.wv1"))
        out[f"{prefix}.ln.gamma"] = self.ln_gamma
        out[f"{prefix}.ln.beta"] = self.ln_beta
        out.update(self.wv2.named(f"{prefix}.wv2"))
        return out


def init_gc_params(rng, channels):
    if channels % GC_RATIO:
        raise ValueError(f"channel count {channels} not divisible by ratio {GC_RATIO}")
    mid = channels // GC_RATIO
    return GcParams(
        wk=init_conv(rng, 1, channels, 1),
        wv1=init_conv(rng, mid, channels, 1),
        ln_gamma=parameter(np.ones(mid)),
        ln_beta=parameter(np.zeros(mid)),
        wv2=init_conv(rng, channels, mid, 1, zero=True),
        channels=channels,
    )


@dataclass
class AttnParams:
    """Spatial-attention mask parameters: 7x7 conv over pooled planes."""

    conv7: ConvParams  # 2 -> 1
    temperature: float

    def named(self, prefix):
        return self.conv7.named(f"{prefix}.conv7")


def init_attn_params(rng, temperature=1.0):
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return AttnParams(conv7=init_conv(rng, 1, 2, 7), temperature=float(temperature))


@dataclass
class NetParams:
    """Encoder-decoder parameters; ``in_channels`` is 4 (teacher) or 3."""

    enc: list   # 4 stages of (stride-1 conv, stride-2 conv)
    dec: list   # 4 post-upsample convs
    head: ConvParams
    in_channels: int

    def named(self, prefix="net"):
        out = {}
        for n, (a, b) in enumerate(self.enc, start=1):
            out.update(a.named(f"{prefix}.enc{n}a"))
            out.update(b.named(f"{prefix}.enc{n}b"))
        for n, c in enumerate(self.dec, start=1):
            out.update(c.named(f"{prefix}.dec{n}"))
        out.update(self.head.named(f"{prefix}.head"))
        return out


def init_net_params(rng, in_channels):
    """Draw all parameters in a fixed order from one RNG (deterministic)."""
    enc = []
    prev = in_channels
    for width in ENC_WIDTHS:
        a = init_conv(rng, width, prev, 3)
        b = init_conv(rng, width, width, 3)
        enc.append((a, b))
        prev = width
    dec = []
    for width in DEC_WIDTHS:
        dec.append(init_conv(rng, width, prev, 3))
        prev = width
    head = init_conv(rng, 1, prev, 1)
    return NetParams(enc=enc, dec=dec, head=head, in_channels=in_channels)


def widen_input(params: NetParams, extra: int = 1) -> NetParams:
    """Append zero-initialized input planes to the first conv.

    This is how a trimap-fed teacher is built on top of the plain RGB
    init: both nets share every weight draw, and the extra plane starts
    inert (the widened net computes the same function as the original
    until training moves the new column off zero).  Mutates and returns
    ``params``.
    """
    a, b = params.enc[0]
    w = a.w.data
    col = np.zeros((w.shape[0], extra) + w.shape[2:])
    params.enc[0] = (ConvParams(w=parameter(np.concatenate([w, col], axis=1)),
                                b=a.b), b)
    params.in_channels += extra
    return params


# -- blocks -------------------------------------------------------------------


def gc_block(feat: Tensor, p: GcParams) -> Tensor:
    """Residual global-context transform.

    Attention logits from a 1x1 conv are softmaxed over all spatial
    positions; the attention-weighted sum of features gives a per-image
    context vector, which passes through the bottleneck
    (1x1 conv, layer norm, relu, 1x1 conv) and is added back to every
    position.
    """
    if feat.data.ndim != 4 or feat.data.shape[1] != p.channels:
        raise ValueError(f"feature shape {feat.shape} does not match "
                         f"{p.channels}-channel block")
    attn = softmax(conv2d(feat, p.wk.w, p.wk.b), axis="spatial")
    ctx = (attn * feat).sum(axis=(2, 3), keepdims=True)
    z = conv2d(ctx, p.wv1.w, p.wv1.b)
    z = relu(layer_norm(z, p.ln_gamma, p.ln_beta))
    z = conv2d(z, p.wv2.w, p.wv2.b)
    return feat + z


def spatial_attention(feat: Tensor, p: AttnParams) -> Tensor:
    """Nx1xHxW attention distribution over spatial positions.

    Channel average and channel max planes are stacked, divided by the
    temperature, convolved 7x7, and softmaxed over the full spatial
    extent, so each sample's mask sums to exactly 1.
    """
    if p.temperature <= 0:
        raise ValueError("temperature must be > 0")
    pooled = concat([channel_avg(feat), channel_max(feat)], axis=1)
    logits = conv2d(pooled * (1.0 / p.temperature), p.conv7.w, p.conv7.b, pad=3)
    return softmax(logits, axis="spatial")


# -- forwards -----------------------------------------------------------------


def encoder_taps(x: Tensor, params: NetParams):
    """The four encoder stage outputs, without running the decoder."""
    n, c, h, w = x.data.shape
    if c != params.in_channels:
        raise ValueError(f"input has {c} channels, network expects "
                         f"{params.in_channels}")
    if h % 16 or w % 16:
        raise ValueError(f"spatial dims must be divisible by 16, got {h}x{w}")
    taps = []
    cur = x
    for a, b in params.enc:
        cur = relu(conv2d(cur, a.w, a.b, stride=1, pad=1))
        cur = relu(conv2d(cur, b.w, b.b, stride=2, pad=1))
        taps.append(cur)
    return taps


def net_forward(x: Tensor, params: NetParams):
    """Run the shared skeleton; returns (alpha in [0,1], 4 encoder taps)."""
    taps = encoder_taps(x, params)
    cur = taps[-1]
    for c_ in params.dec:
        cur = relu(conv2d(upsample_bilinear_x2(cur), c_.w, c_.b, stride=1, pad=1))
    alpha = clamp(conv2d(cur, params.head.w, params.head.b), 0.0, 1.0)
    return alpha, taps


def student_forward(rgb: Tensor, params: NetParams):
    """Trimap-free forward: RGB in, alpha plus encoder taps out."""
    if params.in_channels != 3:
        raise ValueError("student parameters must have 3 input channels")
    return net_forward(rgb, params)


def teacher_forward(rgb: Tensor, trimap: Tensor, params: NetParams):
    """Privileged forward: the trimap rides along as a 4th input plane."""
    if params.in_channels != 4:
        raise ValueError("teacher parameters must have 4 input channels")
    if trimap.data.shape[1] != 1 or trimap.data.shape[-2:] != rgb.data.shape[-2:]:
        raise ValueError(f"trimap shape {trimap.shape} does not match rgb "
                         f"{rgb.shape}")
    return net_forward(concat([rgb, trimap], axis=1), params)
