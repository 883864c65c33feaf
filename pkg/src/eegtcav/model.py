"""Linear Head BENDR: five-stage convolutional classifier in numpy.

Stages, each followed by an activation capture point (bottleneck):

1. encoder - six strided conv blocks (conv, group norm, GELU)
2. encoding augment - time masking and channel drop (train only), then a
   grouped temporal convolution whose GELU output is added back
3. summarizer - adaptive average pooling into four segments, flattened
4. extended classifier - linear, dropout, ReLU, batch norm
5. classifier - linear layer producing class logits

Forward and backward passes are written out per stage; all arithmetic runs
in float64 while parameters are stored as float32.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import (
    FormatError,
    InputTooShortError,
    ShapeError,
    TrainingDegenerateError,
)

logger = logging.getLogger(__name__)

GN_EPS = 1e-5
BN_EPS = 1e-5


class Bottleneck(str, Enum):
    ENCODER = "encoder"
    ENCODING_AUGMENT = "encoding_augment"
    SUMMARIZER = "summarizer"
    EXTENDED_CLASSIFIER = "extended_classifier"
    CLASSIFIER = "classifier"

    @property
    def index(self) -> int:
        return list(Bottleneck).index(self)

    @classmethod
    def parse(cls, name) -> "Bottleneck":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        for b in cls:
            if key in (b.value, b.name.lower()):
                return b
        raise ValueError(f"unknown bottleneck {name!r}")


BOTTLENECKS = tuple(Bottleneck)


@dataclass(frozen=True)
class LhbConfig:
    in_channels: int = 20
    encoder_dim: int = 512
    conv_strides: tuple = (3, 2, 2, 2, 2, 2)
    conv_kernels: tuple = (3, 2, 2, 2, 2, 2)
    mask_rate: float = 0.10
    channel_drop_rate: float = 0.10
    pool_segments: int = 4
    hidden_dim: int = 512
    num_classes: int = 2
    norm_groups: int = 0  # 0 -> encoder_dim // 2
    context_kernel: int = 25
    context_groups: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "conv_strides", tuple(self.conv_strides))
        object.__setattr__(self, "conv_kernels", tuple(self.conv_kernels))
        if not self.norm_groups:
            object.__setattr__(self, "norm_groups", max(self.encoder_dim // 2, 1))
        if math.prod(self.conv_strides) != 96:
            raise ValueError(f"conv strides must multiply to 96, got {self.conv_strides}")
        if len(self.conv_strides) != len(self.conv_kernels):
            raise ValueError("one kernel size per conv stride")
        if any(k < s for k, s in zip(self.conv_kernels, self.conv_strides)):
            raise ValueError("kernels shorter than their stride skip input samples")
        for name in ("in_channels", "encoder_dim", "pool_segments", "hidden_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.encoder_dim % self.groups != 0:
            raise ValueError("encoder_dim must be divisible by norm_groups")
        if self.encoder_dim % self.context_groups != 0:
            raise ValueError("encoder_dim must be divisible by context_groups")

    @property
    def groups(self) -> int:
        return self.norm_groups

    @property
    def downsample(self) -> int:
        return math.prod(self.conv_strides)

    @classmethod
    def tiny(cls, **overrides) -> "LhbConfig":
        base = dict(encoder_dim=16, hidden_dim=8, context_groups=4, context_kernel=5, norm_groups=8)
        base.update(overrides)
        return cls(**base)

    def encoder_steps(self, n_samples: int) -> int:
        t = n_samples
        for k, s in zip(self.conv_kernels, self.conv_strides):
            if t < k:
                return 0
            t = (t - k) // s + 1
        return t

    def activation_size(self, bottleneck, n_samples: int) -> int:
        b = Bottleneck.parse(bottleneck)
        if b in (Bottleneck.ENCODER, Bottleneck.ENCODING_AUGMENT):
            return self.encoder_dim * self.encoder_steps(n_samples)
        if b is Bottleneck.SUMMARIZER:
            return self.encoder_dim * self.pool_segments
        if b is Bottleneck.EXTENDED_CLASSIFIER:
            return self.hidden_dim
        return self.num_classes


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


def param_shapes(cfg: LhbConfig) -> dict:
    shapes = {}
    cin = cfg.in_channels
    d = cfg.encoder_dim
    for i, k in enumerate(cfg.conv_kernels):
        shapes[f"enc.{i}.kernel"] = (d, cin, k)
        shapes[f"enc.{i}.bias"] = (d,)
        shapes[f"enc.{i}.gn_scale"] = (d,)
        shapes[f"enc.{i}.gn_shift"] = (d,)
        cin = d
    shapes["aug.mask_token"] = (d,)
    shapes["aug.context_kernel"] = (d, d // cfg.context_groups, cfg.context_kernel)
    shapes["aug.context_bias"] = (d,)
    shapes["ext.weight"] = (d * cfg.pool_segments, cfg.hidden_dim)
    shapes["ext.bias"] = (cfg.hidden_dim,)
    shapes["ext.bn_scale"] = (cfg.hidden_dim,)
    shapes["ext.bn_shift"] = (cfg.hidden_dim,)
    shapes["ext.bn_mean"] = (cfg.hidden_dim,)
    shapes["ext.bn_var"] = (cfg.hidden_dim,)
    shapes["cls.weight"] = (cfg.hidden_dim, cfg.num_classes)
    shapes["cls.bias"] = (cfg.num_classes,)
    return shapes


BUFFERS = ("ext.bn_mean", "ext.bn_var")


@dataclass
class LhbWeights:
    config: LhbConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        missing = set(shapes) - set(self.params)
        if missing:
            raise ShapeError(f"missing tensors: {sorted(missing)}")
        for name, shape in shapes.items():
            arr = np.asarray(self.params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name}: non-finite values")
            self.params[name] = arr

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name]

    def copy(self) -> "LhbWeights":
        return LhbWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def equals(self, other: "LhbWeights") -> bool:
        return (
            self.config == other.config
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def init_weights(cfg: LhbConfig, seed: int = 0) -> LhbWeights:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("gn_scale", "bn_scale", "bn_var")):
            params[name] = np.ones(shape)
        elif name.endswith(("bias", "gn_shift", "bn_shift", "bn_mean")):
            params[name] = np.zeros(shape)
        elif name == "aug.mask_token":
            params[name] = rng.normal(0.0, 0.5, shape)
        elif name == "aug.context_kernel":
            fan_in = shape[1] * shape[2]
            params[name] = rng.normal(0.0, 0.5 / math.sqrt(fan_in), shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("enc.") else shape[0]
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    return LhbWeights(cfg, params)


# --------------------------------------------------------------------------
# Layer primitives: each forward returns (output, cache)
# --------------------------------------------------------------------------


def gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def conv1d_forward(x, w, b, stride):
    bsz, cin, length = x.shape
    dout, _, k = w.shape
    steps = (length - k) // stride + 1
    cols = sliding_window_view(x, k, axis=2)[:, :, : stride * (steps - 1) + 1 : stride]
    cols2d = cols.transpose(0, 2, 1, 3).reshape(bsz * steps, cin * k)
    y = cols2d @ w.reshape(dout, cin * k).T + b
    return y.reshape(bsz, steps, dout).transpose(0, 2, 1), (cols2d, x.shape, stride)


def conv1d_backward(dy, w, cache):
    cols2d, xshape, stride = cache
    bsz, cin, length = xshape
    dout, _, k = w.shape
    steps = dy.shape[2]
    dy2d = dy.transpose(0, 2, 1).reshape(bsz * steps, dout)
    dw = (dy2d.T @ cols2d).reshape(w.shape)
    db = dy2d.sum(axis=0)
    dcols = (dy2d @ w.reshape(dout, cin * k)).reshape(bsz, steps, cin, k)
    dx = np.zeros(xshape)
    span = stride * (steps - 1) + 1
    for j in range(k):
        dx[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dx, dw, db


def group_norm_forward(x, scale, shift, groups):
    bsz, ch, steps = x.shape
    xg = x.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    y = xhat * scale[None, :, None] + shift[None, :, None]
    return y, (xhat, inv, groups)


def group_norm_backward(dy, scale, cache):
    xhat, inv, groups = cache
    bsz, ch, steps = dy.shape
    dscale = (dy * xhat).sum(axis=(0, 2))
    dshift = dy.sum(axis=(0, 2))
    dxhat = (dy * scale[None, :, None]).reshape(bsz, groups, -1)
    xh = xhat.reshape(bsz, groups, -1)
    n = xh.shape[2]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True))
    return dx.reshape(dy.shape), dscale, dshift


def grouped_conv_forward(x, w, b, groups):
    """Stride-1 'same' grouped convolution along time."""
    bsz, ch, steps = x.shape
    dout, cg, k = w.shape
    dg = dout // groups
    left = k // 2
    xp = np.pad(x, [(0, 0), (0, 0), (left, k - 1 - left)])
    cols = sliding_window_view(xp, k, axis=2)  # [B, C, T, K]
    y = np.empty((bsz, dout, steps))
    col_blocks = []
    for g in range(groups):
        cols_g = cols[:, g * cg : (g + 1) * cg].transpose(0, 2, 1, 3).reshape(bsz * steps, cg * k)
        w_g = w[g * dg : (g + 1) * dg].reshape(dg, cg * k)
        y[:, g * dg : (g + 1) * dg] = (cols_g @ w_g.T).reshape(bsz, steps, dg).transpose(0, 2, 1)
        col_blocks.append(cols_g)
    y += b[None, :, None]
    return y, (col_blocks, x.shape, groups)


def grouped_conv_backward(dy, w, cache):
    col_blocks, xshape, groups = cache
    bsz, ch, steps = xshape
    dout, cg, k = w.shape
    dg = dout // groups
    left = k // 2
    dw = np.empty(w.shape)
    dxp = np.zeros((bsz, ch, steps + k - 1))
    for g in range(groups):
        dy_g = dy[:, g * dg : (g + 1) * dg].transpose(0, 2, 1).reshape(bsz * steps, dg)
        w_g = w[g * dg : (g + 1) * dg].reshape(dg, cg * k)
        dw[g * dg : (g + 1) * dg] = (dy_g.T @ col_blocks[g]).reshape(dg, cg, k)
        dcols = (dy_g @ w_g).reshape(bsz, steps, cg, k).transpose(0, 2, 1, 3)
        block = dxp[:, g * cg : (g + 1) * cg]
        for j in range(k):
            block[:, :, j : j + steps] += dcols[:, :, :, j]
    db = dy.sum(axis=(0, 2))
    return dxp[:, :, left : left + steps], dw, db


def pool_bounds(steps: int, segments: int):
    return [
        (math.floor(i * steps / segments), math.ceil((i + 1) * steps / segments))
        for i in range(segments)
    ]


def adaptive_pool_forward(x, segments):
    bounds = pool_bounds(x.shape[2], segments)
    y = np.stack([x[:, :, a:b].mean(axis=2) for a, b in bounds], axis=2)
    return y.reshape(x.shape[0], -1), (x.shape, bounds)


def adaptive_pool_backward(dy, cache):
    xshape, bounds = cache
    bsz, ch, _ = xshape
    dy = dy.reshape(bsz, ch, len(bounds))
    dx = np.zeros(xshape)
    for i, (a, b) in enumerate(bounds):
        dx[:, :, a:b] += dy[:, :, i : i + 1] / (b - a)
    return dx


# --------------------------------------------------------------------------
# The network
# --------------------------------------------------------------------------


def _p(weights, name):
    return weights.params[name].astype(np.float64)


def sample_augment_masks(rng, cfg: LhbConfig, batch: int, steps: int):
    """Train-mode draws: time steps replaced by the mask token and kept
    feature channels (True = keep)."""
    time_mask = rng.random((batch, steps)) < cfg.mask_rate
    keep = rng.random((batch, cfg.encoder_dim)) >= cfg.channel_drop_rate
    return time_mask, keep


def _check_input(cfg, x):
    if x.ndim != 3:
        raise ShapeError(f"expected [batch x channels x samples], got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")
    if cfg.encoder_steps(x.shape[2]) < 1:
        raise InputTooShortError(
            f"{x.shape[2]} samples is shorter than one encoder step ({cfg.downsample})"
        )


class _Pass:
    """One forward pass with caches kept for the backward sweep."""

    def __init__(self, weights: LhbWeights, x, train=False, rng=None):
        self.w = weights
        self.cfg = cfg = weights.config
        self.train = train
        x = np.asarray(x, dtype=np.float64)
        _check_input(cfg, x)
        self.caches = {}
        acts = {}

        h = x
        for i, stride in enumerate(cfg.conv_strides):
            conv, c_conv = conv1d_forward(h, _p(weights, f"enc.{i}.kernel"), _p(weights, f"enc.{i}.bias"), stride)
            normed, c_gn = group_norm_forward(conv, _p(weights, f"enc.{i}.gn_scale"), _p(weights, f"enc.{i}.gn_shift"), cfg.groups)
            h = gelu(normed)
            self.caches[f"enc.{i}"] = (c_conv, c_gn, normed)
        acts[Bottleneck.ENCODER] = h
        bsz, dim, steps = h.shape

        z = h
        time_mask = keep = None
        if train:
            time_mask, keep = sample_augment_masks(rng, cfg, bsz, steps)
            z = np.where(time_mask[:, None, :], _p(weights, "aug.mask_token")[None, :, None], z)
            z = z * (keep / (1.0 - cfg.channel_drop_rate))[:, :, None]
        ctx, c_ctx = grouped_conv_forward(z, _p(weights, "aug.context_kernel"), _p(weights, "aug.context_bias"), cfg.context_groups)
        aug = z + gelu(ctx)
        self.caches["aug"] = (time_mask, keep, ctx, c_ctx)
        acts[Bottleneck.ENCODING_AUGMENT] = aug

        pooled, c_pool = adaptive_pool_forward(aug, cfg.pool_segments)
        self.caches["pool"] = c_pool
        acts[Bottleneck.SUMMARIZER] = pooled

        ext, logits, c_tail = _tail_forward(weights, pooled, train, rng)
        self.caches["tail"] = c_tail
        acts[Bottleneck.EXTENDED_CLASSIFIER] = ext
        acts[Bottleneck.CLASSIFIER] = logits
        self.acts = acts
        self.logits = logits

    def flat(self, bottleneck) -> np.ndarray:
        a = self.acts[Bottleneck.parse(bottleneck)]
        return a.reshape(a.shape[0], -1)

    def backward(self, dlogits, stop_at=None, param_grads=False):
        """Propagate ``dlogits`` back; returns the gradient w.r.t. the
        activation at ``stop_at`` (flattened), or the parameter gradients."""
        cfg, w = self.cfg, self.w
        stop = Bottleneck.parse(stop_at) if stop_at is not None else None
        grads = {}
        if stop is Bottleneck.CLASSIFIER:
            return np.asarray(dlogits, dtype=np.float64).copy()

        dext, dpooled = _tail_backward(w, dlogits, self.caches["tail"], grads, stop)
        if stop is Bottleneck.EXTENDED_CLASSIFIER:
            return dext
        if stop is Bottleneck.SUMMARIZER:
            return dpooled

        daug = adaptive_pool_backward(dpooled, self.caches["pool"])
        if stop is Bottleneck.ENCODING_AUGMENT:
            return daug.reshape(daug.shape[0], -1)

        time_mask, keep, ctx, c_ctx = self.caches["aug"]
        dctx = daug * gelu_grad(ctx)
        dz_ctx, grads["aug.context_kernel"], grads["aug.context_bias"] = grouped_conv_backward(
            dctx, _p(w, "aug.context_kernel"), c_ctx
        )
        dz = daug + dz_ctx
        if self.train:
            dz = dz * (keep / (1.0 - cfg.channel_drop_rate))[:, :, None]
            grads["aug.mask_token"] = np.where(time_mask[:, None, :], dz, 0.0).sum(axis=(0, 2))
            dz = np.where(time_mask[:, None, :], 0.0, dz)
        else:
            grads["aug.mask_token"] = np.zeros(cfg.encoder_dim)
        if stop is Bottleneck.ENCODER:
            return dz.reshape(dz.shape[0], -1)

        dh = dz
        for i in reversed(range(len(cfg.conv_strides))):
            c_conv, c_gn, normed = self.caches[f"enc.{i}"]
            dnormed = dh * gelu_grad(normed)
            dconv, grads[f"enc.{i}.gn_scale"], grads[f"enc.{i}.gn_shift"] = group_norm_backward(
                dnormed, _p(w, f"enc.{i}.gn_scale"), c_gn
            )
            dh, grads[f"enc.{i}.kernel"], grads[f"enc.{i}.bias"] = conv1d_backward(
                dconv, _p(w, f"enc.{i}.kernel"), c_conv
            )
        grads["input"] = dh
        return grads


def _tail_forward(weights, pooled, train, rng, batch_stats=None):
    cfg = weights.config
    pre = pooled @ _p(weights, "ext.weight") + _p(weights, "ext.bias")
    drop = None
    if train and cfg.dropout > 0:
        drop = (rng.random(pre.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        pre_d = pre * drop
    else:
        pre_d = pre
    r = np.maximum(pre_d, 0.0)
    use_batch = train and r.shape[0] > 1
    if use_batch:
        mean, var = r.mean(axis=0), r.var(axis=0)
    else:
        mean, var = _p(weights, "ext.bn_mean"), _p(weights, "ext.bn_var")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    rhat = (r - mean) * inv
    ext = rhat * _p(weights, "ext.bn_scale") + _p(weights, "ext.bn_shift")
    logits = ext @ _p(weights, "cls.weight") + _p(weights, "cls.bias")
    return ext, logits, (pooled, pre, drop, pre_d, rhat, inv, use_batch, ext)


def _tail_backward(weights, dlogits, cache, grads, stop):
    pooled, pre, drop, pre_d, rhat, inv, use_batch, ext = cache
    dlogits = np.asarray(dlogits, dtype=np.float64)
    grads["cls.weight"] = ext.T @ dlogits
    grads["cls.bias"] = dlogits.sum(axis=0)
    dext = dlogits @ _p(weights, "cls.weight").T
    if stop is Bottleneck.EXTENDED_CLASSIFIER:
        return dext, None
    grads["ext.bn_scale"] = (dext * rhat).sum(axis=0)
    grads["ext.bn_shift"] = dext.sum(axis=0)
    drhat = dext * _p(weights, "ext.bn_scale")
    if use_batch:
        n = rhat.shape[0]
        dr = inv / n * (n * drhat - drhat.sum(axis=0) - rhat * (drhat * rhat).sum(axis=0))
    else:
        dr = drhat * inv
    dpre_d = dr * (pre_d > 0)
    dpre = dpre_d * drop if drop is not None else dpre_d
    grads["ext.weight"] = pooled.T @ dpre
    grads["ext.bias"] = dpre.sum(axis=0)
    dpooled = dpre @ _p(weights, "ext.weight").T
    return dext, dpooled


def _as_batch(windows_or_array):
    if isinstance(windows_or_array, np.ndarray):
        x = windows_or_array
        return x[None] if x.ndim == 2 else x
    items = list(windows_or_array) if not hasattr(windows_or_array, "data") else [windows_or_array]
    return np.stack([np.asarray(getattr(w, "data", w)) for w in items])


def forward(weights: LhbWeights, batch, mode: str = "eval", rng=None):
    """Run the model; returns ``(logits, activations)``.

    ``activations`` maps each :class:`Bottleneck` to a [batch x size]
    matrix. Train mode needs ``rng`` (a numpy Generator) for masking,
    channel drop and dropout.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng()
    run = _Pass(weights, _as_batch(batch), train=train, rng=rng)
    return run.logits, {b: run.flat(b) for b in BOTTLENECKS}


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bottleneck_gradients(weights: LhbWeights, batch, bottleneck, k: int) -> np.ndarray:
    """Per-example gradient of the class-``k`` logit with respect to the
    flattened bottleneck activation, eval mode. Shape [batch x size]."""
    b = Bottleneck.parse(bottleneck)
    if not 0 <= k < weights.config.num_classes:
        raise IndexError(f"class index {k} out of range for {weights.config.num_classes} classes")
    run = _Pass(weights, _as_batch(batch), train=False)
    dlogits = np.zeros_like(run.logits)
    dlogits[:, k] = 1.0
    grad = run.backward(dlogits, stop_at=b)
    return grad.reshape(grad.shape[0], -1)


def grad_wrt_bottleneck(weights: LhbWeights, window, bottleneck, k: int) -> np.ndarray:
    return bottleneck_gradients(weights, _as_batch(window)[:1], bottleneck, k)[0]


def head_logits(weights: LhbWeights, bottleneck, activations, n_samples=None) -> np.ndarray:
    """Eval-mode logits computed from a bottleneck activation onwards.

    For the encoder and encoding-augment bottlenecks ``n_samples`` (the
    input length) or a 3-d activation is needed to recover the time axis.
    """
    b = Bottleneck.parse(bottleneck)
    cfg = weights.config
    a = np.asarray(activations, dtype=np.float64)
    if b is Bottleneck.CLASSIFIER:
        return a.copy()
    if b is Bottleneck.EXTENDED_CLASSIFIER:
        return a @ _p(weights, "cls.weight") + _p(weights, "cls.bias")
    if b is Bottleneck.SUMMARIZER:
        return _tail_forward(weights, a, False, None)[1]
    if a.ndim == 2:
        if n_samples is None:
            raise ShapeError("n_samples is required to unflatten encoder activations")
        a = a.reshape(a.shape[0], cfg.encoder_dim, cfg.encoder_steps(n_samples))
    if b is Bottleneck.ENCODER:
        ctx, _ = grouped_conv_forward(a, _p(weights, "aug.context_kernel"), _p(weights, "aug.context_bias"), cfg.context_groups)
        a = a + gelu(ctx)
    pooled, _ = adaptive_pool_forward(a, cfg.pool_segments)
    return _tail_forward(weights, pooled, False, None)[1]


# --------------------------------------------------------------------------
# Fine-tuning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FineTuneHyper:
    epochs: int = 30
    batch_size: int = 80
    learning_rate: float = 1e-4
    seed: int = 0


def cross_entropy(logits, labels) -> float:
    p = softmax(logits)
    return float(-np.mean(np.log(np.clip(p[np.arange(len(labels)), labels], 1e-300, None))))


def recalibrate_batch_norm(weights: LhbWeights, x, chunk: int = 256) -> None:
    """Set batch-norm statistics to the eval-mode population statistics of
    the post-ReLU features over ``x`` (in place)."""
    feats = []
    for i in range(0, len(x), chunk):
        run_x = np.asarray(x[i : i + chunk], dtype=np.float64)
        pooled = _Pass(weights, run_x).acts[Bottleneck.SUMMARIZER]
        pre = pooled @ _p(weights, "ext.weight") + _p(weights, "ext.bias")
        feats.append(np.maximum(pre, 0.0))
    r = np.concatenate(feats)
    weights.params["ext.bn_mean"] = r.mean(axis=0).astype(np.float32)
    weights.params["ext.bn_var"] = r.var(axis=0).astype(np.float32)


def predict(weights: LhbWeights, x, chunk: int = 256) -> np.ndarray:
    x = _as_batch(x)
    return np.concatenate([_Pass(weights, x[i : i + chunk]).logits for i in range(0, len(x), chunk)])


def balanced_accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    recalls = [np.mean(predictions[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def fine_tune(weights: LhbWeights, x, labels, hyper: FineTuneHyper = FineTuneHyper()):
    """Minimise softmax cross-entropy with plain minibatch SGD.

    Returns ``(weights, loss_history)`` where entry ``e`` is the eval-mode
    training loss after epoch ``e``. Batch-norm statistics are recomputed
    over the training set at the end of each epoch, so a zero learning
    rate leaves the history flat. Deterministic for a given seed.
    """
    x = _as_batch(x).astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels):
        raise ShapeError("one label per window required")
    cfg = weights.config
    if np.any(labels < 0) or np.any(labels >= cfg.num_classes):
        raise ShapeError("labels out of range")
    if len(np.unique(labels)) < 2:
        raise TrainingDegenerateError("fine-tuning needs windows from at least two classes")
    w = weights.copy()
    rng = np.random.default_rng(hyper.seed)
    history = []
    trainable = [n for n in param_shapes(cfg) if n not in BUFFERS]
    for _ in range(hyper.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            run = _Pass(w, x[idx], train=True, rng=rng)
            probs = softmax(run.logits)
            dlogits = probs
            dlogits[np.arange(len(idx)), labels[idx]] -= 1.0
            dlogits /= len(idx)
            grads = run.backward(dlogits, param_grads=True)
            if hyper.learning_rate != 0.0:
                for name in trainable:
                    updated = w.params[name] - hyper.learning_rate * grads[name]
                    w.params[name] = updated.astype(np.float32)
        recalibrate_batch_norm(w, x)
        history.append(cross_entropy(predict(w, x), labels))
        logger.debug("epoch %d loss %.5f", len(history), history[-1])
    return w, history


# --------------------------------------------------------------------------
# LHBW weight files
# --------------------------------------------------------------------------

MAGIC = b"LHBW"
VERSION = 1


def _meta_tensors(cfg: LhbConfig) -> dict:
    return {
        "meta.conv_strides": np.array(cfg.conv_strides, dtype=np.float32),
        "meta.rates": np.array([cfg.mask_rate, cfg.channel_drop_rate, cfg.dropout], dtype=np.float32),
        "meta.groups": np.array([cfg.groups, cfg.context_groups, cfg.pool_segments], dtype=np.float32),
    }


def encode_weights(weights: LhbWeights) -> bytes:
    tensors = dict(weights.params)
    tensors.update(_meta_tensors(weights.config))
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_weights(data: bytes) -> LhbWeights:
    data = bytes(data)
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not an LHBW weight file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported LHBW version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + name_len > len(data):
                raise struct.error
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError):
            raise FormatError("LHBW tensor table truncated or corrupt") from None
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"tensor {name!r}: payload truncated")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the tensor table")
    try:
        cfg = _config_from_tensors(tensors)
        params = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
        extra = set(params) - set(param_shapes(cfg))
        if extra:
            raise ShapeError(f"unexpected tensors {sorted(extra)}")
        return LhbWeights(cfg, params)
    except (ShapeError, ValueError, KeyError) as exc:
        raise FormatError(f"inconsistent shape table: {exc}") from None


def _config_from_tensors(t: dict) -> LhbConfig:
    strides = tuple(int(s) for s in t["meta.conv_strides"])
    # shortest float32 repr restores the decimal rates exactly
    mask_rate, drop_rate, dropout = (
        float(np.format_float_positional(np.float32(v))) for v in t["meta.rates"]
    )
    norm_groups, context_groups, segments = (int(v) for v in t["meta.groups"])
    k0 = t["enc.0.kernel"]
    kernels = tuple(t[f"enc.{i}.kernel"].shape[2] for i in range(len(strides)))
    ctx = t["aug.context_kernel"]
    return LhbConfig(
        in_channels=k0.shape[1],
        encoder_dim=k0.shape[0],
        conv_strides=strides,
        conv_kernels=kernels,
        mask_rate=mask_rate,
        channel_drop_rate=drop_rate,
        pool_segments=segments,
        hidden_dim=t["ext.weight"].shape[1],
        num_classes=t["cls.weight"].shape[1],
        norm_groups=norm_groups,
        context_kernel=ctx.shape[2],
        context_groups=context_groups,
        dropout=dropout,
    )


def save_weights(path, weights: LhbWeights) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path) -> LhbWeights:
    return decode_weights(Path(path).read_bytes())
