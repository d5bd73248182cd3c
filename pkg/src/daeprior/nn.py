"""Denoising autoencoder networks written directly in numpy.

A network is an ordered list of layers (3x3 convolutions, batch
normalization, ReLU, fully connected).  The denoiser built on top of it
follows the residual convention ``A(x) = x - R(x)``: the network ``R``
regresses the noise.  Small fully connected nets for the 2D density
experiments can instead output ``A(x)`` directly (``residual=False``).

Forward passes return explicit caches and backward passes consume them,
so a trained :class:`DaeNetwork` is never mutated by inference and can be
shared between threads.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "LayerKind",
    "LayerSpec",
    "DaeNetwork",
    "TrainConfig",
    "AdamState",
    "TrainingDivergedError",
    "conv_dae_specs",
    "mlp_specs",
    "init_network",
    "dae_forward",
    "dae_vjp",
    "dae_loss",
    "dae_train",
    "extract_patches",
    "adam_step",
    "save_weights",
    "load_weights",
]


class LayerKind(enum.IntEnum):
    CONV3X3 = 1
    BATCHNORM = 2
    RELU = 3
    FULLY_CONNECTED = 4


_WEIGHTED = (LayerKind.CONV3X3, LayerKind.FULLY_CONNECTED)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
OUTPUT_INIT_GAIN = 0.1
THIN_CHANNELS = 8


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int
    out_channels: int

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid channel counts in {self}")
        if self.kind not in _WEIGHTED and self.in_channels != self.out_channels:
            raise ValueError(f"{self.kind.name} cannot change the channel count")


def validate_specs(specs: Sequence[LayerSpec]):
    specs = list(specs)
    if not specs:
        raise ValueError("a network needs at least one layer")
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_channels != cur.in_channels:
            raise ValueError(f"channel mismatch between {prev} and {cur}")
    if specs[0].kind not in _WEIGHTED or specs[-1].kind not in _WEIGHTED:
        raise ValueError("first and last layers must be convolution or fully connected")
    weighted = [i for i, s in enumerate(specs) if s.kind in _WEIGHTED]
    first = weighted[0]
    for s in specs[first + 1:weighted[1] if len(weighted) > 1 else len(specs)]:
        if s.kind == LayerKind.BATCHNORM:
            raise ValueError("no batch normalization after the first layer")
    kinds = {s.kind for s in specs}
    if LayerKind.CONV3X3 in kinds and LayerKind.FULLY_CONNECTED in kinds:
        raise ValueError("mixing convolution and fully connected layers is not supported")
    return specs


def conv_dae_specs(depth=7, width=32, channels=1):
    """Residual denoiser layout: conv+ReLU, (conv+BN+ReLU) x (depth-2), conv.

    ``depth=20, width=64, channels=3`` gives the full-size configuration.
    """
    if depth < 2:
        raise ValueError("depth must be at least 2")
    C, K = LayerKind.CONV3X3, LayerKind
    specs = [LayerSpec(C, channels, width), LayerSpec(K.RELU, width, width)]
    for _ in range(depth - 2):
        specs += [
            LayerSpec(C, width, width),
            LayerSpec(K.BATCHNORM, width, width),
            LayerSpec(K.RELU, width, width),
        ]
    specs.append(LayerSpec(C, width, channels))
    return specs


def mlp_specs(sizes=(2, 64, 64, 2)):
    specs = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        specs.append(LayerSpec(LayerKind.FULLY_CONNECTED, a, b))
        if i < len(sizes) - 2:
            specs.append(LayerSpec(LayerKind.RELU, b, b))
    return specs


# --- layer kernels --------------------------------------------------------
#
# forward(params, x, train, keep) -> (y, cache)
# backward(params, cache, gy, need_params) -> (gx, grads)


def _pad_flat(x):
    # zero-pad by one pixel (plus a spare bottom row) and flatten the grid, so
    # that a (dy, dx) shift becomes a contiguous slice at offset dy * (w + 2) + dx
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 3, w + 2, c), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1] = x
    return xp.reshape(n, -1, c)


def _conv_same(x, wt):
    """Zero-padded 'same' cross-correlation with a 3 x 3 x cin x cout kernel."""
    n, h, w, c = x.shape
    wp = w + 2
    span = h * wp
    xf = _pad_flat(x)
    if c < THIN_CHANNELS:
        # few input channels: gather the nine shifts and do a single product
        cols = np.empty((n, span, 9, c), dtype=x.dtype)
        for a in range(3):
            for b in range(3):
                o = a * wp + b
                cols[:, :, 3 * a + b] = xf[:, o:o + span]
        out = cols.reshape(n, span, 9 * c) @ wt.reshape(9 * c, -1)
    else:
        out = np.empty((n, span, wt.shape[-1]), dtype=np.result_type(x.dtype, wt.dtype))
        np.matmul(xf[:, :span], wt[0, 0], out=out)
        for a in range(3):
            for b in range(3):
                if a or b:
                    o = a * wp + b
                    out += xf[:, o:o + span] @ wt[a, b]
    return out.reshape(n, h, wp, -1)[:, :, :w], xf


def _conv_forward(p, x, train, keep):
    y, xf = _conv_same(x, p["weight"])
    return y + p["bias"], (x.shape, xf if keep else None)


def _conv_backward(p, cache, gy, need_params):
    shape, xf = cache
    n, h, w, c = shape
    wt = p["weight"]
    # the transpose of a same-size correlation is the correlation with the
    # spatially flipped, channel-transposed kernel
    gx, _ = _conv_same(gy, np.ascontiguousarray(wt[::-1, ::-1].transpose(0, 1, 3, 2)))
    grads = {}
    if need_params:
        wp = w + 2
        span = h * wp
        gyw = np.zeros((n, h, wp, gy.shape[-1]), dtype=gy.dtype)
        gyw[:, :, :w] = gy
        g2 = gyw.reshape(-1, gy.shape[-1])
        gw = np.empty_like(wt)
        for a in range(3):
            for b in range(3):
                o = a * wp + b
                gw[a, b] = xf[:, o:o + span].reshape(-1, c).T @ g2
        grads["weight"] = gw
        grads["bias"] = gy.reshape(-1, gy.shape[-1]).sum(axis=0)
    return gx, grads


def _fc_forward(p, x, train, keep):
    return x @ p["weight"] + p["bias"], x if keep else None


def _fc_backward(p, x, gy, need_params):
    gx = gy @ p["weight"].T
    grads = {}
    if need_params:
        x2 = x.reshape(-1, x.shape[-1])
        g2 = gy.reshape(-1, gy.shape[-1])
        grads["weight"] = x2.T @ g2
        grads["bias"] = g2.sum(axis=0)
    return gx, grads


def _relu_forward(p, x, train, keep):
    mask = x > 0
    return x * mask, mask


def _relu_backward(p, mask, gy, need_params):
    return gy * mask, {}


def _bn_forward(p, x, train, keep):
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = p["running_mean"], p["running_var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    y = p["gamma"] * xhat + p["beta"]
    stats = (mean, var) if train else None
    return y, (train, xhat, inv, stats)


def _bn_backward(p, cache, gy, need_params):
    train, xhat, inv, _ = cache
    axes = tuple(range(gy.ndim - 1))
    grads = {}
    sum_gy = gy.sum(axis=axes)
    sum_gy_xhat = (gy * xhat).sum(axis=axes)
    if need_params:
        grads["gamma"] = sum_gy_xhat
        grads["beta"] = sum_gy
    if train:
        m = gy.size // gy.shape[-1]
        gx = (p["gamma"] * inv / m) * (m * gy - sum_gy - xhat * sum_gy_xhat)
    else:
        gx = gy * (p["gamma"] * inv)
    return gx, grads


_KERNELS = {
    LayerKind.CONV3X3: (_conv_forward, _conv_backward),
    LayerKind.FULLY_CONNECTED: (_fc_forward, _fc_backward),
    LayerKind.RELU: (_relu_forward, _relu_backward),
    LayerKind.BATCHNORM: (_bn_forward, _bn_backward),
}

# trainable parameters per kind, in file order; running stats follow
_TRAINABLE = {
    LayerKind.CONV3X3: ("weight", "bias"),
    LayerKind.FULLY_CONNECTED: ("weight", "bias"),
    LayerKind.BATCHNORM: ("gamma", "beta"),
    LayerKind.RELU: (),
}
_BUFFERS = {LayerKind.BATCHNORM: ("running_mean", "running_var")}


def _param_shapes(spec):
    ci, co = spec.in_channels, spec.out_channels
    if spec.kind == LayerKind.CONV3X3:
        return {"weight": (3, 3, ci, co), "bias": (co,)}
    if spec.kind == LayerKind.FULLY_CONNECTED:
        return {"weight": (ci, co), "bias": (co,)}
    if spec.kind == LayerKind.BATCHNORM:
        return {k: (ci,) for k in ("gamma", "beta", "running_mean", "running_var")}
    return {}


# --- network ----------------------------------------------------------------


@dataclass
class DaeNetwork:
    """Layer specs plus parameters of a denoising autoencoder.

    Attributes
    ----------
    specs : list of LayerSpec
    params : list of dict
        One dict of arrays per layer.
    sigma_train : float
        Noise standard deviation the network was trained with.
    residual : bool
        If true the network predicts the noise and ``A(x) = x - R(x)``;
        otherwise the network output is ``A(x)`` itself.
    scale : float
        Inputs are divided by ``scale`` before entering the layers and
        outputs multiplied by it, so that weights see roughly unit-range
        data while the public interface stays in image units.
    mode : {"inference", "train"}
    """

    specs: list
    params: list
    sigma_train: float = 0.0
    residual: bool = True
    scale: float = 1.0
    mode: str = "inference"

    def __post_init__(self):
        self.specs = validate_specs(self.specs)
        if len(self.params) != len(self.specs):
            raise ValueError("one parameter dict per layer is required")
        for spec, p in zip(self.specs, self.params):
            for name, shape in _param_shapes(spec).items():
                if name not in p or tuple(p[name].shape) != shape:
                    raise ValueError(f"{spec.kind.name} parameter {name!r} must have shape {shape}")
        if self.mode not in ("inference", "train"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def is_convolutional(self):
        return self.specs[0].kind == LayerKind.CONV3X3

    @property
    def in_channels(self):
        return self.specs[0].in_channels

    @property
    def dtype(self):
        for p in self.params:
            for v in p.values():
                return v.dtype
        return np.dtype(np.float64)

    @property
    def sigma(self):
        return self.sigma_train

    def astype(self, dtype):
        params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return dataclasses.replace(self, params=params)

    def copy(self):
        return self.astype(self.dtype)

    def eval(self):
        return dataclasses.replace(self, mode="inference")

    def train(self):
        return dataclasses.replace(self, mode="train")

    # input layout helpers

    def _batched(self, x):
        x = np.asarray(x)
        if self.is_convolutional:
            if x.ndim == 2 and self.in_channels == 1:
                return x[None, :, :, None], lambda y: y[0, :, :, 0]
            if x.ndim == 3:
                return x[None], lambda y: y[0]
            if x.ndim == 4:
                return x, lambda y: y
        else:
            if x.ndim == 1:
                return x[None], lambda y: y[0]
            if x.ndim == 2:
                return x, lambda y: y
        raise ValueError(f"input shape {x.shape} does not fit this network")

    def _check_input(self, x):
        if x.shape[-1] != self.in_channels:
            raise ValueError(
                f"input has {x.shape[-1]} channels, network expects {self.in_channels}"
            )

    # core passes on batched, normalized data

    def _run(self, x, train, keep):
        caches = []
        for spec, p in zip(self.specs, self.params):
            x, cache = _KERNELS[spec.kind][0](p, x, train, keep)
            caches.append(cache)
        return x, caches

    def _backprop(self, caches, g, need_params):
        grads = [None] * len(self.specs)
        for i in range(len(self.specs) - 1, -1, -1):
            spec = self.specs[i]
            g, grads[i] = _KERNELS[spec.kind][1](self.params[i], caches[i], g, need_params)
        return g, grads

    def network_output(self, x, train=None):
        """Raw network function in image units (``R(x)`` or ``A(x)``)."""
        xb, unbatch = self._batched(x)
        self._check_input(xb)
        train = self.mode == "train" if train is None else train
        y, _ = self._run(xb.astype(self.dtype, copy=False) / self.scale, train, False)
        out = unbatch(y * self.scale)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("network produced non-finite activations")
        return out

    def denoise(self, x):
        """``A(x)``, the denoised output, same shape as ``x``."""
        out = self.network_output(x)
        if self.residual:
            return np.asarray(x, dtype=out.dtype) - out
        return out

    def linearize(self, x):
        """Return ``A(x)`` and a function computing ``J^T v`` at ``x``.

        Both share a single forward pass.
        """
        x = np.asarray(x)
        xb, unbatch = self._batched(x)
        self._check_input(xb)
        dtype = self.dtype
        train = self.mode == "train"
        y, caches = self._run(xb.astype(dtype, copy=False) / self.scale, train, False)
        r = unbatch(y * self.scale)
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("network produced non-finite activations")
        out = x.astype(dtype, copy=False) - r if self.residual else r

        def vjp(v):
            v = np.asarray(v)
            if v.shape != x.shape:
                raise ValueError(f"cotangent shape {v.shape} differs from input shape {x.shape}")
            vb, _ = self._batched(v)
            # the 1/scale on the input and the scale on the output cancel
            g, _ = self._backprop(caches, vb.astype(dtype, copy=False), need_params=False)
            g = unbatch(g)
            return v.astype(dtype, copy=False) - g if self.residual else g

        return out, vjp

    def vjp(self, x, v):
        """``J^T v`` where ``J`` is the Jacobian of :meth:`denoise` at ``x``."""
        if np.shape(v) != np.shape(x):
            raise ValueError(f"cotangent shape {np.shape(v)} differs from input shape {np.shape(x)}")
        return self.linearize(x)[1](v)

    def parameter_gradients(self, x, gout, train=None):
        """Gradients of ``<gout, network_output(x)>`` w.r.t. all parameters.

        Returns ``(grad_input, grads)`` where ``grads`` mirrors ``params``
        (trainable entries only).
        """
        xb, unbatch = self._batched(x)
        gb, _ = self._batched(gout)
        train = self.mode == "train" if train is None else train
        dtype = self.dtype
        _, caches = self._run(xb.astype(dtype, copy=False) / self.scale, train, True)
        g, grads = self._backprop(caches, gb.astype(dtype, copy=False) * self.scale, True)
        return unbatch(g) / self.scale, grads


def init_network(specs, sigma_train=0.0, residual=True, scale=1.0, seed=0, dtype=np.float32):
    """He-initialized network; batch-norm affine starts at (1, 0).

    The output layer's He scale is shrunk by ``OUTPUT_INIT_GAIN`` so that an
    untrained network starts close to the identity denoiser.
    """
    specs = validate_specs(specs)
    rng = np.random.default_rng(seed)
    params = []
    for i, spec in enumerate(specs):
        shapes = _param_shapes(spec)
        p = {}
        if spec.kind in _WEIGHTED:
            wshape = shapes["weight"]
            fan_in = int(np.prod(wshape[:-1]))
            std = np.sqrt(2.0 / fan_in) * (OUTPUT_INIT_GAIN if i == len(specs) - 1 else 1.0)
            p["weight"] = (rng.standard_normal(wshape) * std).astype(dtype)
            p["bias"] = np.zeros(shapes["bias"], dtype=dtype)
        elif spec.kind == LayerKind.BATCHNORM:
            p["gamma"] = np.ones(shapes["gamma"], dtype=dtype)
            p["beta"] = np.zeros(shapes["beta"], dtype=dtype)
            p["running_mean"] = np.zeros(shapes["running_mean"], dtype=dtype)
            p["running_var"] = np.ones(shapes["running_var"], dtype=dtype)
        params.append(p)
    return DaeNetwork(specs, params, sigma_train=float(sigma_train), residual=residual, scale=float(scale))


def dae_forward(net: DaeNetwork, x):
    """Denoised output ``A(x)``."""
    return net.denoise(x)


def dae_vjp(net: DaeNetwork, x, v):
    """Vector-Jacobian product ``J^T v`` of the denoiser at ``x``."""
    return net.vjp(x, v)


# --- training ---------------------------------------------------------------


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    sigma_eps: float = 25.0
    batch_size: int = 64
    patch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: float = 0.25  # fraction of the total epochs
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    steps_per_epoch: int | None = None
    flips: bool = True
    seed: int = 0
    dtype: str = "float32"
    scale: float = 255.0
    residual: bool = True

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def learning_rate_at(self, epoch):
        """Step decay: multiply by ``lr_decay`` every ``lr_decay_every`` of the run."""
        period = max(1, int(round(self.epochs * self.lr_decay_every)))
        return self.learning_rate * self.lr_decay ** (epoch // period)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, net):
        m = [{k: np.zeros_like(p[k]) for k in _TRAINABLE[s.kind]} for s, p in zip(net.specs, net.params)]
        v = [{k: np.zeros_like(p[k]) for k in _TRAINABLE[s.kind]} for s, p in zip(net.specs, net.params)]
        return cls(m, v, 0)


def adam_step(net, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``net.params``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(net.params, grads, state.m, state.v):
        for k in m:
            m[k] *= beta1
            m[k] += (1 - beta1) * g[k]
            v[k] *= beta2
            v[k] += (1 - beta2) * g[k] * g[k]
            p[k] -= (lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)).astype(p[k].dtype)


def _update_running_stats(net, caches):
    for spec, p, cache in zip(net.specs, net.params, caches):
        if spec.kind == LayerKind.BATCHNORM:
            _, xhat, _, (mean, var) = cache
            m = xhat.size // xhat.shape[-1]
            unbiased = var * m / max(m - 1, 1)
            p["running_mean"] *= 1 - BN_MOMENTUM
            p["running_mean"] += BN_MOMENTUM * mean
            p["running_var"] *= 1 - BN_MOMENTUM
            p["running_var"] += BN_MOMENTUM * unbiased


def _training_step(net, clean, noise, train=True):
    s = net.scale
    target = noise / s if net.residual else clean / s
    y, caches = net._run((clean + noise) / s, train, True)
    diff = y - target
    loss = float(np.mean(diff.astype(np.float64) ** 2)) * s * s
    g = (2.0 / diff.size) * diff
    _, grads = net._backprop(caches, g, True)
    return loss, grads, caches


def dae_loss(net: DaeNetwork, clean, sigma=None, seed=0):
    """Per-element denoising MSE in image units, evaluated in inference mode.

    For residual nets this is the error of the predicted noise, which equals
    the error of the denoised output ``A(x + eta)`` against ``x``.
    """
    sigma = net.sigma_train if sigma is None else sigma
    clean = np.asarray(clean, dtype=net.dtype)
    noise = (sigma * np.random.default_rng(seed).standard_normal(clean.shape)).astype(net.dtype)
    noisy = clean + noise
    if net.is_convolutional and noisy.ndim == 4:
        out = np.concatenate([net.denoise(noisy[i:i + 64]) for i in range(0, len(noisy), 64)])
    else:
        out = net.denoise(noisy)
    return float(np.mean((out.astype(np.float64) - clean) ** 2))


def _augment(batch, rng):
    if rng.random() < 0.5:
        batch = batch[:, ::-1]
    if rng.random() < 0.5:
        batch = batch[:, :, ::-1]
    return np.ascontiguousarray(batch)


def dae_train(corpus, specs, cfg: TrainConfig, net: DaeNetwork | None = None, callback: Callable | None = None):
    """Train a denoising autoencoder with Adam.

    Parameters
    ----------
    corpus : ndarray or callable
        Either an array of clean training samples (``N x P x P x C``
        patches for convolutional nets, ``N x D`` points for fully
        connected ones), or a callable ``corpus(rng, n)`` returning ``n``
        fresh clean samples.
    specs : list of LayerSpec
        Network layout; ignored when ``net`` is given.
    cfg : TrainConfig
    net : DaeNetwork, optional
        Continue training this network instead of a fresh one.
    callback : callable, optional
        Called as ``callback(epoch, loss, net)`` after each epoch.

    Returns
    -------
    DaeNetwork
        Trained network in inference mode with ``sigma_train = cfg.sigma_eps``.
        The per-epoch mean training losses are stored in ``net.history``.
    """
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    sampler = corpus if callable(corpus) else None
    if sampler is None:
        corpus = np.asarray(corpus, dtype=dtype)
        if len(corpus) == 0:
            raise ValueError("training corpus is empty")
    if net is None:
        net = init_network(specs, cfg.sigma_eps, cfg.residual, cfg.scale, seed=rng.integers(2**32), dtype=dtype)
    else:
        net = net.astype(dtype)
    if net.is_convolutional and sampler is None and corpus.ndim != 4:
        raise ValueError("convolutional training needs an N x P x P x C patch array")
    if sampler is None and corpus.shape[-1] != net.in_channels:
        raise ValueError(f"corpus has {corpus.shape[-1]} channels, network expects {net.in_channels}")
    net = dataclasses.replace(net, sigma_train=float(cfg.sigma_eps), mode="train")
    state = AdamState.zeros_like(net)
    steps = cfg.steps_per_epoch
    if steps is None:
        if sampler is not None:
            raise ValueError("steps_per_epoch is required with a sampling corpus")
        steps = max(1, len(corpus) // cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate_at(epoch)
        order = rng.permutation(len(corpus)) if sampler is None else None
        total = 0.0
        for step in range(steps):
            if sampler is None:
                idx = order[(step * cfg.batch_size) % len(order):][: cfg.batch_size]
                batch = corpus[np.sort(idx)]
                if cfg.flips and net.is_convolutional:
                    batch = _augment(batch, rng)
            else:
                batch = np.asarray(sampler(rng, cfg.batch_size), dtype=dtype)
            noise = (cfg.sigma_eps * rng.standard_normal(batch.shape)).astype(dtype)
            loss, grads, caches = _training_step(net, batch, noise)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"training loss became {loss} at epoch {epoch + 1}, step {step + 1}")
            _update_running_stats(net, caches)
            adam_step(net, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            total += loss
        history.append(total / steps)
        log.info("epoch %d/%d  lr %.2e  loss %.4f", epoch + 1, cfg.epochs, lr, history[-1])
        if callback is not None:
            callback(epoch, history[-1], net)
    net = net.eval()
    net.history = history
    return net


def extract_patches(images, patch_size, count, seed=0):
    """Random ``patch_size`` crops from a list of ``H x W x C`` images."""
    rng = np.random.default_rng(seed)
    images = [np.asarray(im)[:, :, None] if np.ndim(im) == 2 else np.asarray(im) for im in images]
    images = [im for im in images if min(im.shape[:2]) >= patch_size]
    if not images:
        raise ValueError("no image is large enough for the requested patch size")
    areas = np.array([im.shape[0] * im.shape[1] for im in images], dtype=float)
    which = rng.choice(len(images), size=count, p=areas / areas.sum())
    out = np.empty((count, patch_size, patch_size, images[0].shape[2]), dtype=np.float32)
    for n, i in enumerate(which):
        im = images[i]
        y = rng.integers(im.shape[0] - patch_size + 1)
        x = rng.integers(im.shape[1] - patch_size + 1)
        out[n] = im[y:y + patch_size, x:x + patch_size]
    return out


# --- weights file -----------------------------------------------------------
#
# DAEW1 layout (little endian):
#   b"DAEW1"
#   float64 sigma_train, float64 scale, uint8 residual, uint32 layer count
#   per layer: uint8 kind tag, uint32 in_channels, uint32 out_channels,
#              then every parameter array as float32 in fixed order
#              (conv: weight[3,3,in,out], bias[out]; fc: weight[in,out],
#              bias[out]; batchnorm: gamma, beta, running_mean, running_var)

MAGIC = b"DAEW1"


def save_weights(net: DaeNetwork, path):
    chunks = [MAGIC, struct.pack("<ddBI", net.sigma_train, net.scale, int(net.residual), len(net.specs))]
    for spec, p in zip(net.specs, net.params):
        chunks.append(struct.pack("<BII", int(spec.kind), spec.in_channels, spec.out_channels))
        for name in _param_shapes(spec):
            chunks.append(np.ascontiguousarray(p[name], dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_weights(path) -> DaeNetwork:
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a DAEW1 weights file")
    pos = 5
    sigma, scale, residual, count = struct.unpack_from("<ddBI", data, pos)
    pos += struct.calcsize("<ddBI")
    specs, params = [], []
    for _ in range(count):
        kind, ci, co = struct.unpack_from("<BII", data, pos)
        pos += struct.calcsize("<BII")
        spec = LayerSpec(LayerKind(kind), ci, co)
        p = {}
        for name, shape in _param_shapes(spec).items():
            n = int(np.prod(shape))
            if pos + 4 * n > len(data):
                raise ValueError(f"{path}: truncated weights file")
            p[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * n
        specs.append(spec)
        params.append(p)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in weights file")
    return DaeNetwork(specs, params, sigma_train=sigma, residual=bool(residual), scale=scale)
