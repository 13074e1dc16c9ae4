"""Convolutional autoencoder: model, reconstruction loss, AdaMax and pretraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .dataset import batch_iter
from .tensor_core import (
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    dense,
    dense_backward,
    elu,
    elu_backward,
)

log = logging.getLogger(__name__)

PADDING = "same"


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class CaeArchitecture:
    input_size: int = 128
    channels: int = 3
    conv_specs: tuple[tuple[int, int, int], ...] = ((32, 5, 2), (64, 5, 2), (128, 3, 2))
    embed_dim: int = 32
    elu_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "conv_specs", tuple(tuple(int(v) for v in s) for s in self.conv_specs))
        if not self.conv_specs:
            raise ValueError("at least one convolutional layer is required")
        reduction = int(np.prod([s for _, _, s in self.conv_specs]))
        if self.input_size < 1 or self.input_size % reduction:
            raise ValueError(f"input_size {self.input_size} must be divisible by {reduction}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.elu_alpha <= 0:
            raise ValueError("elu_alpha must be > 0")
        if self.channels < 1 or any(f < 1 or k < 1 or s < 1 for f, k, s in self.conv_specs):
            raise ValueError("channel, filter, kernel and stride counts must be positive")

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(H, W, C) after the input and after each conv layer."""
        size, shapes = self.input_size, [(self.input_size, self.input_size, self.channels)]
        for filters, _, stride in self.conv_specs:
            size = -(-size // stride)
            shapes.append((size, size, filters))
        return shapes

    @property
    def flatten_dim(self) -> int:
        return int(np.prod(self.feature_shapes()[-1]))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        in_ch = self.channels
        for i, (f, k, _) in enumerate(self.conv_specs, start=1):
            shapes[f"conv{i}_w"] = (k, k, in_ch, f)
            shapes[f"conv{i}_b"] = (f,)
            in_ch = f
        shapes["embed_w"] = (self.flatten_dim, self.embed_dim)
        shapes["embed_b"] = (self.embed_dim,)
        shapes["dec_dense_w"] = (self.embed_dim, self.flatten_dim)
        shapes["dec_dense_b"] = (self.flatten_dim,)
        # deconv i undoes conv i, so its kernel has the same [k,k,C_in,F] shape
        for i in range(len(self.conv_specs), 0, -1):
            k, _, c_in, f = shapes[f"conv{i}_w"]
            shapes[f"deconv{i}_w"] = (k, k, c_in, f)
            shapes[f"deconv{i}_b"] = (c_in,)
        return shapes

    def encoder_names(self) -> list[str]:
        return [n for n in self.param_shapes() if n.startswith(("conv", "embed"))]

    def decoder_names(self) -> list[str]:
        return [n for n in self.param_shapes() if n.startswith("dec")]


@dataclass
class CaeModel:
    architecture: CaeArchitecture
    params: dict[str, np.ndarray]

    def copy(self) -> "CaeModel":
        return CaeModel(self.architecture, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "CaeModel":
        return CaeModel(self.architecture, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def encoder_params(self) -> dict[str, np.ndarray]:
        return {n: self.params[n] for n in self.architecture.encoder_names()}

    @property
    def decoder_params(self) -> dict[str, np.ndarray]:
        return {n: self.params[n] for n in self.architecture.decoder_names()}


def _glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[:-2]))
        fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_model(arch: CaeArchitecture | None = None, seed: int = 0) -> CaeModel:
    """Glorot-uniform weights, zero biases."""
    arch = arch or CaeArchitecture()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            lim = _glorot_limit(shape)
            params[name] = rng.uniform(-lim, lim, size=shape).astype(np.float32)
    return CaeModel(arch, params)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    x: np.ndarray
    enc_in: list[np.ndarray] = field(default_factory=list)
    enc_pre: list[np.ndarray] = field(default_factory=list)
    flat: np.ndarray | None = None
    z: np.ndarray | None = None
    dec_pre_dense: np.ndarray | None = None
    dec_in: list[np.ndarray] = field(default_factory=list)
    dec_pre: list[np.ndarray] = field(default_factory=list)
    x_hat: np.ndarray | None = None


def _check_batch(model: CaeModel, x: np.ndarray) -> None:
    s, c = model.architecture.input_size, model.architecture.channels
    if x.ndim != 4 or x.shape[1:] != (s, s, c):
        raise ValueError(f"expected batch [N,{s},{s},{c}], got {x.shape}")


def _encode(model: CaeModel, x: np.ndarray, cache: ForwardCache) -> np.ndarray:
    arch, p = model.architecture, model.params
    h = x
    for i, (_, _, stride) in enumerate(arch.conv_specs, start=1):
        cache.enc_in.append(h)
        a = conv2d(h, p[f"conv{i}_w"], p[f"conv{i}_b"], stride, PADDING)
        cache.enc_pre.append(a)
        h = elu(a, arch.elu_alpha)
    cache.flat = h.reshape(h.shape[0], -1)
    cache.z = dense(cache.flat, p["embed_w"], p["embed_b"])
    return cache.z


def _decode(model: CaeModel, z: np.ndarray, cache: ForwardCache) -> np.ndarray:
    arch, p = model.architecture, model.params
    shapes = arch.feature_shapes()
    cache.z = z
    cache.dec_pre_dense = dense(z, p["dec_dense_w"], p["dec_dense_b"])
    h = elu(cache.dec_pre_dense, arch.elu_alpha).reshape((z.shape[0],) + shapes[-1])
    n_layers = len(arch.conv_specs)
    for i in range(n_layers, 0, -1):
        stride = arch.conv_specs[i - 1][2]
        cache.dec_in.append(h)
        a = deconv2d(h, p[f"deconv{i}_w"], p[f"deconv{i}_b"], stride, shapes[i - 1][:2], PADDING)
        cache.dec_pre.append(a)
        h = elu(a, arch.elu_alpha) if i > 1 else a
    cache.x_hat = h
    return h


def forward(model: CaeModel, x: np.ndarray, decode: bool = True) -> ForwardCache:
    _check_batch(model, x)
    cache = ForwardCache(x=x)
    z = _encode(model, x, cache)
    if decode:
        _decode(model, z, cache)
    return cache


def backward(
    model: CaeModel,
    cache: ForwardCache,
    d_z: np.ndarray | None = None,
    d_x_hat: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients at the embedding and/or output.

    Decoder gradients are only produced when ``d_x_hat`` is given.
    """
    arch, p = model.architecture, model.params
    alpha = arch.elu_alpha
    grads: dict[str, np.ndarray] = {}
    n_layers = len(arch.conv_specs)
    if d_x_hat is not None:
        if cache.x_hat is None:
            raise ValueError("forward pass was run without the decoder")
        g = d_x_hat
        # cache lists run input-to-output; walk them backwards
        for i in range(1, n_layers + 1):
            pos = n_layers - i
            if i > 1:
                g = elu_backward(cache.dec_pre[pos], g, alpha)
            stride = arch.conv_specs[i - 1][2]
            lg = deconv2d_backward(cache.dec_in[pos], p[f"deconv{i}_w"], stride, g, PADDING)
            grads[f"deconv{i}_w"], grads[f"deconv{i}_b"] = lg.d_weights, lg.d_bias
            g = lg.d_input
        g = elu_backward(cache.dec_pre_dense, g.reshape(g.shape[0], -1), alpha)
        lg = dense_backward(cache.z, p["dec_dense_w"], g)
        grads["dec_dense_w"], grads["dec_dense_b"] = lg.d_weights, lg.d_bias
        d_z = lg.d_input if d_z is None else d_z + lg.d_input
    if d_z is None:
        return grads
    lg = dense_backward(cache.flat, p["embed_w"], d_z)
    grads["embed_w"], grads["embed_b"] = lg.d_weights, lg.d_bias
    g = lg.d_input.reshape(cache.enc_pre[-1].shape)
    for i in range(n_layers, 0, -1):
        g = elu_backward(cache.enc_pre[i - 1], g, alpha)
        stride = arch.conv_specs[i - 1][2]
        lg = conv2d_backward(cache.enc_in[i - 1], p[f"conv{i}_w"], stride, PADDING, g)
        grads[f"conv{i}_w"], grads[f"conv{i}_b"] = lg.d_weights, lg.d_bias
        g = lg.d_input
    return grads


def encode(model: CaeModel, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Embed a batch, chunked to bound memory on large corpora."""
    _check_batch(model, batch)
    parts = [forward(model, batch[i : i + chunk], decode=False).z for i in range(0, len(batch), chunk)]
    if not parts:
        return np.zeros((0, model.architecture.embed_dim), dtype=batch.dtype)
    return np.concatenate(parts)


def decode(model: CaeModel, z: np.ndarray) -> np.ndarray:
    if z.ndim != 2 or z.shape[1] != model.architecture.embed_dim:
        raise ValueError(f"expected embeddings [N,{model.architecture.embed_dim}], got {z.shape}")
    return _decode(model, z, ForwardCache(x=None))


def reconstruction_loss(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Mean squared error over every element."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    d = x_hat - x
    return float(np.mean(d * d))


def reconstruction_grad(x_hat: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (2.0 / x.size) * (x_hat - x)


# ---------------------------------------------------------------------------
# AdaMax
# ---------------------------------------------------------------------------

@dataclass
class AdamaxState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamaxState":
        return cls(config.lr, config.beta1, config.beta2, config.eps)


def adamax_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamaxState):
    """One AdaMax update, applied in place to ``params`` and ``state``.

    Only parameters present in ``grads`` move.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
    state.step += 1
    step_size = state.lr / (1.0 - state.beta1**state.step)
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.u[name] = np.zeros_like(p)
        m, u = state.m[name], state.u[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p -= step_size * m / (u + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _images(dataset) -> np.ndarray:
    return dataset.tensors if hasattr(dataset, "tensors") else np.asarray(dataset)


def pretrain(model: CaeModel, dataset, config: TrainConfig, optimizer: AdamaxState | None = None):
    """Train the autoencoder on reconstruction alone.

    Returns a trained copy of ``model`` and the per-epoch mean loss. Pass an
    ``optimizer`` to keep its state after the call.
    """
    x = _images(dataset)
    if len(x) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    model = model.copy()
    opt = optimizer if optimizer is not None else AdamaxState.from_config(config)
    history: list[float] = []
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for idx in batch_iter(len(x), config.batch_size, shuffle=True, seed=config.seed, epoch=epoch):
            xb = x[idx]
            cache = forward(model, xb)
            loss = reconstruction_loss(cache.x_hat, xb)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite reconstruction loss in epoch {epoch}")
            grads = backward(model, cache, d_x_hat=reconstruction_grad(cache.x_hat, xb))
            try:
                adamax_step(model.params, grads, opt)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            total += loss * len(idx)
        history.append(total / len(x))
        log.debug("pretrain epoch %d loss %.6f", epoch, history[-1])
    return model, history
