"""Stateful layer primitives composed into models.

Every layer exposes ``forward(x, training=False, rng=None)``, an ordered
``params`` dict of trainable tensors, an ordered ``buffers`` dict of
non-trainable arrays (batch-norm running statistics), and ``rows()`` which
describes the layer as architecture-table rows.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class LayerRow:
    kind: str
    units: int = None
    activation: str = None
    params: int = 0


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, dtype=dtype)


def normal_init(rng, shape, std=0.02, dtype=np.float32):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float32, value=0.0):
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


class Layer:
    kind = "Layer"
    name = "layer"

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training=training, rng=rng)

    def named_params(self, prefix):
        for k, v in self.params.items():
            yield f"{prefix}.{k}", v

    def named_buffers(self, prefix):
        for k, v in self.buffers.items():
            yield f"{prefix}.{k}", v

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def rows(self):
        return [LayerRow(self.kind, None, None, self.param_count())]

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    """``f(x W + b)`` applied over the last axis."""

    kind = "Dense"
    name = "dense"

    def __init__(self, in_dim, out_dim, activation=None, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.params["W"] = glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype)
        self.params["b"] = zeros((out_dim,), dtype)

    def forward(self, x, training=False, rng=None):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Dense expects last extent {self.in_dim}, got {x.shape}")
        return T.activation(T.matmul(x, self.params["W"]) + self.params["b"], self.activation)

    def rows(self):
        return [LayerRow("Dense", self.out_dim, self.activation, self.param_count())]

    def __repr__(self):
        return f"Dense({self.in_dim}->{self.out_dim}, {self.activation})"


class Conv2D(Layer):
    kind = "Conv2D"
    name = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=0, activation="relu",
                 rng=None, dtype=np.float32, init="glorot"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad, self.activation = kernel, stride, pad, activation
        shape = (kernel, kernel, in_ch, out_ch)
        if init == "normal":
            self.params["K"] = normal_init(rng, shape, dtype=dtype)
        else:
            self.params["K"] = glorot_uniform(rng, shape, kernel * kernel * in_ch,
                                              kernel * kernel * out_ch, dtype)
        self.params["b"] = zeros((out_ch,), dtype)

    def out_extent(self, n):
        return (n + 2 * self.pad - self.kernel) // self.stride + 1

    def forward(self, x, training=False, rng=None):
        y = T.conv2d(x, self.params["K"], self.params["b"], stride=self.stride, pad=self.pad)
        return T.activation(y, self.activation)

    def rows(self):
        return [LayerRow("Conv2D", self.out_ch, self.activation, self.param_count())]

    def __repr__(self):
        return f"Conv2D({self.in_ch}->{self.out_ch}, k={self.kernel}, s={self.stride}, p={self.pad})"


class Conv2DTranspose(Layer):
    kind = "Conv2DTranspose"
    name = "tconv"

    def __init__(self, in_ch, out_ch, kernel=4, stride=2, pad=1, activation=None,
                 use_bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad, self.activation = kernel, stride, pad, activation
        self.params["K"] = normal_init(rng, (kernel, kernel, out_ch, in_ch), dtype=dtype)
        if use_bias:
            self.params["b"] = zeros((out_ch,), dtype)

    def out_extent(self, n):
        return (n - 1) * self.stride - 2 * self.pad + self.kernel

    def forward(self, x, training=False, rng=None):
        y = T.conv2d_transpose(x, self.params["K"], self.params.get("b"),
                               stride=self.stride, pad=self.pad)
        return T.activation(y, self.activation)

    def rows(self):
        return [LayerRow("Conv2DTranspose", self.out_ch, self.activation, self.param_count())]


class MaxPool2D(Layer):
    kind = "MaxPooling2D"
    name = "pool"

    def forward(self, x, training=False, rng=None):
        return T.maxpool2d(x)


class Flatten(Layer):
    kind = "Flatten"
    name = "flatten"

    def forward(self, x, training=False, rng=None):
        return flatten(x)


def flatten(x):
    """Row-major ``[N, ...] -> [N, prod(...)]``."""
    return T.reshape(x, (x.shape[0], -1))


class Reshape(Layer):
    kind = "Reshape"
    name = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, training=False, rng=None):
        return T.reshape(x, (x.shape[0],) + self.shape)


class Activation(Layer):
    kind = "Activation"
    name = "act"

    def __init__(self, kind):
        super().__init__()
        self.activation = kind

    def forward(self, x, training=False, rng=None):
        return T.activation(x, self.activation)

    def rows(self):
        return [LayerRow("Activation", None, self.activation, 0)]


class Dropout(Layer):
    kind = "Dropout"
    name = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if training and self.rate > 0 and rng is None:
            raise ValueError("Dropout in training mode needs an rng")
        return T.dropout(x, self.rate, rng, training=training)

    def __repr__(self):
        return f"Dropout({self.rate})"


class LayerNorm(Layer):
    kind = "LayerNormalization"
    name = "layernorm"

    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.params["gamma"] = zeros((dim,), dtype, 1.0)
        self.params["beta"] = zeros((dim,), dtype)

    def forward(self, x, training=False, rng=None):
        return T.layer_norm(x, self.params["gamma"], self.params["beta"], self.eps)


class BatchNorm(Layer):
    """Per-channel batch norm; running averages use ``r <- m r + (1 - m) batch``."""

    kind = "BatchNormalization"
    name = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = zeros((channels,), dtype, 1.0)
        self.params["beta"] = zeros((channels,), dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, training=False, rng=None):
        g, b = self.params["gamma"], self.params["beta"]
        if not training:
            stats = (self.buffers["running_mean"], self.buffers["running_var"])
            return T.batch_norm(x, g, b, self.eps, stats=stats)[0]
        out, mu, var = T.batch_norm(x, g, b, self.eps)
        m = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = m * rm + (1 - m) * mu
        rv[...] = m * rv + (1 - m) * var
        return out


class MultiHeadAttention(Layer):
    """Self-attention with per-head Q/K/V projections and one output projection.

    The per-head projections are stored side by side, so ``Wq`` is
    ``[dim, heads * d_k]`` with ``d_k = dim // heads``.
    """

    kind = "MultiHeadAttention"
    name = "mha"

    def __init__(self, dim, heads, rng=None, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"projection dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.heads, self.d_k = dim, heads, dim // heads
        for name in ("q", "k", "v", "o"):
            self.params[f"W{name}"] = glorot_uniform(rng, (dim, dim), dim, dim, dtype)
            self.params[f"b{name}"] = zeros((dim,), dtype)

    def _split(self, x, name):
        b, n, _ = x.shape
        y = T.matmul(x, self.params[f"W{name}"]) + self.params[f"b{name}"]
        return T.transpose(T.reshape(y, (b, n, self.heads, self.d_k)), (0, 2, 1, 3))

    def _weights(self, x):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects [batch, patches, {self.dim}], got {x.shape}")
        q, k, v = self._split(x, "q"), self._split(x, "k"), self._split(x, "v")
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.d_k))
        return T.softmax(scores), v

    def attention_weights(self, x):
        """``[batch, heads, patches, patches]`` softmax weights for inspection."""
        with T.no_grad():
            return self._weights(x)[0].numpy()

    def forward(self, x, training=False, rng=None):
        b, n, _ = x.shape
        attn, v = self._weights(x)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, self.dim))
        return T.matmul(ctx, self.params["Wo"]) + self.params["bo"]


class PatchExtract(Layer):
    kind = "PatchExtractor"
    name = "patches"

    def __init__(self, patch):
        super().__init__()
        self.patch = patch

    def forward(self, x, training=False, rng=None):
        return extract_patches(x, self.patch)


def extract_patches(x, patch):
    """``[N,H,W,C] -> [N, (H/P)(W/P), P*P*C]``: row-major patches, each flattened channel-last."""
    x = T.as_tensor(x)
    n, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image extents {(h, w)}")
    gh, gw = h // patch, w // patch
    y = T.reshape(x, (n, gh, patch, gw, patch, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (n, gh * gw, patch * patch * c))


class GlobalAvgPool1D(Layer):
    kind = "GlobalAveragePooling1D"
    name = "gap"

    def forward(self, x, training=False, rng=None):
        return global_avg_pool(x)


def global_avg_pool(x):
    """Mean over the patch axis: ``[N, patches, dim] -> [N, dim]``."""
    return T.mean(x, axis=1)


class Residual(Layer):
    """``x + body(x)``; contributes an ``Add`` row after the body rows."""

    kind = "Residual"
    name = "residual"

    def __init__(self, body):
        super().__init__()
        self.body = list(body)

    def forward(self, x, training=False, rng=None):
        y = x
        for layer in self.body:
            y = layer(y, training=training, rng=rng)
        return x + y

    def named_params(self, prefix):
        for j, layer in enumerate(self.body):
            yield from layer.named_params(f"{prefix}.{j:02d}.{layer.name}")

    def named_buffers(self, prefix):
        for j, layer in enumerate(self.body):
            yield from layer.named_buffers(f"{prefix}.{j:02d}.{layer.name}")

    def param_count(self):
        return sum(layer.param_count() for layer in self.body)

    def rows(self):
        out = [r for layer in self.body for r in layer.rows()]
        return out + [LayerRow("Add", None, None, 0)]
