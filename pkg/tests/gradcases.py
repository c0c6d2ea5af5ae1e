"""Random instances for finite-difference checks of every differentiable op and layer.

Each factory takes an rng and returns ``(fn, inputs)`` for ``grad_check``.
Inputs keep away from kinks (relu at 0, pooling ties, the BCE clip) so the
central difference is well defined.
"""

import numpy as np

from acdl import layers as L
from acdl import tensor as T
from acdl.models import Rescale
from acdl.optim import lsgan_losses

F64 = np.float64


def away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def distinct(rng, shape, gap=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def layer_fn(layer, training=True):
    """Wrap ``layer`` so its parameters become explicit grad_check inputs."""
    names = list(layer.params)

    def fn(x, *ps):
        saved = dict(layer.params)
        layer.params.update(zip(names, ps))
        try:
            return layer(x, training=training, rng=np.random.default_rng(0))
        finally:
            layer.params.update(saved)

    return fn, [layer.params[n].data for n in names]


def _binary(op):
    return lambda rng: (op, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])


def _conv(stride, pad):
    def make(rng):
        n, h, cin, cout, k = 2, int(rng.integers(4, 7)), int(rng.integers(1, 3)), int(rng.integers(1, 3)), 3
        return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad),
                [rng.normal(size=(n, h, h, cin)), rng.normal(size=(k, k, cin, cout)), rng.normal(size=cout)])
    return make


def _bce(rng):
    labels = rng.permutation(np.r_[np.ones(3), np.zeros(3)])
    return (lambda p: T.bce(p, labels)), [rng.uniform(0.05, 0.95, size=(6, 1))]


def _tconv(rng):
    return (lambda x, w, b: T.conv2d_transpose(x, w, b, stride=2, pad=1),
            [rng.normal(size=(1, 3, 3, 2)), rng.normal(size=(4, 4, 3, 2)), rng.normal(size=3)])


def _layer(build, x_shape, x_maker=None, training=True):
    def make(rng):
        layer = build(rng)
        fn, params = layer_fn(layer, training)
        # perturb defaults (zeros / ones) so every parameter path is exercised
        params = [p + rng.normal(scale=0.1, size=p.shape) for p in params]
        x = (x_maker or (lambda r, s: r.normal(size=s)))(rng, x_shape)
        return fn, [x] + params
    return make


OPS = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": lambda rng: (T.div, [rng.normal(size=(2, 3)), away_from_zero(rng, (2, 3), 0.5, 2.0)]),
    "add_broadcast": lambda rng: (T.add, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))]),
    "mul_broadcast": lambda rng: (T.mul, [rng.normal(size=(2, 1, 4)), rng.normal(size=(3, 1))]),
    "neg": lambda rng: (T.neg, [rng.normal(size=(3, 2))]),
    "power": lambda rng: (lambda x: T.power(x, 3.0), [rng.normal(size=(2, 3))]),
    "power_frac": lambda rng: (lambda x: T.power(x, 0.5), [rng.uniform(0.5, 2.0, size=(2, 3))]),
    "sum_axis": lambda rng: (lambda x: T.tsum(x, axis=1, keepdims=True), [rng.normal(size=(2, 3, 2))]),
    "mean": lambda rng: (lambda x: T.mean(x, axis=(0, 2)), [rng.normal(size=(2, 3, 2))]),
    "reshape": lambda rng: (lambda x: T.reshape(x, (3, 4)), [rng.normal(size=(2, 6))]),
    "transpose": lambda rng: (lambda x: T.transpose(x, (2, 0, 1)), [rng.normal(size=(2, 3, 4))]),
    "matmul": lambda rng: (T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "matmul_batched": lambda rng: (T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
    "matmul_batch_by_2d": lambda rng: (T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]),
    "relu": lambda rng: (T.relu, [away_from_zero(rng, (3, 4))]),
    "leaky_relu": lambda rng: (T.leaky_relu, [away_from_zero(rng, (3, 4))]),
    "sigmoid": lambda rng: (T.sigmoid, [rng.normal(scale=2.0, size=(3, 4))]),
    "tanh": lambda rng: (T.tanh, [rng.normal(size=(3, 4))]),
    "softmax": lambda rng: (T.softmax, [rng.normal(size=(2, 3, 5))]),
    "conv2d": _conv(1, 0),
    "conv2d_stride2_pad1": _conv(2, 1),
    "conv2d_transpose": _tconv,
    "maxpool2d": lambda rng: (T.maxpool2d, [distinct(rng, (2, 5, 4, 2))]),
    "layer_norm": lambda rng: (T.layer_norm, [rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)]),
    "batch_norm": lambda rng: (lambda x, g, b: T.batch_norm(x, g, b)[0],
                               [rng.normal(size=(4, 2, 2, 3)), rng.normal(size=3), rng.normal(size=3)]),
    "dropout": lambda rng: (lambda x: T.dropout(x, 0.5, np.random.default_rng(7)), [rng.normal(size=(4, 5))]),
    "bce": lambda rng: _bce(rng),
    "lsgan_d": lambda rng: (lambda r, f: lsgan_losses(r, f)[0],
                            [rng.uniform(0.05, 0.95, size=(4, 1)), rng.uniform(0.05, 0.95, size=(4, 1))]),
    "lsgan_g": lambda rng: (lambda r, f: lsgan_losses(r, f)[1],
                            [rng.uniform(0.05, 0.95, size=(4, 1)), rng.uniform(0.05, 0.95, size=(4, 1))]),
    "flatten": lambda rng: (L.flatten, [rng.normal(size=(2, 2, 3, 2))]),
    "extract_patches": lambda rng: (lambda x: L.extract_patches(x, 2), [rng.normal(size=(2, 4, 4, 3))]),
    "global_avg_pool": lambda rng: (L.global_avg_pool, [rng.normal(size=(2, 5, 3))]),
}


LAYERS = {
    "Dense": _layer(lambda r: L.Dense(4, 3, "sigmoid", r, F64), (2, 4)),
    "Dense_relu": _layer(lambda r: L.Dense(4, 3, "relu", r, F64), (2, 4), lambda r, s: away_from_zero(r, s)),
    "Conv2D": _layer(lambda r: L.Conv2D(2, 3, 3, activation="tanh", rng=r, dtype=F64), (1, 5, 5, 2)),
    "Conv2D_k4s2p1": _layer(lambda r: L.Conv2D(2, 2, 4, 2, 1, "sigmoid", rng=r, dtype=F64, init="normal"),
                                  (1, 6, 6, 2)),
    "Conv2DTranspose": _layer(lambda r: L.Conv2DTranspose(3, 2, 4, 2, 1, "tanh", rng=r, dtype=F64), (1, 2, 2, 3)),
    "LayerNorm": _layer(lambda r: L.LayerNorm(5, dtype=F64), (2, 3, 5)),
    "BatchNorm": _layer(lambda r: L.BatchNorm(3, dtype=F64), (3, 2, 2, 3)),
    "MultiHeadAttention": _layer(lambda r: L.MultiHeadAttention(4, 2, r, F64), (2, 3, 4)),
    "Residual_MLP": _layer(lambda r: L.Residual([L.LayerNorm(4, dtype=F64), L.Dense(4, 6, "tanh", r, F64),
                                                 L.Dense(6, 4, None, r, F64)]), (2, 3, 4)),
    "Dropout": _layer(lambda r: L.Dropout(0.3), (3, 4)),
    "Rescale": _layer(lambda r: Rescale(), (2, 3)),
    "Activation_softmax": _layer(lambda r: L.Activation("softmax"), (2, 4)),
    "MaxPool2D": _layer(lambda r: L.MaxPool2D(), (1, 4, 4, 2), lambda r, s: distinct(r, s)),
    "PatchExtract": _layer(lambda r: L.PatchExtract(2), (1, 4, 4, 1)),
    "GlobalAvgPool1D": _layer(lambda r: L.GlobalAvgPool1D(), (2, 3, 4)),
}

ALL = {**{f"op:{k}": v for k, v in OPS.items()}, **{f"layer:{k}": v for k, v in LAYERS.items()}}
