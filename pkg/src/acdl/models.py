"""Architecture builders: CNN, FTCNN, ViT classifiers and the DCGAN pair."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ShapeError

CLASSIFIER_TAGS = ("cnn", "ftcnn", "vit")


class ModelGraph:
    """Ordered layers plus a named parameter registry.

    ``config`` is a JSON-able dict that, together with ``tag``, is enough to
    rebuild the architecture via :func:`build`.
    """

    def __init__(self, tag, layers, input_spec, config, dtype=np.float32):
        self.tag = tag
        self.layers = list(layers)
        self.input_spec = tuple(input_spec)
        self.config = dict(config)
        self.dtype = np.dtype(dtype)
        names = list(self.parameters())
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")

    @property
    def is_classifier(self):
        return self.tag in CLASSIFIER_TAGS

    def _prefix(self, i, layer):
        return f"{i:02d}.{layer.name}"

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(self._prefix(i, layer)))
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(self._prefix(i, layer)))
        return out

    def param_count(self):
        return sum(p.size for p in self.parameters().values())

    def summary(self):
        return [row for layer in self.layers for row in layer.rows()]

    def forward(self, x, training=False, rng=None):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.input_spec:
            raise ShapeError(f"{self.tag} expects inputs of shape [N, {self.input_spec}], got {x.shape}")
        for layer in self.layers:
            x = layer(x, training=training, rng=rng)
        return x

    __call__ = forward

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __repr__(self):
        return f"ModelGraph({self.tag}, {len(self.layers)} layers, {self.param_count()} params)"


def _conv_stack(widths, input_spec, rng, dtype):
    h, w, c = input_spec
    layers = []
    for width in widths:
        if h < 3 or w < 3:
            raise ShapeError(f"input {tuple(input_spec)} too small for {len(widths)} conv/pool stages")
        h, w = h - 2, w - 2
        layers.append(L.Conv2D(c, width, 3, activation="relu", rng=rng, dtype=dtype))
        if h < 2 or w < 2:
            raise ShapeError(f"input {tuple(input_spec)} too small for {len(widths)} conv/pool stages")
        h, w, c = h // 2, w // 2, width
        layers.append(L.MaxPool2D())
    return layers, (h, w, c)


def conv_feature_shape(input_spec, widths):
    """Pre-flatten map shape after ``len(widths)`` valid 3x3 conv + 2x2 pool stages."""
    h, w, _ = input_spec
    for width in widths:
        h, w = (h - 2) // 2, (w - 2) // 2
    return h, w, widths[-1]


def build_cnn(input_spec=(224, 224, 3), seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    layers, (h, w, c) = _conv_stack((32, 64, 128), input_spec, rng, dtype)
    layers += [
        L.Flatten(),
        L.Dense(h * w * c, 256, "relu", rng, dtype),
        L.Dense(256, 1, "sigmoid", rng, dtype),
    ]
    return ModelGraph("cnn", layers, input_spec, {"input_spec": list(input_spec)}, dtype)


def build_ftcnn(input_spec=(224, 224, 3), seed=0, dtype=np.float32, dropout=0.5):
    rng = np.random.default_rng(seed)
    layers, (h, w, c) = _conv_stack((32, 64, 128, 256), input_spec, rng, dtype)
    layers += [
        L.Flatten(),
        L.Dense(h * w * c, 512, "relu", rng, dtype),
        L.Dropout(dropout),
        L.Dense(512, 1, "sigmoid", rng, dtype),
    ]
    config = {"input_spec": list(input_spec), "dropout": dropout}
    return ModelGraph("ftcnn", layers, input_spec, config, dtype)


@dataclass
class VitConfig:
    image_size: int = 224
    channels: int = 3
    patch_size: int = 16
    projection_dim: int = 64
    heads: int = 4
    transformer_layers: int = 8
    mlp_hidden: int = 128

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def d_k(self):
        return self.projection_dim // self.heads

    def validate(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.projection_dim % self.heads:
            raise ShapeError(f"projection_dim {self.projection_dim} not divisible by {self.heads} heads")
        if self.transformer_layers < 0:
            raise ValueError("transformer_layers must be >= 0")


def vit_param_count(cfg):
    """Closed-form parameter count of :func:`build_vit`."""
    pd, hid = cfg.projection_dim, cfg.mlp_hidden
    block = (2 * pd                      # layer norm
             + 4 * (pd * pd + pd)        # Q, K, V, output projections
             + 2 * pd                    # layer norm
             + pd * hid + hid            # dense hidden
             + hid * pd + pd)            # dense back to pd
    return (cfg.projection_dim * cfg.patch_dim + pd
            + cfg.transformer_layers * block
            + 2 * pd
            + pd * 1 + 1)


def build_vit(config=None, seed=0, dtype=np.float32):
    cfg = config or VitConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    pd = cfg.projection_dim
    layers = [
        L.PatchExtract(cfg.patch_size),
        L.Reshape((cfg.num_patches, cfg.patch_dim)),
        L.Dense(cfg.patch_dim, pd, None, rng, dtype),
    ]
    for _ in range(cfg.transformer_layers):
        layers.append(L.Residual([L.LayerNorm(pd, dtype=dtype),
                                  L.MultiHeadAttention(pd, cfg.heads, rng, dtype)]))
        layers.append(L.Residual([L.LayerNorm(pd, dtype=dtype),
                                  L.Dense(pd, cfg.mlp_hidden, "relu", rng, dtype),
                                  L.Dense(cfg.mlp_hidden, pd, None, rng, dtype)]))
    layers += [
        L.LayerNorm(pd, dtype=dtype),
        L.GlobalAvgPool1D(),
        L.Dense(pd, 1, "sigmoid", rng, dtype),
    ]
    spec = (cfg.image_size, cfg.image_size, cfg.channels)
    return ModelGraph("vit", layers, spec, asdict(cfg), dtype)


class Rescale(L.Layer):
    """Maps tanh output from [-1, 1] onto [0, 1]."""

    kind = "Rescaling"
    name = "rescale"

    def forward(self, x, training=False, rng=None):
        return (x + 1.0) * 0.5


def _gan_stages(image_spec):
    h, w, _ = image_spec
    if h != w or h < 16 or h & (h - 1):
        raise ShapeError(f"DCGAN supports square power-of-two images >= 16, got {tuple(image_spec)}")
    return int(math.log2(h // 4))


def build_generator(latent_dim=100, image_spec=(32, 32, 3), seed=0, dtype=np.float32):
    stages = _gan_stages(image_spec)
    rng = np.random.default_rng(seed)
    layers = [L.Dense(latent_dim, 4 * 4 * 256, None, rng, dtype), L.Reshape((4, 4, 256))]
    prev = 256
    for i in range(stages):
        width = max(128 >> i, 16)
        layers += [
            L.Conv2DTranspose(prev, width, 4, 2, 1, use_bias=False, rng=rng, dtype=dtype),
            L.BatchNorm(width, dtype=dtype),
            L.Activation("relu"),
        ]
        prev = width
    layers += [
        L.Conv2DTranspose(prev, image_spec[2], 3, 1, 1, rng=rng, dtype=dtype),
        L.Activation("tanh"),
        Rescale(),
    ]
    config = {"latent_dim": latent_dim, "image_spec": list(image_spec)}
    return ModelGraph("gan_generator", layers, (latent_dim,), config, dtype)


def build_discriminator(image_spec=(32, 32, 3), seed=0, dtype=np.float32):
    _gan_stages(image_spec)
    rng = np.random.default_rng(seed)
    h, _, c = image_spec
    layers = []
    for width in (32, 64, 128, 256):
        layers.append(L.Conv2D(c, width, 4, stride=2, pad=1, activation="leaky_relu",
                               rng=rng, dtype=dtype, init="normal"))
        c, h = width, h // 2
    layers += [L.Flatten(), L.Dense(h * h * c, 1, "sigmoid", rng, dtype)]
    return ModelGraph("gan_discriminator", layers, image_spec, {"image_spec": list(image_spec)}, dtype)


def build_dcgan(latent_dim=100, image_spec=(32, 32, 3), seed=0, dtype=np.float32):
    """Returns ``(generator, discriminator)``."""
    seeds = np.random.SeedSequence(seed).generate_state(2)
    return (build_generator(latent_dim, image_spec, int(seeds[0]), dtype),
            build_discriminator(image_spec, int(seeds[1]), dtype))


def _vit_from(config, seed=0, dtype=np.float32):
    return build_vit(VitConfig(**config), seed, dtype)


BUILDERS = {
    "cnn": lambda cfg, **kw: build_cnn(tuple(cfg["input_spec"]), **kw),
    "ftcnn": lambda cfg, **kw: build_ftcnn(tuple(cfg["input_spec"]), dropout=cfg.get("dropout", 0.5), **kw),
    "vit": lambda cfg, **kw: _vit_from(cfg, **kw),
    "gan_generator": lambda cfg, **kw: build_generator(cfg["latent_dim"], tuple(cfg["image_spec"]), **kw),
    "gan_discriminator": lambda cfg, **kw: build_discriminator(tuple(cfg["image_spec"]), **kw),
}


def build(tag, config, seed=0, dtype=np.float32):
    """Rebuild an architecture from its ``(tag, config)`` descriptor."""
    try:
        builder = BUILDERS[tag]
    except KeyError:
        raise ValueError(f"unknown architecture tag {tag!r}") from None
    return builder(config, seed=seed, dtype=dtype)


def predict(model, images, batch_size=64):
    """Eval-mode scores and labels; label is 1 iff score >= 0.5."""
    if not model.is_classifier:
        raise ValueError(f"predict() needs a classifier graph, got {model.tag!r}")
    images = np.asarray(images)
    scores = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images[start:start + batch_size], training=False)
            scores.append(out.data.reshape(-1))
    scores = np.concatenate(scores) if scores else np.zeros(0, dtype=model.dtype)
    return (scores >= 0.5).astype(np.int64), scores
