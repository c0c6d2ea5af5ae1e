"""Adversarial training of the DCGAN pair and synthetic image generation.

One step (:func:`gan_epoch`) performs exactly one discriminator update on
``b`` real and ``b`` fake images, then one generator update on ``b`` fresh
latents labelled real while the discriminator is frozen.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .data import ImageBuffer, write_image
from .errors import NonFiniteError, TrainingDiverged
from .models import build_dcgan
from .optim import Adam, bce_loss, lsgan_losses

logger = logging.getLogger(__name__)


@dataclass
class LatentSpec:
    dim: int = 100
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError(f"latent std must be positive, got {self.std}")


def sample_latent(spec, b, rng, dtype=np.float32):
    """``[b, dim]`` i.i.d. normal draws."""
    if b < 1:
        raise ValueError(f"need at least one latent vector, got {b}")
    return T.Tensor(rng.normal(spec.mean, spec.std, size=(b, spec.dim)), dtype=dtype)


@dataclass
class GanTrainConfig:
    batch_size: int = 32
    epochs: int = 50
    loss: str = "bce"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    latent_dim: int = 100
    report_interval: int = 100
    save_interval: int = 10
    seed: int = 0
    check_freeze: bool = False

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("GAN batch size must be >= 2")
        if self.report_interval < 1 or self.save_interval < 1:
            raise ValueError("report/save intervals must be >= 1")
        if self.loss not in ("bce", "lsgan"):
            raise ValueError(f"unknown GAN loss {self.loss!r}")


class GanStepStats(NamedTuple):
    l_d: float
    l_g: float
    d_acc_real: float
    d_acc_fake: float


@dataclass
class GanOptimizers:
    gen: Adam
    disc: Adam


def make_optimizers(gen, disc, config):
    kw = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    return GanOptimizers(Adam(gen.parameters(), **kw), Adam(disc.parameters(), **kw))


@contextmanager
def frozen(model):
    """Stop gradients reaching ``model``'s parameters for the enclosed block."""
    params = list(model.parameters().values())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def _assert_unchanged(model, snap, what):
    for k, p in model.parameters().items():
        if not np.array_equal(p.data, snap[k]):
            raise RuntimeError(f"freeze contract violated: {what} parameter {k} changed")


def gan_epoch(gen, disc, real_batch, config, opts, rng):
    """One discriminator update followed by one generator update."""
    real = np.asarray(real_batch, dtype=gen.dtype)
    b = len(real)
    if b < 2:
        raise ValueError(f"GAN step needs a batch of at least 2, got {b}")
    latent = LatentSpec(config.latent_dim)

    # discriminator: real -> 1, fake -> 0
    snap = _snapshot(gen) if config.check_freeze else None
    with T.no_grad():
        fake = gen(sample_latent(latent, b, rng, gen.dtype), training=True).data
    d_real = disc(real, training=True)
    d_fake = disc(fake, training=True)
    if config.loss == "bce":
        l_d = (bce_loss(d_real, np.ones(b)) + bce_loss(d_fake, np.zeros(b))) * 0.5
    else:
        l_d = lsgan_losses(d_real, d_fake)[0]
    opts.disc.zero_grad()
    l_d.backward()
    opts.disc.step()
    acc_real = float(np.mean(d_real.data >= 0.5))
    acc_fake = float(np.mean(d_fake.data < 0.5))
    if snap is not None:
        _assert_unchanged(gen, snap, "generator")

    # generator: fresh latents labelled real, discriminator frozen
    snap = _snapshot(disc) if config.check_freeze else None
    with frozen(disc):
        d_gen = disc(gen(sample_latent(latent, b, rng, gen.dtype), training=True), training=True)
        if config.loss == "bce":
            l_g = bce_loss(d_gen, np.ones(b))
        else:
            l_g = T.mean((d_gen - 1.0) ** 2)
        opts.gen.zero_grad()
        l_g.backward()
        opts.gen.step()
    if snap is not None:
        _assert_unchanged(disc, snap, "discriminator")
    return GanStepStats(l_d.item(), l_g.item(), acc_real, acc_fake)


def tile_grid(images, rows=8, cols=8):
    """Tile up to ``rows * cols`` ``[H, W, C]`` images into one canvas (unused cells black)."""
    images = np.asarray(images)
    _, h, w, c = images.shape
    canvas = np.zeros((rows * h, cols * w, c), dtype=images.dtype)
    for k, img in enumerate(images[: rows * cols]):
        r, q = divmod(k, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = img
    return canvas


def generate_images(gen, count, seed=0, spec=None, batch_size=64):
    """``count`` eval-mode samples in [0, 1], tagged synthetic."""
    if count <= 0:
        return []
    spec = spec or LatentSpec(gen.config["latent_dim"])
    rng = np.random.default_rng(seed)
    out = []
    with T.no_grad():
        for start in range(0, count, batch_size):
            z = sample_latent(spec, min(batch_size, count - start), rng, gen.dtype)
            out.extend(gen(z, training=False).data)
    return [ImageBuffer(np.clip(img, 0.0, 1.0), "synthetic") for img in out]


def discriminator_accuracy(gen, disc, real, rng):
    """Eval-mode accuracy on ``real`` plus an equal number of fresh fakes."""
    real = np.asarray(real, dtype=gen.dtype)
    b = len(real)
    with T.no_grad():
        fake = gen(sample_latent(LatentSpec(gen.config["latent_dim"]), b, rng, gen.dtype)).data
        d_real = disc(real).data.reshape(-1)
        d_fake = disc(fake).data.reshape(-1)
    return float((np.sum(d_real >= 0.5) + np.sum(d_fake < 0.5)) / (2 * b))


@dataclass
class GanResult:
    gen: object
    disc: object
    history: list = field(default_factory=list)
    epoch_stats: list = field(default_factory=list)
    archives: list = field(default_factory=list)


def train_gan(images, config, gen=None, disc=None, out_dir=None, log=None):
    """Run ``config.epochs`` passes of shuffled real batches through :func:`gan_epoch`.

    ``images`` is ``[N, H, W, C]`` in [0, 1].  Progress lines go to ``log``
    every ``report_interval`` epochs; an 8x8 sample grid is written to
    ``out_dir/samples/epoch_<n>.ppm`` every ``save_interval`` epochs.
    """
    config.validate()
    log = log or logger.info
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) < 2:
        raise ValueError(f"need at least 2 images [N, H, W, C], got {images.shape}")
    if gen is None or disc is None:
        gen, disc = build_dcgan(config.latent_dim, images.shape[1:], seed=config.seed)
    opts = make_optimizers(gen, disc, config)
    rng = np.random.default_rng(config.seed)
    fixed = np.random.default_rng([config.seed, 1])
    fixed_z = sample_latent(LatentSpec(config.latent_dim), 64, fixed, gen.dtype)
    result = GanResult(gen, disc)

    n, b = len(images), config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        steps = []
        for start in range(0, n, b):
            idx = order[start:start + b]
            if len(idx) < 2:
                continue
            try:
                stats = gan_epoch(gen, disc, images[idx], config, opts, rng)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            if not np.isfinite(stats[:2]).all():
                raise TrainingDiverged(epoch, "non-finite loss")
            steps.append(stats)
        result.history.extend(steps)
        mean = GanStepStats(*np.mean(steps, axis=0).tolist())
        result.epoch_stats.append(mean)
        if epoch % config.report_interval == 0:
            d_acc = 0.5 * (mean.d_acc_real + mean.d_acc_fake)
            log(f"epoch={epoch} l_d={mean.l_d:.6f} l_g={mean.l_g:.6f} d_acc={d_acc:.6f}")
        if out_dir is not None and epoch % config.save_interval == 0:
            result.archives.append(save_samples(gen, fixed_z, Path(out_dir) / "samples" / f"epoch_{epoch}.ppm"))
    return result


def save_samples(gen, z, path):
    with T.no_grad():
        imgs = gen(z, training=False).data
    path.parent.mkdir(parents=True, exist_ok=True)
    write_image(path, ImageBuffer(tile_grid(np.clip(imgs, 0.0, 1.0))))
    return path
