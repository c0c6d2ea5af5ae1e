"""Adam optimizer and the classifier / adversarial losses."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError

BCE_CLIP = 1e-7


def adam_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of ``param`` in place; ``m``/``v`` updated in place.

    ``t`` is the 1-based step index after increment.
    """
    if grad.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam over a named parameter dict; parameters with ``grad is None`` are skipped."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr, beta1, beta2, eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self):
        s = self.state
        s.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_update(p.data, p.grad, s.m[name], s.v[name], s.t, s.lr, s.beta1, s.beta2, s.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def bce_loss(predicted, labels, eps=BCE_CLIP):
    """``-(1/N) sum[y log p + (1 - y) log(1 - p)]`` with ``p`` clipped to ``[eps, 1 - eps]``."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise ShapeError("bce_loss on an empty batch")
    if predicted.size != labels.size:
        raise ShapeError(f"bce_loss: {predicted.size} predictions vs {labels.size} labels")
    return T.bce(predicted, labels, eps)


def lsgan_losses(d_real, d_fake):
    """Least-squares adversarial losses over per-batch means.

    ``l_d = 0.5 mean((d_real - 1)^2) + 0.5 mean(d_fake^2)``,
    ``l_g = mean((d_fake - 1)^2)``.
    """
    d_real, d_fake = T.as_tensor(d_real), T.as_tensor(d_fake)
    l_d = T.mean((d_real - 1.0) ** 2) * 0.5 + T.mean(d_fake ** 2) * 0.5
    l_g = T.mean((d_fake - 1.0) ** 2)
    return l_d, l_g
