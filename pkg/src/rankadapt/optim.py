"""Decoupled weight-decay Adam for adapter parameters.

Decay is applied only to 2-D weight matrices (names ending in ``.w``,
``.wq``, ``.wk``, ``.wv``, ``.wo``); norm gains, biases, and learnable
token banks are excluded so their scale is set by the data, not pulled
toward zero.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor
from .model import AdapterParams

_DECAYED_SUFFIXES = (".w", ".wq", ".wk", ".wv", ".wo")


def is_decayed(name: str) -> bool:
    """Return True when weight decay applies to the named parameter."""
    return name.endswith(_DECAYED_SUFFIXES)


class AdamW:
    """Adam with decoupled weight decay over an :class:`AdapterParams` dict.

    Moments are kept in the parameter dtype. ``step()`` consumes the
    ``.grad`` buffers produced by ``backward()``; call ``zero_grad()``
    before each new backward pass.
    """

    def __init__(self, params: AdapterParams, lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01) -> None:
        if lr < 0.0 or weight_decay < 0.0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {betas}")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(t.values) for n, t in params.items()}
        self._v = {n: np.zeros_like(t.values) for n, t in params.items()}

    def zero_grad(self) -> None:
        for _, t in self.params.items():
            t.grad = None

    def step(self) -> None:
        """Apply one update; parameters without a gradient are skipped."""
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.values.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape "
                                 f"{p.values.shape} for {name}")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and is_decayed(name):
                update = update + self.weight_decay * p.values
            p.values -= np.asarray(self.lr * update, dtype=p.values.dtype)


def clip_grad_norm(params: AdapterParams, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Parameters without gradients contribute 0.
    """
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad.astype(np.float64))))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad = np.asarray(t.grad * scale, dtype=t.grad.dtype)
    return norm
