"""AdamW with decoupled weight decay and per-group learning-rate multipliers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Parameter groups are dicts: {"params": [Tensor, ...], "lr_mult": float}.

    The decay is decoupled: p <- p - lr_eff * wd * p, applied before the
    bias-corrected adaptive update, never folded into the gradient.  Params
    whose grad is None are skipped entirely.
    """

    def __init__(self, groups, lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.groups = []
        for g in groups:
            params = list(g["params"])
            self.groups.append({
                "params": params,
                "lr_mult": float(g.get("lr_mult", 1.0)),
                "name": g.get("name", ""),
                "m": [np.zeros_like(p.data) for p in params],
                "v": [np.zeros_like(p.data) for p in params],
            })
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        bc1 = np.float32(1.0 - self.beta1 ** self.t)
        bc2 = np.float32(1.0 - self.beta2 ** self.t)
        for group in self.groups:
            lr_eff = np.float32(self.lr * group["lr_mult"])
            wd = np.float32(self.weight_decay)
            for p, m, v in zip(group["params"], group["m"], group["v"]):
                if p.grad is None:
                    continue
                g = p.grad
                if g.shape != p.data.shape:
                    raise ValueError(f"grad shape {g.shape} does not match param {p.data.shape}")
                if self.weight_decay:
                    p.data -= (lr_eff * wd) * p.data
                m *= b1
                m += (np.float32(1.0) - b1) * g
                v *= b2
                v += (np.float32(1.0) - b2) * (g * g)
                mhat = m / bc1
                vhat = v / bc2
                p.data -= lr_eff * mhat / (np.sqrt(vhat) + np.float32(self.eps))

    def trainable_count(self) -> int:
        return sum(p.size for g in self.groups for p in g["params"])


def param_count(tensors) -> int:
    """Total element count of an iterable of tensors."""
    return sum(t.size if isinstance(t, Tensor) else int(np.prod(t.shape)) for t in tensors)
