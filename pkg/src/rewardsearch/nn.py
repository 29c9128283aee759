"""Small ReLU perceptrons with hand-written backward passes, plus Adam."""

from __future__ import annotations

import numpy as np


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.normal(size=(max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


class MLP:
    """in -> hidden... -> out, ReLU between layers, linear output.

    Parameters live in ``self.params`` under keys ``W0, b0, W1, b1, ...``.
    """

    def __init__(self, sizes, rng: np.random.Generator, out_gain: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.params: dict[str, np.ndarray] = {}
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            gain = out_gain if k == n_layers - 1 else np.sqrt(2.0)
            self.params[f"W{k}"] = orthogonal(rng, (self.sizes[k], self.sizes[k + 1]), gain)
            self.params[f"b{k}"] = np.zeros(self.sizes[k + 1])

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Output and the per-layer inputs needed by :meth:`backward`."""
        p = self.params
        acts = [x]
        h = x
        for k in range(self.n_layers - 1):
            h = np.maximum(h @ p[f"W{k}"] + p[f"b{k}"], 0.0)
            acts.append(h)
        k = self.n_layers - 1
        return h @ p[f"W{k}"] + p[f"b{k}"], acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads = {}
        g = grad_out
        for k in range(self.n_layers - 1, -1, -1):
            a = acts[k]
            grads[f"W{k}"] = a.T @ g
            grads[f"b{k}"] = g.sum(axis=0)
            if k > 0:
                g = (g @ p[f"W{k}"].T) * (a > 0.0)
        return grads

    def copy(self) -> "MLP":
        new = object.__new__(MLP)
        new.sizes = self.sizes
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-5):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
