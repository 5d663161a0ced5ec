"""Layers with hand-written backward passes.

All arrays are float64 and batch-first. Convolutions work on
``(batch, channels, length)``; dense layers on ``(batch, features)``.
Each layer keeps whatever its backward pass needs from the last forward
call in train mode.
"""

from __future__ import annotations

import numpy as np


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, train=False, update_stats=True):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a train-mode forward")
        return self._cache

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class BatchNorm(Layer):
    """Batch normalisation applied to every element independently.

    Statistics are taken over the batch axis only, so each (channel,
    position) or feature has its own mean, variance, scale and shift.
    """

    kind = "batch_norm"

    def __init__(self, shape, eps=1e-5, momentum=0.9):
        super().__init__()
        self.shape = tuple(int(s) for s in np.atleast_1d(shape))
        self.eps = eps
        self.momentum = momentum
        self.params = {"gamma": np.ones(self.shape), "beta": np.zeros(self.shape)}
        self.buffers = {"mean": np.zeros(self.shape), "var": np.ones(self.shape)}
        self.zero_grads()

    def spec(self):
        return {"kind": self.kind, "shape": list(self.shape), "eps": self.eps,
                "momentum": self.momentum}

    def forward(self, x, train=False, update_stats=True):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                m = self.momentum
                self.buffers["mean"] = m * self.buffers["mean"] + (1 - m) * mu
                self.buffers["var"] = m * self.buffers["var"] + (1 - m) * var
        else:
            mu, var = self.buffers["mean"], self.buffers["var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        if train:
            self._cache = (xhat, inv_std)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, g):
        xhat, inv_std = self._need_cache()
        n = g.shape[0]
        self.grads["gamma"] = np.sum(g * xhat, axis=0)
        self.grads["beta"] = np.sum(g, axis=0)
        dxhat = g * self.params["gamma"]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                - xhat * np.sum(dxhat * xhat, axis=0))


class Conv1D(Layer):
    """Stride-1 'same' convolution along the feature axis."""

    kind = "conv1d"

    def __init__(self, c_in, c_out, kernel, rng=None):
        super().__init__()
        self.c_in, self.c_out, self.kernel = int(c_in), int(c_out), int(kernel)
        bound = 1.0 / np.sqrt(self.c_in * self.kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": rng.uniform(-bound, bound, (self.c_out, self.c_in, self.kernel)),
            "bias": np.zeros(self.c_out),
        }
        self.zero_grads()

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel}

    def _pads(self):
        left = (self.kernel - 1) // 2
        return left, self.kernel - 1 - left

    def _windows(self, x):
        left, right = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        n = x.shape[2]
        # (B, C_in, k, F): cols[b, c, j, f] = xp[b, c, f + j]
        idx = np.arange(self.kernel)[:, None] + np.arange(n)[None, :]
        return xp[:, :, idx]

    def forward(self, x, train=False, update_stats=True):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ValueError(f"conv1d expects (B, {self.c_in}, F), got {x.shape}")
        cols = self._windows(x)
        out = np.einsum("bckf,ock->bof", cols, self.params["weight"])
        out += self.params["bias"][None, :, None]
        if train:
            self._cache = (cols, x.shape)
        return out

    def backward(self, g):
        cols, shape = self._need_cache()
        self.grads["weight"] = np.einsum("bckf,bof->ock", cols, g)
        self.grads["bias"] = g.sum(axis=(0, 2))
        dcols = np.einsum("ock,bof->bckf", self.params["weight"], g)
        left, _ = self._pads()
        n = shape[2]
        dxp = np.zeros((shape[0], shape[1], n + self.kernel - 1))
        for j in range(self.kernel):
            dxp[:, :, j:j + n] += dcols[:, :, j, :]
        return dxp[:, :, left:left + n]


class Dense(Layer):
    kind = "fully_connected"

    def __init__(self, d_in, d_out, rng=None):
        super().__init__()
        self.d_in, self.d_out = int(d_in), int(d_out)
        bound = 1.0 / np.sqrt(self.d_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {"weight": rng.uniform(-bound, bound, (self.d_in, self.d_out)),
                       "bias": np.zeros(self.d_out)}
        self.zero_grads()

    def spec(self):
        return {"kind": self.kind, "d_in": self.d_in, "d_out": self.d_out}

    def forward(self, x, train=False, update_stats=True):
        if train:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, g):
        x = self._need_cache()
        self.grads["weight"] = x.T @ g
        self.grads["bias"] = g.sum(axis=0)
        return g @ self.params["weight"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, update_stats=True):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, g):
        return g * self._need_cache()


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, update_stats=True):
        # Split by sign to avoid overflow in exp.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        if train:
            self._cache = out
        return out

    def backward(self, g):
        y = self._need_cache()
        return g * y * (1.0 - y)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, update_stats=True):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())


def layer_from_spec(spec: dict) -> Layer:
    kind = spec["kind"]
    if kind == "batch_norm":
        return BatchNorm(spec["shape"], spec.get("eps", 1e-5), spec.get("momentum", 0.9))
    if kind == "conv1d":
        return Conv1D(spec["c_in"], spec["c_out"], spec["kernel"])
    if kind == "fully_connected":
        return Dense(spec["d_in"], spec["d_out"])
    simple = {"relu": ReLU, "sigmoid": Sigmoid, "flatten": Flatten}
    if kind not in simple:
        raise ValueError(f"unknown layer kind {kind!r}")
    return simple[kind]()
