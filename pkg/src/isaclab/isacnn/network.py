"""ISACNN and FC-NN: a shared trunk, two sigmoid heads and the Lambda stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (BatchNorm, Conv1D, Dense, Flatten, Layer, ReLU, Sigmoid,
                     layer_from_spec)

# (filters, kernel) of the convolutional trunk.
ISACNN_CONVS = ((2, 5), (4, 3), (8, 3))

# Raw features are tiny (channel entries ~1e-5), far below the usual batch
# norm epsilon, so the input layer standardises with a negligible one.
INPUT_BN_EPS = 1e-20


@dataclass
class LambdaOutput:
    theta: np.ndarray   # (B, n_tx) head-A sigmoid outputs
    eta: np.ndarray     # (B,) head-B sigmoid output
    sigma_pred: np.ndarray  # (B, n_tx) feasible power spectra


def lambda_forward(theta, eta, budget):
    """Normalise, sort descending and scale to ``eta * budget``.

    Returns the spectra plus what the backward pass needs. Normalisation is
    in l1, so each spectrum sums to exactly ``eta * budget``.
    """
    theta = np.asarray(theta, dtype=float)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    budget = np.broadcast_to(np.asarray(budget, dtype=float), eta.shape)
    total = theta.sum(axis=1, keepdims=True)
    # Saturated sigmoids can underflow a whole row to zero; split it evenly.
    dead = total[:, 0] <= 0
    total = np.where(dead[:, None], 1.0, total)
    u = theta / total
    u[dead] = 1.0 / theta.shape[1]
    # Stable sort on the negated values: ties keep their original order.
    perm = np.argsort(-u, axis=1, kind="stable")
    u_sorted = np.take_along_axis(u, perm, axis=1)
    scale = (eta * budget)[:, None]
    sigma = u_sorted * scale
    # Rounding can push the sum a few ulps past the budget; shrink those rows.
    # Scaling by a positive constant keeps the order, and the change is far
    # below anything the backward pass could see.
    for _ in range(8):
        over = sigma.sum(axis=1) > budget
        if not over.any():
            break
        sigma[over] *= 1.0 - 4 * np.finfo(float).eps
    return sigma, (theta, total, perm, u_sorted, scale, budget, dead)


def lambda_backward(g_sigma, cache):
    theta, total, perm, u_sorted, scale, budget, dead = cache
    g_sorted = g_sigma * scale
    g_eta = budget * np.sum(g_sigma * u_sorted, axis=1)
    g_u = np.empty_like(g_sorted)
    np.put_along_axis(g_u, perm, g_sorted, axis=1)
    g_theta = g_u / total - np.sum(g_u * theta, axis=1, keepdims=True) / total ** 2
    g_theta[dead] = 0.0
    return g_theta, g_eta


class Network:
    """Trunk followed by a theta head (n_tx sigmoids) and an eta head (1 sigmoid)."""

    def __init__(self, arch: str, input_len: int, n_tx: int, trunk, head_theta, head_eta):
        self.arch = arch
        self.input_len = int(input_len)
        self.n_tx = int(n_tx)
        self.trunk: list[Layer] = list(trunk)
        self.head_theta: list[Layer] = list(head_theta)
        self.head_eta: list[Layer] = list(head_eta)
        self._lambda_cache = None

    # -- structure ---------------------------------------------------------

    @property
    def layers(self) -> list[Layer]:
        return self.trunk + self.head_theta + self.head_eta

    def header(self) -> dict:
        return {
            "arch": self.arch, "input_len": self.input_len, "n_tx": self.n_tx,
            "trunk": [l.spec() for l in self.trunk],
            "head_theta": [l.spec() for l in self.head_theta],
            "head_eta": [l.spec() for l in self.head_eta],
        }

    @classmethod
    def from_header(cls, header: dict) -> "Network":
        return cls(header["arch"], header["input_len"], header["n_tx"],
                   [layer_from_spec(s) for s in header["trunk"]],
                   [layer_from_spec(s) for s in header["head_theta"]],
                   [layer_from_spec(s) for s in header["head_eta"]])

    def named_params(self):
        """``(name, array)`` pairs in a fixed order."""
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"{i}.{layer.kind}.{key}", layer.params[key]

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.buffers):
                yield f"{i}.{layer.kind}.{key}", layer.buffers[key]

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"{i}.{layer.kind}.{key}", layer.grads[key]

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.named_params()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for layer in self.layers:
            for key in sorted(layer.params):
                p = layer.params[key]
                layer.params[key] = np.array(flat[pos:pos + p.size], dtype=float).reshape(p.shape)
                pos += p.size
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")

    def get_buffers(self) -> np.ndarray:
        bufs = [b.ravel() for _, b in self.named_buffers()]
        return np.concatenate(bufs) if bufs else np.zeros(0)

    def set_buffers(self, flat: np.ndarray) -> None:
        pos = 0
        for layer in self.layers:
            for key in sorted(layer.buffers):
                b = layer.buffers[key]
                layer.buffers[key] = np.array(flat[pos:pos + b.size], dtype=float).reshape(b.shape)
                pos += b.size
        if pos != flat.size:
            raise ValueError(f"expected {pos} buffer values, got {flat.size}")

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([g.ravel() for _, g in self.named_grads()])

    def copy(self) -> "Network":
        net = Network.from_header(self.header())
        net.set_flat(self.get_flat())
        net.set_buffers(self.get_buffers())
        return net

    # -- computation -------------------------------------------------------

    def forward(self, features, budget, mode: str = "infer",
                update_stats: bool = True) -> LambdaOutput:
        """Map feature vectors to feasible power spectra.

        ``mode='train'`` uses batch statistics and caches activations for
        :meth:`backward`; ``update_stats=False`` leaves the running batch
        norm statistics untouched (used by gradient checks).
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        train = mode == "train"
        x = np.atleast_2d(np.asarray(features, dtype=float))
        if x.shape[1] != self.input_len:
            raise ValueError(f"expected {self.input_len} features, got {x.shape[1]}")
        if self.arch == "isacnn":
            x = x[:, None, :]
        for layer in self.trunk:
            x = layer.forward(x, train, update_stats)
        a = x
        for layer in self.head_theta:
            a = layer.forward(a, train, update_stats)
        b = x
        for layer in self.head_eta:
            b = layer.forward(b, train, update_stats)
        sigma, cache = lambda_forward(a, b[:, 0], budget)
        self._lambda_cache = cache if train else None
        if not train:
            for layer in self.layers:
                layer._cache = None
        return LambdaOutput(a, b[:, 0], sigma)

    def backward(self, grad_sigma) -> None:
        """Accumulate parameter gradients for an upstream spectrum gradient."""
        if self._lambda_cache is None:
            raise RuntimeError("backward needs a preceding train-mode forward")
        g_theta, g_eta = lambda_backward(np.asarray(grad_sigma, dtype=float), self._lambda_cache)
        for layer in reversed(self.head_theta):
            g_theta = layer.backward(g_theta)
        g_b = g_eta[:, None]
        for layer in reversed(self.head_eta):
            g_b = layer.backward(g_b)
        g = g_theta + g_b
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        self._lambda_cache = None


def _heads(width: int, n_tx: int, rng):
    head_theta = [BatchNorm(width), Dense(width, n_tx, rng), Sigmoid()]
    head_eta = [BatchNorm(width), Dense(width, 1, rng), Sigmoid()]
    return head_theta, head_eta


def build_isacnn(input_len: int, n_tx: int, rng=None, convs=ISACNN_CONVS) -> Network:
    """BN -> Conv -> ReLU blocks, flatten, then the two BN -> FC -> sigmoid heads."""
    rng = rng if rng is not None else np.random.default_rng(0)
    trunk: list[Layer] = []
    c_in = 1
    for i, (filters, kernel) in enumerate(convs):
        bn = BatchNorm((c_in, input_len), eps=INPUT_BN_EPS) if i == 0 else BatchNorm((c_in, input_len))
        trunk += [bn, Conv1D(c_in, filters, kernel, rng), ReLU()]
        c_in = filters
    trunk.append(Flatten())
    head_theta, head_eta = _heads(c_in * input_len, n_tx, rng)
    return Network("isacnn", input_len, n_tx, trunk, head_theta, head_eta)


def build_fcnn(input_len: int, n_tx: int, rng=None) -> Network:
    """Fully connected baseline: 8, 4 and 2 times n_tx ReLU units, then the heads."""
    rng = rng if rng is not None else np.random.default_rng(0)
    trunk: list[Layer] = []
    d_in = input_len
    for mult in (8, 4, 2):
        d_out = mult * n_tx
        bn = BatchNorm(d_in, eps=INPUT_BN_EPS) if mult == 8 else BatchNorm(d_in)
        trunk += [bn, Dense(d_in, d_out, rng), ReLU()]
        d_in = d_out
    head_theta, head_eta = _heads(d_in, n_tx, rng)
    return Network("fcnn", input_len, n_tx, trunk, head_theta, head_eta)


def build_network(arch: str, input_len: int, n_tx: int, rng=None) -> Network:
    if arch == "isacnn":
        return build_isacnn(input_len, n_tx, rng)
    if arch == "fcnn":
        return build_fcnn(input_len, n_tx, rng)
    raise ValueError(f"unknown architecture {arch!r}")
