"""Unsupervised training of the spectrum predictor.

The loss is the negative batch-mean WSNR, so no labels are needed: the
network output is fed straight into the rate expressions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..metrics import BatchRates, PowerSpectrum, RatePair, Waveform, wsnr
from ..scene import Dataset, Scene, build_features, check_dims
from ..solvers import BeamformerSet, recover_beams, recover_waveform
from .network import Network, build_network

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 0.001
    max_epochs: int = 500
    batch_size: int = 256
    early_stop_patience: int = 20
    plateau_patience: int = 10
    plateau_factor: float = 0.33
    val_split: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_delta: float = 1e-5
    seed: int = 0


def _rates(scenes) -> BatchRates:
    return scenes if isinstance(scenes, BatchRates) else BatchRates(list(scenes))


def loss(sigma_pred_batch, scenes, alpha: float) -> float:
    """Negative mean WSNR of a batch of predicted spectra."""
    rates = _rates(scenes)
    return float(-np.mean(rates.wsnr(np.atleast_2d(sigma_pred_batch), alpha)))


def loss_grad_sigma(sigma_pred, scene, alpha: float) -> np.ndarray:
    """Gradient of the single-sample loss ``-wsnr`` with respect to the spectrum."""
    rates = _rates([scene] if isinstance(scene, Scene) else scene)
    return -rates.wsnr_grad(np.atleast_2d(sigma_pred), alpha)[0]


class Adam:
    def __init__(self, shapes: Sequence[tuple], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list, grads: list) -> list:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass
class TrainRun:
    """Mutable training state; enough to resume a run bit-exactly."""

    arch: str
    alpha: float
    config: TrainConfig
    net: Network
    adam: Adam
    epoch: int = 0
    lr: float = 0.001
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: np.ndarray | None = None
    best_buffers: np.ndarray | None = None
    wait_plateau: int = 0
    wait_stop: int = 0
    stopped: bool = False
    history: list = field(default_factory=list)  # (epoch, train, val, lr)

    def best_network(self) -> Network:
        net = self.net.copy()
        if self.best_params is not None:
            net.set_flat(self.best_params)
            net.set_buffers(self.best_buffers)
        return net

    def log_rows(self):
        """Per-epoch records with the running best validation loss."""
        best = math.inf
        for ep, tr, va, lr in self.history:
            best = min(best, va)
            yield ep, tr, va, best, lr


def _layer_params(net: Network):
    return [(layer, key) for layer in net.layers for key in sorted(layer.params)]


def _prepare(samples: Sequence[Scene]):
    X = np.stack([build_features(s) for s in samples])
    return X, BatchRates(samples)


def new_run(dataset: Dataset, config: TrainConfig, arch: str = "isacnn",
            alpha: float = 0.5) -> TrainRun:
    cfg = dataset.config
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(7,)))
    net = build_network(arch, cfg.feature_len, cfg.n_tx, rng)
    adam = Adam([p.shape for _, p in net.named_params()], config.lr_init,
                config.beta1, config.beta2, config.adam_eps)
    return TrainRun(arch, alpha, config, net, adam, lr=config.lr_init)


def train(dataset: Dataset, config: TrainConfig | None = None, arch: str = "isacnn",
          alpha: float | None = None, run: TrainRun | None = None,
          max_new_epochs: int | None = None,
          on_epoch: Callable[[TrainRun], None] | None = None):
    """Train (or resume training) a spectrum predictor.

    Parameters
    ----------
    dataset : Dataset
        Scenes with precomputed normalisers. The trailing ``val_split``
        fraction is held out for validation.
    config : TrainConfig
        Optimiser and schedule settings.
    arch : {'isacnn', 'fcnn'}
    alpha : float
        Sensing weight of the objective (defaults to the dataset config).
    run : TrainRun, optional
        State from an earlier call; training continues from its epoch.
    max_new_epochs : int, optional
        Stop after this many epochs in this call (the run stays resumable).

    Returns
    -------
    (Network, TrainRun)
        The best-validation network and the full training state.
    """
    if run is None:
        config = config or TrainConfig()
        alpha = dataset.config.alpha if alpha is None else alpha
        run = new_run(dataset, config, arch, alpha)
    config, alpha = run.config, run.alpha
    check_dims(dataset.samples)
    split = Dataset(dataset.config, dataset.samples, config.val_split)
    tr, va = split.train_val()
    if not tr or not va:
        raise ValueError("need at least one training and one validation sample")
    X_tr, R_tr = _prepare(tr)
    X_va, R_va = _prepare(va)
    net = run.net
    slots = _layer_params(net)
    n = len(tr)
    bs = config.batch_size
    done = 0

    while not run.stopped and run.epoch < config.max_epochs:
        if max_new_epochs is not None and done >= max_new_epochs:
            break
        order = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(11, run.epoch))).permutation(n)
        run.adam.lr = run.lr
        total = 0.0
        for a in range(0, n, bs):
            idx = order[a:a + bs]
            rates = R_tr.subset(idx)
            out = net.forward(X_tr[idx], rates.budget, mode="train")
            w = rates.wsnr(out.sigma_pred, alpha)
            batch_loss = -float(np.mean(w))
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {run.epoch}, batch starting {a}")
            total += batch_loss * len(idx)
            g_sigma = -rates.wsnr_grad(out.sigma_pred, alpha) / len(idx)
            net.backward(g_sigma)
            params = [layer.params[k] for layer, k in slots]
            grads = [layer.grads[k] for layer, k in slots]
            for (layer, k), p in zip(slots, run.adam.step(params, grads)):
                layer.params[k] = p
        train_loss = total / n
        out = net.forward(X_va, R_va.budget, mode="infer")
        val_loss = -float(np.mean(R_va.wsnr(out.sigma_pred, alpha)))
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {run.epoch}")
        run.history.append((run.epoch, train_loss, val_loss, run.lr))
        log.debug("epoch %d train %.6f val %.6f lr %.3g", run.epoch, train_loss, val_loss, run.lr)

        if val_loss < run.best_val - config.min_delta:
            run.best_val, run.best_epoch = val_loss, run.epoch
            run.best_params = net.get_flat()
            run.best_buffers = net.get_buffers()
            run.wait_plateau = run.wait_stop = 0
        else:
            run.wait_plateau += 1
            run.wait_stop += 1
            if run.wait_plateau >= config.plateau_patience:
                run.lr *= config.plateau_factor
                run.wait_plateau = 0
            if run.wait_stop >= config.early_stop_patience:
                run.stopped = True
        run.epoch += 1
        done += 1
        if on_epoch is not None:
            on_epoch(run)

    return run.best_network(), run


def predict_batch(net: Network, scenes: Sequence[Scene]) -> np.ndarray:
    X = np.stack([build_features(s) for s in scenes])
    budget = np.array([s.sense_power for s in scenes])
    return net.forward(X, budget, mode="infer").sigma_pred


def predict(net: Network, scene: Scene, alpha: float):
    """Full pipeline for one scene: spectrum, waveform, beams and rates."""
    if scene.n_tx != net.n_tx or 2 * scene.n_rx * scene.n_cu + scene.n_tx != net.input_len:
        raise ValueError("network dimensions do not match the scene")
    sigma = predict_batch(net, [scene])[0]
    spec = PowerSpectrum(np.minimum(sigma, scene.sense_power), scene.sense_power)
    S: Waveform = recover_waveform(spec, scene.tcm_eigvecs, scene.wave_len)
    beams: BeamformerSet = recover_beams(spec, scene)
    rates: RatePair = wsnr(spec, scene, alpha)
    return spec, S, beams, rates
