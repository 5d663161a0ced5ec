"""Property checks reported as ``name residual threshold PASS|FAIL`` lines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .. import metrics, solvers
from ..isacnn.network import Network, build_isacnn
from ..isacnn.training import loss_grad_sigma
from ..scene import SystemConfig, build_features, make_scene, sample_rng

SCOPES = ("lemmas", "gradients", "oracles")


@dataclass(frozen=True)
class Check:
    name: str
    residual: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual < self.threshold)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.name} residual={self.residual:.3e} threshold={self.threshold:.1e} {flag}"


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_scene(rng, n_tx=4, n_rx=4, n_cu=2, wave_len=6, **kw):
    cfg = SystemConfig(n_tx=n_tx, n_rx=n_rx, n_cu=n_cu, wave_len=wave_len,
                       seed=int(rng.integers(2**32)), **kw)
    return make_scene(cfg, sample_rng(cfg.seed, 0))


def random_spectrum(rng, scene, fill=None):
    """Random feasible spectrum using a random fraction of the budget."""
    fill = rng.uniform(0.05, 1.0) if fill is None else fill
    x = rng.dirichlet(np.ones(scene.n_tx)) * fill * scene.sense_power
    return np.sort(x)[::-1]


# ---------------------------------------------------------------------------

def check_lemmas(rng, n=100) -> Iterator[Check]:
    worst_vec = worst_det = 0.0
    for _ in range(n):
        m, p, q, r = rng.integers(1, 5, size=4)
        A, B, C = _crandn(rng, m, p), _crandn(rng, p, q), _crandn(rng, q, r)
        scale = np.linalg.norm(A) * np.linalg.norm(B) * np.linalg.norm(C)
        worst_vec = max(worst_vec, metrics.kron_vec_identity(A, B, C) / scale)
        m, k = rng.integers(1, 5, size=2)
        A, B = _crandn(rng, m, m), _crandn(rng, m, m)
        C, D = _crandn(rng, k, k), _crandn(rng, k, k)
        lhs = abs(np.linalg.det(np.eye(m * k) + np.kron(A @ B, C @ D)))
        worst_det = max(worst_det, metrics.kron_det_identity(A, B, C, D) / max(lhs, 1e-300))
    yield Check("kron.vec_identity", worst_vec, 1e-10)
    yield Check("kron.det_identity", worst_det, 1e-8)


def check_mi_forms(rng, n=50) -> Iterator[Check]:
    worst_eq = worst_bound = 0.0
    for _ in range(n):
        n_tx = int(rng.integers(1, 9))
        sc = random_scene(rng, n_tx=n_tx, n_rx=int(rng.integers(1, 9)),
                          n_cu=int(rng.integers(1, 4)), wave_len=int(rng.integers(n_tx + 1, 13)))
        s = random_spectrum(rng, sc)
        S = solvers.recover_waveform(s, sc.tcm_eigvecs, sc.wave_len, rng)
        red = metrics.reduced_sense_rate(s, sc)
        full = metrics.sensing_mi_full(S, sc) / sc.wave_len
        worst_eq = max(worst_eq, abs(full - red) / red)
        # A waveform with arbitrary right singular vectors.
        S2 = _crandn(rng, sc.wave_len, n_tx)
        S2 *= np.sqrt(rng.uniform(0.05, 1) * sc.sense_power / np.vdot(S2, S2).real)
        sv2 = np.linalg.svd(S2, compute_uv=False) ** 2
        gap = metrics.sensing_mi_full(S2, sc) / sc.wave_len - metrics.reduced_sense_rate(sv2, sc)
        worst_bound = max(worst_bound, gap)
    yield Check("mi.form_equivalence", worst_eq, 1e-8)
    yield Check("mi.upper_bound_excess", max(worst_bound, 0.0), 1e-9)


def richardson_diff(f, x, i, rel=1e-3):
    """Central difference along coordinate ``i`` with one Richardson step (error O(h^4))."""
    h = rel * x[i]
    e = np.zeros_like(x)
    e[i] = h
    d1 = (f(x + e) - f(x - e)) / (2 * h)
    d2 = (f(x + e / 2) - f(x - e / 2)) / h
    return (4 * d2 - d1) / 3


def fd_check_sigma(rng, n=20) -> float:
    """Worst componentwise relative error of the loss gradient over ``n`` random points."""
    worst = 0.0
    for _ in range(n):
        sc = random_scene(rng)
        s = random_spectrum(rng, sc)
        alpha = rng.uniform()
        g = loss_grad_sigma(s, sc, alpha)

        def f(x):
            return -metrics.wsnr(x, sc, alpha).wsnr

        for i in range(sc.n_tx):
            fd = richardson_diff(f, s, i)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-300))
    return worst


def network_loss(net: Network, X, rates, alpha) -> float:
    out = net.forward(X, rates.budget, mode="train", update_stats=False)
    return -float(np.mean(rates.wsnr(out.sigma_pred, alpha)))


def fd_check_network(rng, n_tx=4, n_rx=2, n_cu=2, batch=6, h=1e-5, floor=1e-12):
    """Worst relative error between backprop and central differences over all parameters."""
    scenes = [random_scene(rng, n_tx=n_tx, n_rx=n_rx, n_cu=n_cu) for _ in range(batch)]
    rates = metrics.BatchRates(scenes)
    X = np.stack([build_features(s) for s in scenes])
    net = build_isacnn(X.shape[1], n_tx, np.random.default_rng(int(rng.integers(2**32))))
    alpha = 0.5
    out = net.forward(X, rates.budget, mode="train", update_stats=False)
    net.backward(-rates.wsnr_grad(out.sigma_pred, alpha) / batch)
    grads = net.flat_grads()
    flat = net.get_flat()
    worst = 0.0
    for j in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        net.set_flat(up)
        f_up = network_loss(net, X, rates, alpha)
        net.set_flat(dn)
        f_dn = network_loss(net, X, rates, alpha)
        fd = (f_up - f_dn) / (2 * h)
        worst = max(worst, abs(fd - grads[j]) / max(abs(fd), abs(grads[j]), floor))
    net.set_flat(flat)
    return worst, flat.size


def check_gradients(rng) -> Iterator[Check]:
    yield Check("grad.loss_sigma_fd", fd_check_sigma(rng), 1e-6)
    worst, _ = fd_check_network(rng)
    yield Check("grad.network_fd", worst, 1e-4)


def check_oracles(rng, n=20) -> Iterator[Check]:
    # MVDR: closed form vs direct SINR, and dominance over random beams.
    worst_sinr = worst_dom = worst_lag = 0.0
    for _ in range(n):
        sc = random_scene(rng, n_tx=4, n_rx=6, n_cu=3)
        s = random_spectrum(rng, sc)
        beams = solvers.mvdr_beams(s, sc)
        opt = metrics.optimal_sinrs(s, sc)
        for k, w in enumerate(beams.beams):
            worst_sinr = max(worst_sinr, abs(metrics.sinr_direct(w, k, s, sc) - opt[k]) / opt[k])
            W = _crandn(rng, 1000, sc.n_rx)
            for wr in W:
                worst_dom = max(worst_dom, metrics.sinr_direct(wr, k, s, sc) - opt[k])
        worst_lag = max(worst_lag, float(np.max(solvers.lagrange_residuals(beams, s, sc))))
    yield Check("mvdr.sinr_closed_form", worst_sinr, 1e-10)
    yield Check("mvdr.random_beam_excess", max(worst_dom, 0.0), 1e-12)
    yield Check("mvdr.lagrange_stationarity", worst_lag, 1e-8)

    worst_kkt = worst_power = 0.0
    for _ in range(n):
        n_tx = int(rng.integers(2, 9))
        g = np.sort(rng.uniform(0.01, 3, n_tx))[::-1]
        P = rng.uniform(0.1, 10)
        x, _ = solvers.waterfill(g, P)
        worst_kkt = max(worst_kkt, solvers.waterfill_kkt_residual(x, g, P))
        worst_power = max(worst_power, abs(x.sum() - P) / P)
    yield Check("waterfill.kkt", worst_kkt, 1e-10)
    yield Check("waterfill.total_power", worst_power, 1e-12)

    # Sandwich at n_tx = 2: average <= projected gradient <= grid + slack.
    worst_low = worst_high = 0.0
    for _ in range(5):
        sc = random_scene(rng, n_tx=2, n_rx=4, n_cu=2, wave_len=4)
        for alpha in (0.0, 0.5, 1.0):
            avg = metrics.wsnr(solvers.baseline_average(sc), sc, alpha).wsnr
            pg = metrics.wsnr(solvers.projected_gradient(sc, alpha), sc, alpha).wsnr
            orc = solvers.grid_oracle(sc, alpha)
            slack = grid_slack(sc, alpha, orc)
            worst_low = max(worst_low, avg - pg)
            worst_high = max(worst_high, orc.best_wsnr - slack - pg)
    yield Check("sandwich.average_le_pgrad", max(worst_low, 0.0), 1e-12)
    yield Check("sandwich.pgrad_ge_grid_minus_step", max(worst_high, 0.0), 1e-9)


def grid_slack(scene, alpha, oracle) -> float:
    """First-order bound on the objective change across one grid step."""
    rates = metrics.BatchRates([scene])
    g = rates.wsnr_grad(oracle.best_sigma_s.values[None], alpha)[0]
    return float(np.sum(np.abs(g)) * oracle.grid_resolution)


RUNNERS: dict[str, Callable] = {
    "lemmas": lambda rng: [*check_lemmas(rng), *check_mi_forms(rng)],
    "gradients": lambda rng: list(check_gradients(rng)),
    "oracles": lambda rng: list(check_oracles(rng)),
}


def run(scope: str = "all", seed: int = 0) -> list[Check]:
    scopes = SCOPES if scope == "all" else (scope,)
    out = []
    for sc in scopes:
        if sc not in RUNNERS:
            raise ValueError(f"unknown scope {sc!r}")
        out.extend(RUNNERS[sc](np.random.default_rng([seed, SCOPES.index(sc)])))
    return out
