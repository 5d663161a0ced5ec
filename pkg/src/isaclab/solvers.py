"""Closed-form solutions, baselines and brute-force references."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .metrics import (LN2, BatchRates, PowerSpectrum, Waveform,
                      interference_plus_noise, sense_interference, _values)
from .scene import Scene

__all__ = [
    "BeamformerSet", "OracleResult", "ConvergenceWarning", "mvdr_beams",
    "lagrange_residuals", "waterfill", "waterfill_ms", "max_comm_rate",
    "recover_waveform", "recover_beams", "baseline_average", "baseline_zf",
    "project_l1_ball", "projected_gradient", "grid_oracle", "descending_grid",
]


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BeamformerSet:
    beams: list  # one complex (n_rx,) vector per CU

    def __len__(self):
        return len(self.beams)

    def __getitem__(self, k):
        return self.beams[k]

    def distortionless_residual(self, scene: Scene) -> float:
        """max_k |sqrt(p_k) w_k^H h_k^* - 1|."""
        r = [abs(np.sqrt(scene.cu_power[k]) * np.vdot(w, scene.channel[:, k].conj()) - 1)
             for k, w in enumerate(self.beams)]
        return float(max(r))


@dataclass(frozen=True)
class OracleResult:
    best_sigma_s: PowerSpectrum
    best_wsnr: float
    grid_resolution: float


# ---------------------------------------------------------------------------
# receive beamforming
# ---------------------------------------------------------------------------

def _mvdr_at_level(scene: Scene, level: float) -> BeamformerSet:
    beams = []
    for k in range(scene.n_cu):
        R = interference_plus_noise(k, level, scene)
        hc = scene.channel[:, k].conj()
        x = sla.cho_solve(sla.cho_factor(R, lower=True), hc)
        q = np.real(np.vdot(hc, x))  # h_k^T R^-1 h_k^*
        beams.append(x / (np.sqrt(scene.cu_power[k]) * q))
    return BeamformerSet(beams)


def mvdr_beams(sigma_s, scene: Scene) -> BeamformerSet:
    """Optimal (MVDR) receive beams for a given sensing power spectrum.

    ``w_k = R_k^-1 h_k^* / (sqrt(p_k) h_k^T R_k^-1 h_k^*)`` with ``R_k`` the
    interference-plus-noise covariance of CU ``k``, which includes the
    sensing echo power. The scaling enforces ``sqrt(p_k) w_k^H h_k^* = 1``.
    """
    return _mvdr_at_level(scene, sense_interference(sigma_s, scene) + scene.noise_power)


def lagrange_residuals(beams: BeamformerSet, sigma_s, scene: Scene) -> np.ndarray:
    """Stationarity residuals ``||2 R_k w_k + lambda_k sqrt(p_k) h_k^*||``.

    The multiplier is ``lambda_k = -2 / (p_k h_k^T R_k^-1 h_k^*)``.
    """
    level = sense_interference(sigma_s, scene) + scene.noise_power
    out = []
    for k, w in enumerate(beams.beams):
        R = interference_plus_noise(k, level, scene)
        hc = scene.channel[:, k].conj()
        q = np.real(np.vdot(hc, sla.cho_solve(sla.cho_factor(R), hc)))
        lam = -2.0 / (scene.cu_power[k] * q)
        r = 2 * R @ w + lam * np.sqrt(scene.cu_power[k]) * hc
        out.append(np.linalg.norm(r) / max(np.linalg.norm(2 * R @ w), 1e-300))
    return np.array(out)


def recover_beams(sigma_s_pred, scene: Scene) -> BeamformerSet:
    """Receive beams for a predicted spectrum (same closed form as MVDR)."""
    return mvdr_beams(sigma_s_pred, scene)


def baseline_zf(scene: Scene):
    """Uniform power spectrum with zero-forcing receive beams.

    Beam ``k`` is column ``k`` of ``H^* (H^T H^*)^-1`` rescaled so that
    ``sqrt(p_k) w_k^H h_k^* = 1``; it nulls every other CU.
    """
    H = scene.channel
    if scene.n_cu > scene.n_rx or np.linalg.matrix_rank(H) < scene.n_cu:
        raise np.linalg.LinAlgError("zero-forcing needs a full column rank channel")
    Hc = H.conj()
    W = Hc @ np.linalg.solve(H.T @ Hc, np.eye(scene.n_cu))
    beams = [W[:, k] / np.sqrt(scene.cu_power[k]) for k in range(scene.n_cu)]
    return baseline_average(scene), BeamformerSet(beams)


# ---------------------------------------------------------------------------
# power allocation
# ---------------------------------------------------------------------------

def waterfill(gains, budget: float):
    """Maximise ``sum log(1 + g_i x_i)`` subject to ``x >= 0, sum x <= budget``.

    Returns the allocation (in the input order) and the water level.
    The active set shrinks until every active allocation is positive.
    """
    g = np.asarray(gains, dtype=float)
    if np.any(g <= 0) or budget <= 0:
        raise ValueError("gains and budget must be positive")
    inv = 1.0 / g
    order = np.argsort(inv, kind="stable")
    n_active = len(g)
    while True:
        act = order[:n_active]
        mu = (budget + inv[act].sum()) / n_active
        if mu - inv[order[n_active - 1]] > 0 or n_active == 1:
            break
        n_active -= 1
    x = np.zeros_like(g)
    x[act] = mu - inv[act]
    # Assign rounding drift to the strongest channel so the budget is met exactly.
    x[order[0]] += budget - x.sum()
    return x, mu


def waterfill_ms(sigma_t, P_s: float, noise: float, n_rx: int, L: int):
    """Interference-free optimal spectrum and the maximum sensing rate M_s."""
    sigma_t = np.asarray(sigma_t, dtype=float)
    x, _ = waterfill(sigma_t / noise, P_s)
    M_s = n_rx / L * np.sum(np.log1p(sigma_t * x / noise)) / LN2
    return x, float(M_s)


def waterfill_kkt_residual(x, gains, budget: float) -> float:
    """Largest KKT violation of a water-filling allocation, relative to the level."""
    x = np.asarray(x, dtype=float)
    inv = 1.0 / np.asarray(gains, dtype=float)
    act = x > 0
    mu = np.mean(x[act] + inv[act])
    r = [np.max(np.abs(x[act] + inv[act] - mu)) if act.any() else 0.0,
         np.max(np.clip(mu - inv[~act], 0, None), initial=0.0),
         abs(x.sum() - budget)]
    return float(max(r) / mu)


def max_comm_rate(scene: Scene) -> float:
    """Communication rate without sensing interference (M_c)."""
    from .metrics import _sinrs_at_level

    return float(np.mean(np.log1p(_sinrs_at_level(scene, scene.noise_power))) / LN2)


def baseline_average(scene: Scene) -> PowerSpectrum:
    n = scene.n_tx
    return PowerSpectrum(np.full(n, scene.sense_power / n), scene.sense_power)


# ---------------------------------------------------------------------------
# waveform recovery
# ---------------------------------------------------------------------------

def recover_waveform(sigma_s, U_T: np.ndarray, L: int, unitary_choice=None) -> Waveform:
    """Waveform ``S = U_s Sigma_s U_T^H`` with squared singular values ``sigma_s``.

    ``unitary_choice`` is the L x L left factor: ``None`` for identity, an
    ``np.random.Generator`` for a Haar-random unitary, or an explicit matrix.
    """
    s = _values(sigma_s)
    U_T = np.asarray(U_T)
    n_tx = U_T.shape[0]
    if s.shape != (n_tx,) or U_T.shape != (n_tx, n_tx):
        raise ValueError("spectrum and U_T dimensions disagree")
    if L < n_tx:
        raise ValueError("waveform length must be at least n_tx")
    if unitary_choice is None:
        U_s = np.eye(L)
    elif isinstance(unitary_choice, np.random.Generator):
        z = unitary_choice.standard_normal((L, L, 2)) @ np.array([1, 1j]) / np.sqrt(2)
        q, r = np.linalg.qr(z)
        U_s = q * (np.diag(r) / np.abs(np.diag(r)))
    else:
        U_s = np.asarray(unitary_choice)
        if U_s.shape != (L, L):
            raise ValueError("unitary_choice must be L x L")
    Sigma = np.zeros((L, n_tx))
    Sigma[np.arange(n_tx), np.arange(n_tx)] = np.sqrt(s)
    return Waveform(U_s @ Sigma @ U_T.conj().T)


# ---------------------------------------------------------------------------
# projected gradient reference optimiser
# ---------------------------------------------------------------------------

def project_l1_ball(y, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x <= radius}``."""
    y = np.asarray(y, dtype=float)
    x = np.clip(y, 0, None)
    if x.sum() <= radius:
        return x
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - radius
    idx = np.arange(1, len(y) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.clip(y - tau, 0, None)


def projected_gradient(scene: Scene, alpha: float, steps: int = 500,
                       step_size: float = 1.0, starts=None, tol: float = 1e-12) -> PowerSpectrum:
    """Projected gradient ascent on the weighted-sum objective.

    Works on the spectrum scaled by the budget. Each step uses a
    backtracking line search, so the objective never decreases. Several
    starting points may be given (default: uniform allocation, the
    interference-free water-filling allocation and zero power); the best
    final iterate is returned. A :class:`ConvergenceWarning` is emitted if
    the step budget runs out before the relative improvement drops below
    ``tol``.
    """
    rates = BatchRates([scene])
    P = scene.sense_power
    n = scene.n_tx
    if starts is None:
        wf, _ = waterfill_ms(scene.tcm_eigvals, P, scene.noise_power, scene.n_rx, scene.wave_len)
        starts = [np.full(n, 1.0 / n), np.sort(wf / P)[::-1], np.zeros(n)]
    else:
        starts = [np.asarray(_values(s), dtype=float) / P for s in starts]

    def f(x):
        return rates.wsnr(x[None] * P, alpha)[0]

    def grad(x):
        return rates.wsnr_grad(x[None] * P, alpha)[0] * P

    best_x, best_f, all_converged = None, -np.inf, True
    for x in starts:
        x = np.sort(project_l1_ball(x, 1.0))[::-1]
        fx = f(x)
        t = step_size
        converged = False
        for _ in range(steps):
            g = grad(x)
            while True:
                y = np.sort(project_l1_ball(x + t * g, 1.0))[::-1]
                fy = f(y)
                if fy >= fx or t < 1e-14:
                    break
                t *= 0.5
            if fy < fx:
                converged = True
                break
            gain = fy - fx
            x, fx = y, fy
            if gain <= tol * max(abs(fx), 1e-300):
                converged = True
                break
            t = min(t * 2.0, 1e6)
        all_converged &= converged
        if fx > best_f:
            best_x, best_f = x, fx
    if not all_converged:
        warnings.warn("projected gradient hit its step budget", ConvergenceWarning)
    vals = np.sort(best_x * P)[::-1]
    vals *= min(1.0, P / max(vals.sum(), 1e-300))
    return PowerSpectrum(vals, P)


# ---------------------------------------------------------------------------
# exhaustive grid reference
# ---------------------------------------------------------------------------

def descending_grid(n: int, steps: int, cap: int | None = None) -> np.ndarray:
    """All integer vectors ``cap >= m_1 >= ... >= m_n >= 0`` with ``sum m <= steps``."""
    cap = steps if cap is None else min(cap, steps)
    if n == 1:
        return np.arange(cap + 1)[:, None]
    rows = [np.column_stack([np.full(len(rest), first), rest])
            for first in range(cap + 1)
            for rest in [descending_grid(n - 1, steps - first, first)]]
    return np.vstack(rows)


def grid_oracle(scene: Scene, alpha: float, resolution: float | None = None) -> OracleResult:
    """Exhaustive search over the descending simplex on a uniform grid.

    ``resolution`` is the absolute grid step (default ``P_s / 200``).
    Only ``n_tx <= 3`` is supported.
    """
    n = scene.n_tx
    if n > 3:
        raise ValueError("grid oracle is limited to n_tx <= 3")
    P = scene.sense_power
    step = P / 200 if resolution is None else resolution
    m = int(np.floor(P / step * (1 + 1e-12)))
    pts = descending_grid(n, m) * step
    rates = BatchRates([scene])
    vals = np.empty(len(pts))
    chunk = 50000
    for a in range(0, len(pts), chunk):
        blk = pts[a:a + chunk]
        sub = rates.subset(np.zeros(len(blk), dtype=int))
        vals[a:a + chunk] = sub.wsnr(blk, alpha)
    i = int(np.argmax(vals))
    best = np.minimum(pts[i], P)
    return OracleResult(PowerSpectrum(best, P), float(vals[i]), step)
