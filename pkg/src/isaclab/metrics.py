"""Sensing and communication rate metrics.

Every rate is in bits. The sensing rate is available both from a waveform
matrix (:func:`sensing_mi_full`) and from its power spectrum
(:func:`reduced_sense_rate`); the communication rate is available for given
beamformers (:func:`comm_rate_with_beams`) and for the MVDR optimum
(:func:`reduced_comm_rate`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .scene import Scene

__all__ = [
    "PowerSpectrum", "Waveform", "RatePair", "kron_vec_identity",
    "kron_det_identity", "sensing_mi_full", "reduced_sense_rate",
    "sinr_direct", "optimal_sinrs", "reduced_comm_rate",
    "comm_rate_with_beams", "wsnr", "BatchRates", "sense_interference",
]

LN2 = np.log(2.0)


def _values(sigma, n: int | None = None) -> np.ndarray:
    """Spectrum as a float array; a scalar is broadcast to ``n`` entries."""
    v = np.asarray(getattr(sigma, "values", sigma), dtype=float)
    if v.ndim == 0 and n is not None:
        v = np.full(n, float(v))
    return v


@dataclass(frozen=True)
class PowerSpectrum:
    """Squared singular values of the sensing waveform.

    Entries are non-negative, sorted descending, and sum to at most
    ``budget`` (relative slack 1e-9).
    """

    values: np.ndarray
    budget: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1:
            raise ValueError("power spectrum must be a vector")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("power spectrum entries must be finite and >= 0")
        if np.any(np.diff(v) > 0):
            raise ValueError("power spectrum must be sorted descending")
        if v.sum() > self.budget * (1 + 1e-9):
            raise ValueError(f"power {v.sum():.6g} exceeds budget {self.budget:.6g}")

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class Waveform:
    matrix: np.ndarray  # S, (L, n_tx)

    @property
    def power(self) -> float:
        return float(np.real(np.vdot(self.matrix, self.matrix)))


@dataclass(frozen=True)
class RatePair:
    sense_rate: float
    comm_rate: float
    wsnr: float
    norm_sense: float
    norm_comm: float
    alpha: float


# ---------------------------------------------------------------------------
# Kronecker identities
# ---------------------------------------------------------------------------

def _vec(X: np.ndarray) -> np.ndarray:
    return np.asarray(X).reshape(-1, order="F")


def kron_vec_identity(A, B, C) -> float:
    """Residual of ``vec(ABC) = (C^T kron A) vec(B)``."""
    A, B, C = (np.atleast_2d(np.asarray(x)) for x in (A, B, C))
    if A.shape[1] != B.shape[0] or B.shape[1] != C.shape[0]:
        raise ValueError(f"non-conformable shapes {A.shape}, {B.shape}, {C.shape}")
    lhs = _vec(A @ B @ C)
    rhs = np.kron(C.T, A) @ _vec(B)
    return float(np.linalg.norm(lhs - rhs))


def kron_det_identity(A, B, C, D) -> float:
    """Residual ``| |I + AB kron CD| - |I + BA kron DC| |``."""
    A, B, C, D = (np.atleast_2d(np.asarray(x)) for x in (A, B, C, D))
    m, n = A.shape[0], C.shape[0]
    if A.shape != (m, m) or B.shape != (m, m) or C.shape != (n, n) or D.shape != (n, n):
        raise ValueError("A, B must be m x m and C, D must be n x n")
    eye = np.eye(m * n)
    lhs = np.linalg.det(eye + np.kron(A @ B, C @ D))
    rhs = np.linalg.det(eye + np.kron(B @ A, D @ C))
    return float(abs(lhs - rhs))


# ---------------------------------------------------------------------------
# sensing rate
# ---------------------------------------------------------------------------

def _interference_cov(scene: Scene) -> np.ndarray:
    H = scene.channel
    return (H * scene.cu_power) @ H.conj().T + scene.noise_power * np.eye(scene.n_rx)


def sensing_mi_full(S, scene: Scene) -> float:
    """Sensing mutual information of a waveform matrix, in bits.

    Evaluates ``log2 |I + R_H kron (S R_T S^H)|``. Both factors are
    Hermitian PSD, so the eigenvalues of the Kronecker product are the
    pairwise products of the factor eigenvalues and the product is never
    formed.
    """
    S = np.asarray(getattr(S, "matrix", S), dtype=complex)
    if not np.all(np.isfinite(S)):
        raise ValueError("waveform contains non-finite entries")
    if S.shape[1] != scene.n_tx:
        raise ValueError(f"waveform has {S.shape[1]} columns, scene has {scene.n_tx} tx antennas")
    M = S @ scene.tcm @ S.conj().T
    mu = np.clip(np.linalg.eigvalsh((M + M.conj().T) / 2), 0.0, None)
    # Eigenvalues of R_H are reciprocals of those of the interference covariance.
    lam_h = 1.0 / np.linalg.eigvalsh(_interference_cov(scene))
    return float(np.sum(np.log1p(np.outer(lam_h, mu))) / LN2)


def reduced_sense_rate(sigma_s, scene: Scene, sigma_h=None) -> float:
    """Per-slot sensing rate of a power spectrum (waveform aligned with U_T).

    ``sigma_h`` overrides the interference eigenvalues stored in ``scene``.
    """
    s = _values(sigma_s, scene.n_tx)
    sh = scene.interf_eigvals if sigma_h is None else np.asarray(sigma_h, dtype=float)
    prod = np.outer(scene.tcm_eigvals * s, sh)
    return float(np.sum(np.log1p(prod)) / (LN2 * scene.wave_len))


# ---------------------------------------------------------------------------
# communication rate
# ---------------------------------------------------------------------------

def sense_interference(sigma_s, scene: Scene) -> float:
    """Per-slot sensing echo power ``sigma_t^T sigma_s / L`` seen by the CUs."""
    return float(np.dot(scene.tcm_eigvals, _values(sigma_s, scene.n_tx)) / scene.wave_len)


def sinr_direct(w, k: int, sigma_s, scene: Scene) -> float:
    """SINR of CU ``k`` (0-based) with receive beam ``w``."""
    w = np.asarray(w, dtype=complex)
    nw = np.vdot(w, w).real
    if nw == 0:
        raise ValueError("beamformer must be nonzero")
    if not 0 <= k < scene.n_cu:
        raise IndexError(f"CU index {k} out of range")
    g = np.abs(scene.channel.T @ w) ** 2 * scene.cu_power
    interf = g.sum() - g[k]
    noise = (sense_interference(sigma_s, scene) + scene.noise_power) * nw
    return float(g[k] / (interf + noise))


def interference_plus_noise(k: int, level: float, scene: Scene) -> np.ndarray:
    """``sum_{i != k} p_i h_i^* h_i^T + level * I``."""
    H = np.delete(scene.channel, k, axis=1)
    p = np.delete(scene.cu_power, k)
    Hc = H.conj()
    return (Hc * p) @ Hc.conj().T + level * np.eye(scene.n_rx)


def _sinrs_at_level(scene: Scene, level: float) -> np.ndarray:
    out = np.empty(scene.n_cu)
    for k in range(scene.n_cu):
        R = interference_plus_noise(k, level, scene)
        hc = scene.channel[:, k].conj()
        x = sla.cho_solve(sla.cho_factor(R, lower=True), hc)
        out[k] = scene.cu_power[k] * np.real(np.vdot(hc, x))
    return out


def optimal_sinrs(sigma_s, scene: Scene) -> np.ndarray:
    """MVDR SINRs ``p_k h_k^T R_k^-1 h_k^*`` for every CU."""
    return _sinrs_at_level(scene, sense_interference(sigma_s, scene) + scene.noise_power)


def reduced_comm_rate(sigma_s, scene: Scene) -> float:
    """User-averaged rate with the optimal receive beams."""
    return float(np.mean(np.log1p(optimal_sinrs(sigma_s, scene))) / LN2)


def comm_rate_with_beams(beams: Sequence[np.ndarray], sigma_s, scene: Scene) -> float:
    """User-averaged rate for an arbitrary set of receive beams."""
    g = [sinr_direct(w, k, sigma_s, scene) for k, w in enumerate(beams)]
    return float(np.mean(np.log1p(g)) / LN2)


def wsnr(sigma_s, scene: Scene, alpha: float, comm_rate: float | None = None) -> RatePair:
    """Weighted sum of normalised sensing and communication rates.

    ``comm_rate`` replaces the MVDR-optimal communication rate, e.g. for a
    baseline with fixed beams.
    """
    M_s, M_c = scene.norm_sense, scene.norm_comm
    if not (M_s > 0 and M_c > 0):
        raise ValueError("normalisers must be positive")
    rs = reduced_sense_rate(sigma_s, scene)
    rc = reduced_comm_rate(sigma_s, scene) if comm_rate is None else comm_rate
    w = alpha * rs / M_s + (1 - alpha) * rc / M_c
    return RatePair(rs, rc, w, M_s, M_c, alpha)


# ---------------------------------------------------------------------------
# batched evaluation for training and search
# ---------------------------------------------------------------------------

class BatchRates:
    """Vectorised WSNR and its gradient over a batch of scenes.

    The MVDR SINR only depends on the power spectrum through the scalar
    ``c = sigma_t^T sigma_s / L``. With the eigendecomposition
    ``sum_{i != k} p_i h_i^* h_i^T = V diag(lam) V^H`` precomputed,

        gamma_k(c) = sum_j g_kj / (lam_kj + noise + c),
        g_kj = p_k |v_j^H h_k^*|^2,

    which makes the rate and its exact derivative cheap for any ``c``.
    """

    def __init__(self, scenes: Sequence[Scene]):
        self.n = len(scenes)
        s0 = scenes[0]
        self.wave_len = s0.wave_len
        self.sigma_t = np.stack([s.tcm_eigvals for s in scenes])
        self.sigma_h = np.stack([s.interf_eigvals for s in scenes])
        self.noise = np.array([s.noise_power for s in scenes])
        self.budget = np.array([s.sense_power for s in scenes])
        self.M_s = np.array([s.norm_sense for s in scenes])
        self.M_c = np.array([s.norm_comm for s in scenes])

        H = np.stack([s.channel for s in scenes])          # (B, N_r, K)
        p = np.stack([s.cu_power for s in scenes])          # (B, K)
        B, n_rx, K = H.shape
        self.n_cu = K
        Hc = H.conj()
        gains = np.empty((B, K, n_rx))
        lams = np.empty((B, K, n_rx))
        for k in range(K):
            keep = [i for i in range(K) if i != k]
            Hk = Hc[:, :, keep] * np.sqrt(p[:, None, keep])
            A = Hk @ Hk.conj().transpose(0, 2, 1)
            lam, V = np.linalg.eigh(A)
            proj = np.einsum("bij,bi->bj", V.conj(), Hc[:, :, k])
            gains[:, k] = p[:, k:k + 1] * np.abs(proj) ** 2
            lams[:, k] = np.clip(lam, 0.0, None)
        self.gains = gains
        self.lams = lams

    def level(self, sigma: np.ndarray) -> np.ndarray:
        return np.sum(self.sigma_t * sigma, axis=1) / self.wave_len

    def sense_rate(self, sigma: np.ndarray) -> np.ndarray:
        prod = (self.sigma_t * sigma)[:, :, None] * self.sigma_h[:, None, :]
        return np.log1p(prod).sum(axis=(1, 2)) / (LN2 * self.wave_len)

    def _sinr(self, sigma):
        denom = self.lams + (self.noise + self.level(sigma))[:, None, None]
        gam = np.sum(self.gains / denom, axis=2)
        dgam = -np.sum(self.gains / denom ** 2, axis=2)
        return gam, dgam

    def comm_rate(self, sigma: np.ndarray) -> np.ndarray:
        gam, _ = self._sinr(sigma)
        return np.log1p(gam).mean(axis=1) / LN2

    def wsnr(self, sigma: np.ndarray, alpha: float) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        return (alpha * self.sense_rate(sigma) / self.M_s
                + (1 - alpha) * self.comm_rate(sigma) / self.M_c)

    def wsnr_grad(self, sigma: np.ndarray, alpha: float) -> np.ndarray:
        """Gradient of each sample's WSNR with respect to its own spectrum."""
        sigma = np.asarray(sigma, dtype=float)
        st = self.sigma_t
        x = (st * sigma)[:, :, None] * self.sigma_h[:, None, :]
        d_sense = st * np.sum(self.sigma_h[:, None, :] / (1 + x), axis=2)
        d_sense /= LN2 * self.wave_len
        gam, dgam = self._sinr(sigma)
        dc = np.mean(dgam / (1 + gam), axis=1) / LN2
        d_comm = st * (dc / self.wave_len)[:, None]
        return (alpha * d_sense / self.M_s[:, None]
                + (1 - alpha) * d_comm / self.M_c[:, None])

    def subset(self, idx) -> "BatchRates":
        out = object.__new__(BatchRates)
        out.n = len(np.arange(self.n)[idx])
        out.wave_len = self.wave_len
        out.n_cu = self.n_cu
        for name in ("sigma_t", "sigma_h", "noise", "budget", "M_s", "M_c",
                     "gains", "lams"):
            setattr(out, name, getattr(self, name)[idx])
        return out
