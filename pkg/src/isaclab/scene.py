"""Problem instances for the uplink ISAC design problem.

A :class:`Scene` bundles one channel realisation together with the
target covariance eigensystem and the per-sample normalisers used by the
weighted-sum objective. Scenes are generated from a :class:`SystemConfig`
with one independent random stream per sample, so serial and parallel
generation give the same data.
"""

from __future__ import annotations

import dataclasses
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

__all__ = [
    "SystemConfig", "Scene", "Dataset", "pathloss_coeff", "snr_to_power",
    "gen_channel", "gen_tcm", "interference_eigvals", "build_features",
    "make_scene", "generate_dataset", "write_dataset", "read_dataset",
    "sample_rng", "TRAIN_NAMESPACE", "EVAL_NAMESPACE", "ConfigError",
]

# Seed namespaces keep training and evaluation streams disjoint.
TRAIN_NAMESPACE = 0
EVAL_NAMESPACE = 1

_MAGIC = b"ISACDS\x00\x01"
_VERSION = 1
_HEADER = struct.Struct("<8sI7IQ9d")


class ConfigError(ValueError):
    """Invalid system configuration."""


@dataclass(frozen=True)
class SystemConfig:
    """Scalar parameters of one ISAC scenario (defaults are the reference full-scale setting)."""

    n_tx: int = 16
    n_rx: int = 16
    n_cu: int = 5
    wave_len: int = 20
    alpha: float = 0.5
    snr_s_db: float = 10.0
    snr_c_db: float = 0.0
    cell_radius_km: float = 0.2
    noise_power: float = 1.0
    csi_accuracy: float = 1.0
    seed: int = 0
    # CU distances are drawn from [d0, distance_spread * d0].
    distance_spread: float = 1.25

    def __post_init__(self):
        for name in ("n_tx", "n_rx", "n_cu", "wave_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.wave_len <= self.n_tx:
            raise ConfigError(
                f"wave_len ({self.wave_len}) must exceed n_tx ({self.n_tx})")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.csi_accuracy <= 1.0:
            raise ConfigError("csi_accuracy must lie in [0, 1]")
        if self.csi_accuracy == 0.0:
            raise ConfigError(
                "csi_accuracy = 0 leaves the channel estimate uninformative")
        if self.noise_power <= 0 or self.cell_radius_km <= 0:
            raise ConfigError("noise_power and cell_radius_km must be > 0")
        if self.distance_spread < 1.0:
            raise ConfigError("distance_spread must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")

    @property
    def feature_len(self) -> int:
        return 2 * self.n_rx * self.n_cu + self.n_tx

    @property
    def ref_pathloss(self) -> float:
        """Pathloss coefficient at the cell radius (xi_0)."""
        return pathloss_coeff(self.cell_radius_km)

    @property
    def sense_power(self) -> float:
        return snr_to_power(self.snr_s_db, self.ref_pathloss, self.noise_power)

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Scene:
    """One problem instance.

    ``tcm_eigvals`` already include the reference pathloss of the sensing
    path, so ``sense_power * tcm_eigvals / noise_power`` is the per-mode
    echo SNR.
    """

    channel: np.ndarray         # H, (n_rx, n_cu), true CSI
    channel_est: np.ndarray     # H_hat, (n_rx, n_cu)
    cu_power: np.ndarray        # p_k, (n_cu,)
    tcm_eigvals: np.ndarray     # sigma_t, (n_tx,), descending
    tcm_eigvecs: np.ndarray     # U_T, (n_tx, n_tx)
    sense_power: float          # P_s
    interf_eigvals: np.ndarray  # sigma_h, (n_rx,), descending
    norm_sense: float           # M_s
    norm_comm: float            # M_c
    noise_power: float = 1.0
    wave_len: int = 1

    @property
    def n_tx(self) -> int:
        return self.tcm_eigvals.shape[0]

    @property
    def n_rx(self) -> int:
        return self.channel.shape[0]

    @property
    def n_cu(self) -> int:
        return self.channel.shape[1]

    @property
    def tcm(self) -> np.ndarray:
        """Transmit covariance matrix R_T rebuilt from its eigensystem."""
        u = self.tcm_eigvecs
        return (u * self.tcm_eigvals) @ u.conj().T


@dataclass
class Dataset:
    config: SystemConfig
    samples: list[Scene]
    split: float = 0.2

    def __len__(self) -> int:
        return len(self.samples)

    def train_val(self) -> tuple[list[Scene], list[Scene]]:
        """Split off the trailing ``split`` fraction as validation."""
        n_val = int(round(len(self.samples) * self.split))
        n_train = len(self.samples) - n_val
        return self.samples[:n_train], self.samples[n_train:]


def pathloss_coeff(d_km: float) -> float:
    """Linear pathloss ``10**(-12.81) / d**3.76`` for a distance in km.

    This is the linear form of ``PL_dB = 128.1 + 37.6 log10(d)``.
    """
    if not d_km > 0:
        raise ValueError(f"distance must be positive, got {d_km}")
    return 10.0 ** (-12.81) / d_km ** 3.76


def snr_to_power(snr_db: float, xi_ref: float, noise: float) -> float:
    """Transmit power whose received SNR through ``xi_ref`` is ``snr_db``."""
    if not (xi_ref > 0 and noise > 0):
        raise ValueError("xi_ref and noise must be positive")
    return noise * 10.0 ** (snr_db / 10.0) / xi_ref


def sample_rng(seed: int, index: int,
               namespace: int = TRAIN_NAMESPACE) -> np.random.Generator:
    """Independent generator for sample ``index`` of a seeded dataset."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(namespace), int(index)))
    return np.random.default_rng(ss)


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    # CN(0, 1): independent real/imag parts with variance 1/2 each.
    z = rng.standard_normal(shape + (2,) if isinstance(shape, tuple) else (shape, 2))
    return (z[..., 0] + 1j * z[..., 1]) / math.sqrt(2.0)


def gen_channel(config: SystemConfig, rng: np.random.Generator):
    """Draw the true channel, its estimate and the CU transmit powers.

    Returns
    -------
    H : np.ndarray
        True channel, column ``k`` is ``sqrt(xi_k) * hbar_k``.
    H_est : np.ndarray
        Estimated channel satisfying ``H = sqrt(beta) * H_est + E``.
    p : np.ndarray
        Per-CU transmit power giving every CU the configured SNR.
    """
    n_rx, k = config.n_rx, config.n_cu
    d0 = config.cell_radius_km
    dist = rng.uniform(d0, config.distance_spread * d0, size=k)
    xi = np.array([pathloss_coeff(d) for d in dist])
    hbar = _crandn(rng, (n_rx, k))
    H = hbar * np.sqrt(xi)
    p = np.array([snr_to_power(config.snr_c_db, x, config.noise_power) for x in xi])

    beta = config.csi_accuracy
    if beta == 1.0:
        return H, H.copy(), p
    # Estimation error lives on the small-scale fading, so it carries the
    # same pathloss as the CU it belongs to.
    E = _crandn(rng, (n_rx, k)) * np.sqrt((1.0 - beta) * xi)
    H_est = (H - E) / math.sqrt(beta)
    return H, H_est, p


def gen_tcm(config: SystemConfig, rng: np.random.Generator):
    """Random target covariance eigensystem ``(sigma_t, U_T)``.

    Eigenvectors come from the SVD of an i.i.d. complex Gaussian matrix;
    eigenvalues are Uniform(0, 1], rescaled to sum to ``n_tx`` and sorted
    descending.
    """
    n = config.n_tx
    U, _, _ = np.linalg.svd(_crandn(rng, (n, n)))
    # 1 - U[0,1) lies in (0, 1].
    sig = 1.0 - rng.random(n)
    sig = np.sort(sig * (n / sig.sum()))[::-1]
    return sig, U


def interference_eigvals(H: np.ndarray, p: np.ndarray, noise: float) -> np.ndarray:
    """Eigenvalues of ``R_H = (H diag(p) H^H + noise I)^-1``, descending.

    Computed from the eigenvalues of the (un-inverted) interference-plus-noise
    covariance.
    """
    H = np.asarray(H, dtype=complex)
    n_rx = H.shape[0]
    A = (H * np.asarray(p, dtype=float)) @ H.conj().T + noise * np.eye(n_rx)
    drift = np.max(np.abs(A - A.conj().T), initial=0.0)
    if drift > 1e-8 * max(1.0, np.max(np.abs(A))):
        raise RuntimeError(f"interference covariance not Hermitian (drift {drift:.3g})")
    lam = np.linalg.eigvalsh(A)
    return np.sort(1.0 / lam)[::-1]


def build_features(scene: Scene, use_estimate: bool | None = None) -> np.ndarray:
    """Real feature vector ``[Re(h_1^T) .. Re(h_K^T), Im(..), sigma_t]``.

    The estimated channel is used whenever it differs from the true one
    (imperfect CSI), unless ``use_estimate`` says otherwise.
    """
    if use_estimate is None:
        use_estimate = scene.channel_est is not scene.channel and not np.array_equal(
            scene.channel_est, scene.channel)
    H = scene.channel_est if use_estimate else scene.channel
    # Column-major flatten stacks h_1, h_2, ... one after another.
    return np.concatenate([H.real.T.ravel(), H.imag.T.ravel(),
                           np.asarray(scene.tcm_eigvals, dtype=float)])


def make_scene(config: SystemConfig, rng: np.random.Generator) -> Scene:
    """Generate one complete scene including its normalisers."""
    # Imported here: solvers depends on this module.
    from .solvers import max_comm_rate, waterfill_ms

    H, H_est, p = gen_channel(config, rng)
    shape, U = gen_tcm(config, rng)
    sigma_t = shape * config.ref_pathloss
    P_s = config.sense_power
    sigma_h = interference_eigvals(H, p, config.noise_power)
    _, M_s = waterfill_ms(sigma_t, P_s, config.noise_power, config.n_rx,
                          config.wave_len)
    scene = Scene(H, H_est, p, sigma_t, U, P_s, sigma_h, M_s, 1.0,
                  config.noise_power, config.wave_len)
    M_c = max_comm_rate(scene)
    return dataclasses.replace(scene, norm_comm=M_c)


def generate_dataset(config: SystemConfig, n_samples: int, *,
                     namespace: int = TRAIN_NAMESPACE, split: float = 0.2,
                     start: int = 0) -> Dataset:
    samples = [make_scene(config, sample_rng(config.seed, i, namespace))
               for i in range(start, start + n_samples)]
    return Dataset(config, samples, split)


# ---------------------------------------------------------------------------
# binary dataset format
# ---------------------------------------------------------------------------

def _sample_len(n_tx: int, n_rx: int, k: int) -> int:
    return 4 * n_rx * k + k + n_tx + 2 * n_tx * n_tx + n_rx + 2


def _pack_scene(s: Scene) -> np.ndarray:
    parts = [s.channel.real, s.channel.imag, s.channel_est.real,
             s.channel_est.imag, s.cu_power, s.tcm_eigvals,
             s.tcm_eigvecs.real, s.tcm_eigvecs.imag, s.interf_eigvals,
             [s.norm_sense, s.norm_comm]]
    return np.concatenate([np.ravel(np.asarray(x, dtype=float)) for x in parts])


def _unpack_scene(row: np.ndarray, cfg: SystemConfig, P_s: float) -> Scene:
    n_tx, n_rx, k = cfg.n_tx, cfg.n_rx, cfg.n_cu
    pos = 0

    def take(n, shape=None):
        nonlocal pos
        out = row[pos:pos + n]
        pos += n
        return out.reshape(shape) if shape else out

    Hr, Hi = take(n_rx * k, (n_rx, k)), take(n_rx * k, (n_rx, k))
    Er, Ei = take(n_rx * k, (n_rx, k)), take(n_rx * k, (n_rx, k))
    p = take(k)
    sig_t = take(n_tx)
    Ur, Ui = take(n_tx * n_tx, (n_tx, n_tx)), take(n_tx * n_tx, (n_tx, n_tx))
    sig_h = take(n_rx)
    M_s, M_c = take(2)
    return Scene(Hr + 1j * Hi, Er + 1j * Ei, p.copy(), sig_t.copy(),
                 Ur + 1j * Ui, P_s, sig_h.copy(), float(M_s), float(M_c),
                 cfg.noise_power, cfg.wave_len)


def write_dataset(dataset: Dataset, path: str | Path | BinaryIO) -> None:
    """Write ``dataset`` in the self-describing little-endian binary format.

    Layout: fixed header (magic, version, dimensions, seed, config scalars)
    followed by one row of float64 values per sample.
    """
    cfg = dataset.config
    n = len(dataset.samples)
    header = _HEADER.pack(
        _MAGIC, _VERSION, cfg.n_tx, cfg.n_rx, cfg.n_cu, cfg.wave_len, n,
        cfg.feature_len, _sample_len(cfg.n_tx, cfg.n_rx, cfg.n_cu),
        int(cfg.seed), float(cfg.alpha), float(cfg.snr_s_db),
        float(cfg.snr_c_db), float(cfg.cell_radius_km),
        float(cfg.noise_power), float(cfg.csi_accuracy),
        float(cfg.distance_spread), float(dataset.split),
        float(cfg.sense_power))
    payload = (np.stack([_pack_scene(s) for s in dataset.samples])
               if n else np.zeros((0, _sample_len(cfg.n_tx, cfg.n_rx, cfg.n_cu))))
    data = header + payload.astype("<f8").tobytes()
    if isinstance(path, (str, Path)):
        Path(path).write_bytes(data)
    else:
        path.write(data)


def read_header(data: bytes) -> dict:
    if len(data) < _HEADER.size:
        raise ValueError("file too short for a dataset header")
    fields = _HEADER.unpack_from(data)
    if fields[0] != _MAGIC:
        raise ValueError("not an isaclab dataset file (bad magic)")
    if fields[1] != _VERSION:
        raise ValueError(f"unsupported dataset version {fields[1]}")
    keys = ["n_tx", "n_rx", "n_cu", "wave_len", "n_samples", "feature_len",
            "sample_len", "seed", "alpha", "snr_s_db", "snr_c_db",
            "cell_radius_km", "noise_power", "csi_accuracy",
            "distance_spread", "split", "sense_power"]
    return dict(zip(keys, fields[2:]))


def read_dataset(path: str | Path | BinaryIO) -> Dataset:
    if isinstance(path, (str, Path)):
        data = Path(path).read_bytes()
    else:
        data = path.read()
    h = read_header(data)
    cfg = SystemConfig(
        n_tx=h["n_tx"], n_rx=h["n_rx"], n_cu=h["n_cu"], wave_len=h["wave_len"],
        alpha=h["alpha"], snr_s_db=h["snr_s_db"], snr_c_db=h["snr_c_db"],
        cell_radius_km=h["cell_radius_km"], noise_power=h["noise_power"],
        csi_accuracy=h["csi_accuracy"], seed=h["seed"],
        distance_spread=h["distance_spread"])
    n, width = h["n_samples"], h["sample_len"]
    if width != _sample_len(cfg.n_tx, cfg.n_rx, cfg.n_cu):
        raise ValueError("sample width does not match header dimensions")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n * width:
        raise ValueError(f"payload holds {body.size} values, expected {n * width}")
    rows = body.reshape(n, width).astype(float)
    samples = [_unpack_scene(r, cfg, h["sense_power"]) for r in rows]
    return Dataset(cfg, samples, h["split"])


def dataset_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    write_dataset(dataset, buf)
    return buf.getvalue()


def scene_digest(scene: Scene) -> bytes:
    """Stable hash of a scene's channel and covariance data."""
    import hashlib

    return hashlib.sha256(_pack_scene(scene).astype("<f8").tobytes()).digest()


def stack_features(scenes: Iterable[Scene], use_estimate: bool | None = None) -> np.ndarray:
    return np.stack([build_features(s, use_estimate) for s in scenes])


def check_dims(scenes: Sequence[Scene]) -> None:
    shapes = {(s.n_tx, s.n_rx, s.n_cu, s.wave_len) for s in scenes}
    if len(shapes) > 1:
        raise ValueError(f"scenes have mixed dimensions: {sorted(shapes)}")
