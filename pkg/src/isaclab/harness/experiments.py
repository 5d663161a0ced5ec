"""Evaluation sweeps over one system parameter.

For every sweep value a fresh set of evaluation scenes is drawn from the
evaluation seed namespace, each requested scheme picks a power spectrum
(and receive beams) per scene, and the per-scene rates are averaged into
one :class:`ResultRow`.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import statistics
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .. import metrics
from ..isacnn import TrainConfig, predict, predict_batch, train
from ..isacnn.checkpoint import load_checkpoint, save_checkpoint
from ..metrics import PowerSpectrum
from ..scene import (EVAL_NAMESPACE, ConfigError, SystemConfig,
                     generate_dataset)
from ..solvers import (baseline_average, baseline_zf, grid_oracle,
                       projected_gradient)
from . import config as cfgmod

log = logging.getLogger(__name__)

SWEEPS = ("alpha", "snr_s_db", "snr_c_db", "n_cu", "n_tx", "n_rx", "csi_accuracy")
SCHEMES = ("isacnn", "fcnn", "average", "zf", "pgrad", "oracle")
LEARNED = ("isacnn", "fcnn")

RESULTS_SCHEMA = "# isaclab-results v1"
SAMPLES_SCHEMA = "# isaclab-samples v1"
RESULT_COLUMNS = ("scheme", "sweep", "value", "wsnr", "sense_rate", "comm_rate",
                  "sum_comm_rate", "n_samples", "runtime_ms")
SAMPLE_COLUMNS = ("scheme", "sweep", "value", "sample", "sense_rate", "comm_rate",
                  "norm_sense", "norm_comm", "wsnr")


@dataclasses.dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    sweep: str = "alpha"
    values: tuple[float, ...] = (0.0, 0.5, 1.0)
    schemes: tuple[str, ...] = ("average", "pgrad")
    eval_samples: int = 200
    train_samples: int = 2000
    seed: int = 1
    oracle_resolution: float = 200.0   # grid steps per P_s
    pgrad_steps: int = 500
    base: SystemConfig = dataclasses.field(default_factory=SystemConfig)

    def __post_init__(self):
        if self.sweep not in SWEEPS:
            raise ConfigError(f"unknown sweep variable {self.sweep!r}; choose from {SWEEPS}")
        if not self.values or not all(np.isfinite(v) for v in self.values):
            raise ConfigError("sweep values must be finite and nonempty")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"unknown schemes {bad}; choose from {SCHEMES}")
        if "oracle" in self.schemes:
            n_tx = [self.config_for(v).n_tx for v in self.values]
            if max(n_tx) > 3:
                raise ConfigError("the oracle scheme needs n_tx <= 3")

    def config_for(self, value) -> SystemConfig:
        if self.sweep in ("n_cu", "n_tx", "n_rx"):
            value = int(round(value))
        return self.base.replace(**{self.sweep: value})


@dataclasses.dataclass(frozen=True)
class ResultRow:
    scheme: str
    sweep: str
    value: float
    wsnr: float
    sense_rate: float
    comm_rate: float
    sum_comm_rate: float
    n_samples: int
    runtime_ms: float | None = None


@dataclasses.dataclass
class SampleRecord:
    scheme: str
    sweep: str
    value: float
    sample: int
    rates: metrics.RatePair


def load_experiment(path, seed: int | None = None) -> ExperimentSpec:
    """Read an experiment file; keys not belonging to the experiment configure the base system."""
    pairs = cfgmod.parse_pairs(Path(path).read_text(), str(path))
    exp_keys = {f for f in ExperimentSpec.__dataclass_fields__ if f != "base"}
    base = cfgmod.build(SystemConfig, {k: v for k, v in pairs.items() if k not in exp_keys})
    exp = {k: v for k, v in pairs.items() if k in exp_keys}
    spec = cfgmod.build(ExperimentSpec, exp, base=base)
    if seed is not None or os.environ.get(cfgmod.SEED_ENV):
        spec = dataclasses.replace(spec, seed=cfgmod.resolve_seed(seed, spec.seed))
    return spec


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Evaluator:
    """Evaluates schemes on one set of scenes."""

    def __init__(self, spec: ExperimentSpec, cfg: SystemConfig, value: float,
                 nets: dict | None = None):
        self.spec, self.cfg, self.value = spec, cfg, value
        self.nets = nets or {}
        self.scenes = generate_dataset(cfg.replace(seed=spec.seed), spec.eval_samples,
                                       namespace=EVAL_NAMESPACE).samples

    def spectra(self, scheme: str):
        """Yield ``(sample index, spectrum, comm rate override)`` per scene."""
        alpha = self.cfg.alpha
        if scheme in LEARNED:
            sig = predict_batch(self.nets[scheme], self.scenes)
            for i, s in enumerate(sig):
                yield i, PowerSpectrum(s, self.scenes[i].sense_power), None
            return
        for i, sc in enumerate(self.scenes):
            if scheme == "average":
                yield i, baseline_average(sc), None
            elif scheme == "zf":
                spec, beams = baseline_zf(sc)
                yield i, spec, metrics.comm_rate_with_beams(beams.beams, spec, sc)
            elif scheme == "pgrad":
                yield i, projected_gradient(sc, alpha, steps=self.spec.pgrad_steps), None
            elif scheme == "oracle":
                res = grid_oracle(sc, alpha, sc.sense_power / self.spec.oracle_resolution)
                yield i, res.best_sigma_s, None
            else:
                raise ValueError(f"unknown scheme {scheme!r}")

    def evaluate(self, scheme: str) -> list[SampleRecord]:
        out = []
        for i, spec, rc in self.spectra(scheme):
            rp = metrics.wsnr(spec, self.scenes[i], self.cfg.alpha, comm_rate=rc)
            out.append(SampleRecord(scheme, self.spec.sweep, self.value, i, rp))
        return out

    def runtime_ms(self, scheme: str, reps: int = 1000) -> float:
        """Median wall-clock time of one single-scene prediction."""
        times = []
        n = len(self.scenes)
        for r in range(reps):
            sc = self.scenes[r % n]
            t0 = time.perf_counter()
            if scheme in LEARNED:
                predict(self.nets[scheme], sc, self.cfg.alpha)
            elif scheme == "average":
                baseline_average(sc)
            elif scheme == "zf":
                baseline_zf(sc)
            elif scheme == "pgrad":
                projected_gradient(sc, self.cfg.alpha, steps=self.spec.pgrad_steps)
            elif scheme == "oracle":
                grid_oracle(sc, self.cfg.alpha, sc.sense_power / self.spec.oracle_resolution)
            times.append(time.perf_counter() - t0)
        return 1e3 * statistics.median(times)


def summarize(records: list[SampleRecord], n_cu: int, runtime_ms=None) -> ResultRow:
    r0 = records[0]
    rs = float(np.mean([r.rates.sense_rate for r in records]))
    rc = float(np.mean([r.rates.comm_rate for r in records]))
    w = float(np.mean([r.rates.wsnr for r in records]))
    return ResultRow(r0.scheme, r0.sweep, float(r0.value), w, rs, rc, rc * n_cu,
                     len(records), runtime_ms)


def obtain_network(scheme: str, cfg: SystemConfig, spec: ExperimentSpec,
                   train_config: TrainConfig, checkpoint=None, save_to=None):
    """Load a network for one sweep value, or train one from scratch."""
    if checkpoint is not None:
        net, _ = load_checkpoint(checkpoint)
        if net.arch != scheme:
            raise ValueError(f"checkpoint {checkpoint} holds a {net.arch} network, not {scheme}")
        if net.input_len != cfg.feature_len or net.n_tx != cfg.n_tx:
            raise ValueError(f"checkpoint {checkpoint} does not match n_tx={cfg.n_tx}, "
                             f"feature length {cfg.feature_len}")
        return net
    data = generate_dataset(cfg, spec.train_samples, split=train_config.val_split)
    log.info("training %s for %s=%s on %d samples", scheme, spec.sweep,
             getattr(cfg, spec.sweep), spec.train_samples)
    net, run = train(data, train_config, arch=scheme, alpha=cfg.alpha)
    if save_to is not None:
        save_checkpoint(save_to, net, run)
    return net


def run_experiment(spec: ExperimentSpec, train_config: TrainConfig | None = None,
                   checkpoints: str | dict | None = None, timing: bool = False,
                   save_dir=None, progress: Callable[[str], None] | None = None):
    """Run every (scheme, sweep value) pair.

    ``checkpoints`` is a path template containing ``{value}`` (and
    optionally ``{scheme}``), a dict keyed by ``(scheme, value)``, or
    ``None`` to train learned schemes on the fly.

    Returns ``(rows, samples)``.
    """
    train_config = train_config or TrainConfig()
    rows, samples = [], []
    for value in spec.values:
        cfg = spec.config_for(value)
        nets = {}
        for scheme in spec.schemes:
            if scheme not in LEARNED:
                continue
            ck = None
            if isinstance(checkpoints, dict):
                ck = checkpoints.get((scheme, value))
            elif isinstance(checkpoints, str):
                ck = checkpoints.format(value=value, scheme=scheme)
            save_to = None
            if save_dir is not None and ck is None:
                save_to = Path(save_dir) / f"{scheme}_{spec.sweep}_{value}.ckpt"
            nets[scheme] = obtain_network(scheme, cfg, spec, train_config, ck, save_to)
        ev = Evaluator(spec, cfg, value, nets)
        for scheme in spec.schemes:
            recs = ev.evaluate(scheme)
            rt = ev.runtime_ms(scheme) if timing else None
            row = summarize(recs, cfg.n_cu, rt)
            rows.append(row)
            samples.extend(recs)
            if progress:
                progress(f"{scheme:8s} {spec.sweep}={value:<8g} wsnr={row.wsnr:.4f}")
    return rows, samples


def results_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    buf.write(RESULTS_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])
    return buf.getvalue()


def samples_csv(records: list[SampleRecord]) -> str:
    buf = io.StringIO()
    buf.write(SAMPLES_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_COLUMNS)
    for r in records:
        p = r.rates
        w.writerow([r.scheme, r.sweep, _fmt(float(r.value)), r.sample, _fmt(p.sense_rate),
                    _fmt(p.comm_rate), _fmt(p.norm_sense), _fmt(p.norm_comm), _fmt(p.wsnr)])
    return buf.getvalue()


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != RESULTS_SCHEMA:
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        return list(csv.DictReader(fh))


def train_log_csv(run) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_loss", "val_loss", "best_val_loss", "lr"))
    for row in run.log_rows():
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()
