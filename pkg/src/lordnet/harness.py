"""Monte-Carlo BER evaluation: SNR sweeps, training-size sweeps, per-layer BER.

A run draws one channel realization from the master seed and keeps it for
every point of the sweep; the points differ in noise level, training data
and test data only. All per-point seeds are derived from the master seed.
"""

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .baselines import DEFAULT_STEP_GRID, NML_ITERATIONS, brute_force_mle, \
    grid_search_step, relaxed_mle_detect
from .channel import generate_dataset, sample_rayleigh_channel, snr_params
from .errors import ConfigError, ShapeError
from .training import TrainConfig, train
from .unfolded import detect, forward, project

__all__ = [
    "BerPoint",
    "BerReport",
    "ber",
    "count_errors",
    "derive_seed",
    "SweepConfig",
    "LordNetDetector",
    "NmlDetector",
    "RelaxedDetector",
    "BruteForceDetector",
    "make_detector",
    "sweep_snr",
    "sweep_train_size",
    "per_layer_ber",
]

REPORT_FORMAT = "lordnet-ber-report"
FORMAT_VERSION = 1
AXES = ("snr_db", "train_size", "layer")
DEFAULT_TEST_SIZE = 2048


def count_errors(estimates, truth):
    est = np.asarray(estimates)
    tru = np.asarray(truth)
    if est.shape != tru.shape:
        raise ShapeError(f"estimates {est.shape} and truth {tru.shape} differ in shape")
    return int(np.count_nonzero(est != tru)), int(tru.size)


def ber(estimates, truth):
    """Fraction of mismatched symbols."""
    errors, bits = count_errors(estimates, truth)
    return errors / bits


@dataclass
class BerPoint:
    axis_value: float
    num_errors: int
    num_bits: int

    @property
    def ber(self):
        return self.num_errors / self.num_bits

    @property
    def std_error(self):
        p = self.ber
        return float(np.sqrt(p * (1.0 - p) / self.num_bits))


@dataclass
class BerReport:
    axis: str
    points: list = field(default_factory=list)
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")

    def add(self, axis_value, estimates, truth):
        errors, bits = count_errors(estimates, truth)
        self.points.append(BerPoint(axis_value, errors, bits))
        return self.points[-1]

    @property
    def axis_values(self):
        return [p.axis_value for p in self.points]

    @property
    def bers(self):
        return np.array([p.ber for p in self.points])

    @property
    def total_errors(self):
        return sum(p.num_errors for p in self.points)

    @property
    def total_bits(self):
        return sum(p.num_bits for p in self.points)

    def to_dict(self):
        return {
            "format": REPORT_FORMAT,
            "format_version": FORMAT_VERSION,
            "axis": self.axis,
            "context": self.context,
            "points": [{**asdict(p), "ber": p.ber} for p in self.points],
        }

    @classmethod
    def from_dict(cls, doc):
        pts = [BerPoint(p["axis_value"], int(p["num_errors"]), int(p["num_bits"]))
               for p in doc["points"]]
        return cls(doc["axis"], pts, doc.get("context", {}))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path):
        detector = self.context.get("detector_name", "")
        seed = self.context.get("seed", "")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis_value", "ber", "num_errors", "num_bits", "detector", "seed"])
            for p in self.points:
                w.writerow([repr(p.axis_value), repr(p.ber), p.num_errors, p.num_bits,
                            detector, seed])


def derive_seed(master, *tags):
    """Stable child seed for ``(master, *tags)``; tags are ints or strings."""
    ints = [t if isinstance(t, int) else int.from_bytes(str(t).encode(), "little") % 2 ** 32
            for t in tags]
    return int(np.random.SeedSequence([int(master), *ints]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class SweepConfig:
    m: int = 32
    n: int = 8
    train_size: int = 512
    seed: int = 0
    channel: np.ndarray = None

    def channel_matrix(self):
        if self.channel is not None:
            H = np.asarray(self.channel, dtype=np.float64)
            if H.shape != (self.m, self.n):
                raise ShapeError(f"channel is {H.shape}, sweep expects ({self.m}, {self.n})")
            return H
        return sample_rayleigh_channel(self.m, self.n, derive_seed(self.seed, "channel"))

    @property
    def channel_kind(self):
        return "rayleigh" if self.channel is None else "imported"


class LordNetDetector:
    """Blind detector: learns ``(theta, phi)`` from labeled pilots."""

    learned = True

    def __init__(self, config=None, name="lordnet"):
        self.config = config or TrainConfig()
        self.name = name
        self.result = self.theta = self.phi = None

    @classmethod
    def from_params(cls, theta, phi, name="lordnet"):
        """Wrap already trained parameters (e.g. from a checkpoint)."""
        det = cls(name=name)
        det.theta, det.phi = theta, phi
        return det

    def fit(self, dataset, theta_true=None):
        self.result = train(dataset, self.config)
        self.theta, self.phi = self.result.theta, self.result.phi
        return self

    def predict(self, r_obs):
        return detect(r_obs, self.theta, self.phi)


class NmlDetector:
    """Coherent near-ML baseline; the step is grid searched on the labeled fit data."""

    learned = False

    def __init__(self, iters=NML_ITERATIONS, grid=DEFAULT_STEP_GRID, step=None, name="nml"):
        self.iters, self.grid, self.step, self.name = iters, tuple(grid), step, name
        self._fixed_step = step
        self.theta = None

    def fit(self, dataset, theta_true):
        self.theta = theta_true
        if self._fixed_step is None:
            self.step = grid_search_step(theta_true, dataset, self.grid, self.iters)
        return self

    def predict(self, r_obs):
        return relaxed_mle_detect(r_obs, self.theta, self.iters, self.step)[1]


class RelaxedDetector:
    learned = False

    def __init__(self, iters=30, step=0.01, name="relaxed"):
        self.iters, self.step, self.name = iters, step, name
        self.theta = None

    def fit(self, dataset, theta_true):
        self.theta = theta_true
        return self

    def predict(self, r_obs):
        return relaxed_mle_detect(r_obs, self.theta, self.iters, self.step)[1]


class BruteForceDetector:
    learned = False

    def __init__(self, name="bruteforce"):
        self.name = name
        self.theta = None

    def fit(self, dataset, theta_true):
        self.theta = theta_true
        return self

    def predict(self, r_obs):
        return brute_force_mle(r_obs, self.theta)


def make_detector(name, config=None, **kwargs):
    if name == "lordnet":
        return LordNetDetector(config, **kwargs)
    if name == "nml":
        return NmlDetector(**kwargs)
    if name == "relaxed":
        return RelaxedDetector(**kwargs)
    if name == "bruteforce":
        return BruteForceDetector(**kwargs)
    raise ConfigError(f"unknown detector {name!r}")


def _context(detector, cfg, **extra):
    ctx = {"m": cfg.m, "n": cfg.n, "seed": cfg.seed, "detector_name": detector.name,
           "channel_kind": cfg.channel_kind, "train_size": cfg.train_size}
    tc = getattr(detector, "config", None)
    if tc is not None:
        ctx.update(L=tc.L, mode=tc.mode, train_config=tc.to_dict())
    ctx.update(extra)
    return ctx


def sweep_snr(detector, snr_list, trials=DEFAULT_TEST_SIZE, config=None):
    """BER versus SNR; learned detectors are retrained at every SNR.

    ``trials`` is the number of test vectors per point, so each point counts
    ``trials * n`` symbols.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    cfg = config or SweepConfig()
    H = cfg.channel_matrix()
    report = BerReport("snr_db", context=_context(detector, cfg))
    for k, snr in enumerate(snr_list):
        theta = snr_params(H, snr)
        train_set = generate_dataset(theta, B=cfg.train_size, seed=derive_seed(cfg.seed, "train", k),
                                     snr_db=snr, channel_kind=cfg.channel_kind)
        test_set = generate_dataset(theta, B=trials, seed=derive_seed(cfg.seed, "test", k),
                                    snr_db=snr, channel_kind=cfg.channel_kind)
        detector.fit(train_set, theta)
        report.add(float(snr), detector.predict(test_set.r_obs), test_set.x_true)
    return report


def sweep_train_size(detector, B_list, snr_db, trials=DEFAULT_TEST_SIZE, config=None):
    """BER versus training-set size on one shared test set.

    Training sets share a seed, so smaller sets are prefixes of larger ones.
    """
    B_list = [int(b) for b in B_list]
    if len(set(B_list)) != len(B_list):
        raise ConfigError(f"duplicate training sizes in {B_list}")
    if any(b < 1 for b in B_list) or trials < 1:
        raise ConfigError("training sizes and trials must be >= 1")
    cfg = config or SweepConfig()
    theta = snr_params(cfg.channel_matrix(), snr_db)
    test_set = generate_dataset(theta, B=trials, seed=derive_seed(cfg.seed, "test"),
                                snr_db=snr_db, channel_kind=cfg.channel_kind)
    train_seed = derive_seed(cfg.seed, "train")
    report = BerReport("train_size", context=_context(detector, cfg, snr_db=snr_db))
    for B in B_list:
        train_set = generate_dataset(theta, B=B, seed=train_seed, snr_db=snr_db,
                                     channel_kind=cfg.channel_kind)
        detector.fit(train_set, theta)
        report.add(B, detector.predict(test_set.r_obs), test_set.x_true)
    return report


def per_layer_ber(theta, phi, test_set, context=None):
    """BER of the projected output of every layer ``0..L`` (layer 0 is ``x_0 = 0``)."""
    _, trace = forward(np.zeros(theta.n), theta, test_set.r_obs, phi)
    ctx = {"m": theta.m, "n": theta.n, "L": phi.L}
    ctx.update(context or {})
    report = BerReport("layer", context=ctx)
    for i, x in enumerate(trace.x_layers):
        report.add(i, project(x, test_set.constellation), test_set.x_true)
    return report
