"""Channel sampling, one-bit dataset generation and on-disk formats.

Randomness is counter based: every sample ``p`` of a dataset with seed ``s``
is drawn from its own Philox stream keyed by ``s`` with counter ``p``, so a
dataset is a pure function of ``(theta, constellation, B, seed)`` no matter
how sample generation is scheduled.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ShapeError, ValidationError
from .likelihood import Constellation, SystemParams, as_observation

__all__ = [
    "RNG_NAME",
    "DatasetMeta",
    "Dataset",
    "sample_rayleigh_channel",
    "sigma_for_snr",
    "snr_params",
    "quantize",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "export_channel",
    "import_channel",
]

RNG_NAME = "philox4x64-v1"
DATASET_FORMAT = "lordnet-dataset"
CHANNEL_FORMAT = "lordnet-channel"
FORMAT_VERSION = 1

_CHANNEL_KINDS = ("rayleigh", "imported")


def _key(seed, stream):
    # stream separates channel draws from per-sample draws under the same seed
    if seed < 0:
        raise ConfigError("seeds must be non-negative integers")
    ss = np.random.SeedSequence([int(seed), stream])
    return ss.generate_state(2, np.uint64)


def _philox(seed, stream, counter=0):
    return np.random.Generator(
        np.random.Philox(key=_key(seed, stream), counter=[0, 0, 0, counter]))


def sample_rayleigh_channel(m, n, seed):
    """I.i.d. ``N(0, 1)`` channel of shape ``(m, n)``, deterministic in ``seed``."""
    if m < 1 or n < 1:
        raise ConfigError(f"channel dimensions must be positive, got ({m}, {n})")
    return _philox(seed, 0).standard_normal((m, n))


def sigma_for_snr(snr_db, n):
    """Noise std per antenna so that ``E||Hx||^2 / E||n||^2`` hits ``snr_db``.

    Assumes unit-variance channel entries and unit-power symbols, for which
    ``E||Hx||^2 = m n`` and ``E||n||^2 = m sigma^2``.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    return math.sqrt(n / 10.0 ** (snr_db / 10.0))


def snr_params(H, snr_db, b=None):
    """Ground-truth :class:`SystemParams` with ``C = sigma^2 I`` at ``snr_db``."""
    H = np.asarray(H, dtype=np.float64)
    m, n = H.shape
    return SystemParams(H, np.full(m, sigma_for_snr(snr_db, n)), b)


def quantize(y, b):
    """One-bit quantizer: ``+1`` where ``y - b >= 0`` and ``-1`` elsewhere."""
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if y.shape[-1:] != b.shape[-1:] or b.ndim > y.ndim:
        raise ShapeError(f"y shape {y.shape} incompatible with thresholds {b.shape}")
    return np.where(y - b >= 0, 1.0, -1.0)


@dataclass
class DatasetMeta:
    m: int
    n: int
    B: int
    snr_db: float
    seed: int
    channel_kind: str = "rayleigh"
    rng: str = RNG_NAME

    def __post_init__(self):
        if self.channel_kind not in _CHANNEL_KINDS:
            raise ValidationError(f"channel_kind must be one of {_CHANNEL_KINDS}")
        if self.B < 1 or self.m < 1 or self.n < 1:
            raise ValidationError("m, n and B must be positive")


@dataclass(eq=False)
class Dataset:
    """Labeled pairs ``(x_true[p], r_obs[p])``.

    ``b`` carries the (known) quantizer thresholds; ``sigma`` the noise std
    when it is known to the receiver, else ``None``. ``provenance`` is free
    form and is written to the file header verbatim.
    """

    x_true: np.ndarray
    r_obs: np.ndarray
    meta: DatasetMeta
    constellation: Constellation = field(default_factory=Constellation.bpsk)
    b: np.ndarray = None
    sigma: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_true = np.array(self.x_true, dtype=np.float64, ndmin=2)
        self.r_obs = np.array(self.r_obs, dtype=np.float64, ndmin=2)
        meta = self.meta
        if self.x_true.shape != (meta.B, meta.n):
            raise ValidationError(
                f"x_true shape {self.x_true.shape} does not match meta (B={meta.B}, n={meta.n})")
        if self.r_obs.shape != (meta.B, meta.m):
            raise ValidationError(
                f"r_obs shape {self.r_obs.shape} does not match meta (B={meta.B}, m={meta.m})")
        as_observation(self.r_obs)
        inside = self.constellation.contains(self.x_true)
        if not np.all(inside):
            idx = tuple(int(i) for i in np.argwhere(~inside)[0])
            raise ValidationError(f"x_true{list(idx)} = {self.x_true[idx]!r} is not a constellation point")
        self.b = np.zeros(meta.m) if self.b is None else np.asarray(self.b, dtype=np.float64)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)

    def __len__(self):
        return self.meta.B

    def subset(self, idx):
        idx = np.asarray(idx)
        meta = DatasetMeta(**{**asdict(self.meta), "B": int(idx.size)})
        return Dataset(self.x_true[idx], self.r_obs[idx], meta, self.constellation,
                       self.b, self.sigma, dict(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_sigma = (self.sigma is None and other.sigma is None) or (
            self.sigma is not None and other.sigma is not None
            and np.array_equal(self.sigma, other.sigma))
        return (self.meta == other.meta and self.constellation == other.constellation
                and np.array_equal(self.x_true, other.x_true)
                and np.array_equal(self.r_obs, other.r_obs)
                and np.array_equal(self.b, other.b) and same_sigma
                and self.provenance == other.provenance)


def _draw_sample(theta, points, seed, index):
    rng = _philox(seed, 1, index)
    x = points[rng.integers(0, points.size, size=theta.n)]
    noise = rng.standard_normal(theta.m) * theta.sigma
    return x, quantize(theta.H @ x + noise, theta.b)


def generate_dataset(theta, constellation=None, B=1, seed=0, *, snr_db=None,
                     channel_kind="rayleigh", start=0):
    """Draw ``B`` labeled samples from the one-bit model defined by ``theta``.

    Symbols are i.i.d. uniform over ``constellation``; ``start`` offsets the
    sample counter so disjoint index ranges give independent datasets.
    """
    if not isinstance(theta, SystemParams):
        raise ValidationError("theta must be a SystemParams instance")
    if B < 1:
        raise ValidationError("B must be >= 1")
    constellation = constellation or Constellation.bpsk()
    points = constellation.as_array()
    X = np.empty((B, theta.n))
    R = np.empty((B, theta.m))
    for p in range(B):
        X[p], R[p] = _draw_sample(theta, points, seed, start + p)
    if snr_db is None:
        snr_db = 10.0 * math.log10(theta.n / float(np.mean(theta.sigma ** 2)))
    meta = DatasetMeta(theta.m, theta.n, B, float(snr_db), int(seed), channel_kind)
    return Dataset(X, R, meta, constellation, theta.b.copy(), theta.sigma.copy())


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in values)


def save_dataset(ds, path):
    """Write ``ds`` as one JSON header line followed by one text row per sample.

    Each row holds the ``n`` symbols followed by the ``m`` one-bit values.
    """
    header = {
        "format": DATASET_FORMAT,
        "format_version": FORMAT_VERSION,
        "meta": asdict(ds.meta),
        "constellation": list(ds.constellation.points),
        "b": ds.b.tolist(),
        "sigma": None if ds.sigma is None else ds.sigma.tolist(),
        "provenance": ds.provenance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for x, r in zip(ds.x_true, ds.r_obs):
            fh.write(_fmt(x) + " " + _fmt(r) + "\n")


def _read_header(fh, path, expected_format):
    line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise ParseError(f"{path}: header must be a JSON object")
    fmt = header.get("format", expected_format)
    if fmt != expected_format:
        raise ParseError(f"{path}: format {fmt!r}, expected {expected_format!r}")
    version = header.get("format_version", FORMAT_VERSION)
    if version > FORMAT_VERSION:
        raise ParseError(f"{path}: format_version {version} is newer than supported")
    return header


def load_dataset(path):
    """Inverse of :func:`save_dataset`; raises :class:`ParseError` on bad files."""
    with open(path) as fh:
        header = _read_header(fh, path, DATASET_FORMAT)
        rows = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        meta = DatasetMeta(**header["meta"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad or missing field in meta ({exc})") from None
    except ValidationError as exc:
        raise ParseError(f"{path}: meta: {exc}") from None
    if len(rows) != meta.B:
        raise ParseError(f"{path}: meta.B = {meta.B} but file has {len(rows)} sample rows")
    try:
        constellation = Constellation(tuple(header["constellation"]))
    except (KeyError, ValidationError) as exc:
        raise ParseError(f"{path}: constellation: {exc}") from None
    width = meta.n + meta.m
    X = np.empty((meta.B, meta.n))
    R = np.empty((meta.B, meta.m))
    for p, line in enumerate(rows):
        try:
            vals = [float(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"{path}: row {p}: non-numeric entry") from None
        if len(vals) != width:
            raise ParseError(f"{path}: row {p}: expected {width} values (n + m), got {len(vals)}")
        X[p], R[p] = vals[:meta.n], vals[meta.n:]
        bad = np.flatnonzero((R[p] != 1.0) & (R[p] != -1.0))
        if bad.size:
            j = int(bad[0])
            raise ParseError(f"{path}: r_obs[{p}][{j}] = {R[p, j]:g} is not -1 or +1")
        outside = np.flatnonzero(~constellation.contains(X[p]))
        if outside.size:
            j = int(outside[0])
            raise ParseError(f"{path}: x_true[{p}][{j}] = {X[p, j]:g} is not a constellation point")
    b = header.get("b")
    sigma = header.get("sigma")
    if b is not None and len(b) != meta.m:
        raise ParseError(f"{path}: b has length {len(b)}, expected m={meta.m}")
    if sigma is not None and len(sigma) != meta.m:
        raise ParseError(f"{path}: sigma has length {len(sigma)}, expected m={meta.m}")
    return Dataset(X, R, meta, constellation, b, sigma, header.get("provenance") or {})


def export_channel(H, path):
    """Write ``H`` in the channel import format: JSON ``{m, n}`` then ``m`` rows."""
    H = np.asarray(H, dtype=np.float64)
    m, n = H.shape
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": CHANNEL_FORMAT, "format_version": FORMAT_VERSION,
                             "m": m, "n": n}) + "\n")
        for row in H:
            fh.write(_fmt(row) + "\n")


def import_channel(path):
    """Read an externally generated channel matrix (e.g. a COST-2100 export)."""
    path = Path(path)
    with open(path) as fh:
        try:
            header = _read_header(fh, path, CHANNEL_FORMAT)
        except ParseError as exc:
            raise ValidationError(str(exc)) from None
        body = fh.read().split()
    try:
        m, n = int(header["m"]), int(header["n"])
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: header must declare integer m and n") from None
    if m < 1 or n < 1:
        raise ValidationError(f"{path}: dimensions must be positive, got {m}x{n}")
    if len(body) != m * n:
        raise ValidationError(f"{path}: declares {m}x{n} = {m * n} values but contains {len(body)}")
    try:
        H = np.array([float(tok) for tok in body]).reshape(m, n)
    except ValueError:
        raise ValidationError(f"{path}: non-numeric channel entry") from None
    if not np.all(np.isfinite(H)):
        raise ValidationError(f"{path}: channel has non-finite entries")
    return H
