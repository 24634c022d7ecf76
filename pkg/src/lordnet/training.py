"""Adam and the training pipelines for the unfolded detector.

Two-stage training first fits the system parameters ``theta`` with every
preconditioner pinned to ``delta I`` (the network then is plain gradient
descent), and then fits the per-layer preconditioners with ``theta`` frozen.
One-stage training fits both jointly; alternating training switches the
updated group every epoch.

Every pipeline is deterministic: data order comes from a seeded Philox
permutation and batch gradients are reduced in sample-index order.
"""

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .channel import Dataset
from .errors import ConfigError, ShapeError, TrainingError
from .likelihood import SystemParams
from .unfolded import UnfoldedWeights, VariantWeights, backward, forward, project, \
    variant_backward, variant_forward

__all__ = [
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainResult",
    "stage1_loss",
    "network_loss",
    "init_theta",
    "train_stage1",
    "train_stage2",
    "train_two_stage",
    "train_one_stage",
    "train_alternating",
    "train",
    "train_variant",
    "moving_average",
]

log = logging.getLogger(__name__)

MODES = ("two_stage", "one_stage", "alternating")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update.

    Returns a new params dict; ``state`` is advanced in place (and returned).
    Only keys present in ``grads`` are updated.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = dict(params)
    for k, g in grads.items():
        p = params[k]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {k!r} has shape {np.shape(g)}, param {np.shape(p)}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p, dtype=np.float64)
            state.v[k] = np.zeros_like(p, dtype=np.float64)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        out[k] = p - lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return out, state


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the full-scale experiment settings."""

    L: int = 30
    delta: float = 0.01
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-4
    epochs_stage1: int = 400
    epochs_stage2: int = 400
    batch_size: int = 512
    theta_trainables: frozenset = frozenset({"H"})
    mode: str = "two_stage"
    seed: int = 0
    stage2_layers: int = None
    full_preconditioner: bool = False
    full_batch_limit: int = 2048
    h_init_std: float = 0.1
    eval_every: int = 10

    def __post_init__(self):
        self.theta_trainables = frozenset(self.theta_trainables)
        if not self.theta_trainables <= {"H", "C"}:
            raise ConfigError(f"theta_trainables must be a subset of {{'H', 'C'}}, "
                              f"got {set(self.theta_trainables)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.L < 1 or self.batch_size < 1:
            raise ConfigError("L and batch_size must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.stage2_layers is not None and self.stage2_layers < 1:
            raise ConfigError("stage2_layers must be positive")

    def to_dict(self):
        d = asdict(self)
        d["theta_trainables"] = sorted(self.theta_trainables)
        return d


@dataclass
class TrainResult:
    theta: SystemParams
    phi: UnfoldedWeights
    history: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def network_loss(theta, phi, dataset):
    """Mean squared distance between the network output and the labels."""
    X, R = _arrays(dataset)
    out, _ = forward(np.zeros(theta.n), theta, R, phi)
    return float(np.mean(np.sum((out - X) ** 2, axis=1)))


def stage1_loss(theta, dataset, L, delta):
    """Training loss under the fixed policy ``G_i = delta I``."""
    return network_loss(theta, UnfoldedWeights.basic(L, theta.n, delta), dataset)


def _arrays(dataset):
    if isinstance(dataset, Dataset):
        return dataset.x_true, dataset.r_obs
    X, R = dataset
    return np.atleast_2d(X), np.atleast_2d(R)


def init_theta(dataset, config):
    """Starting point for ``theta``: small random ``H``, known or unit ``sigma``."""
    m, n = dataset.meta.m, dataset.meta.n
    rng = np.random.Generator(np.random.Philox(key=[config.seed, 0xC0FFEE]))
    if "H" in config.theta_trainables:
        H = config.h_init_std * rng.standard_normal((m, n))
    else:
        raise ConfigError("H must be trainable unless an initial theta is supplied")
    if "C" in config.theta_trainables or dataset.sigma is None:
        sigma = np.ones(m)
    else:
        sigma = dataset.sigma
    return SystemParams(H, sigma, dataset.b)


def moving_average(values, window=50):
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return values.copy() if values.size == 0 else np.array([values.mean()])
    return np.convolve(values, np.ones(window) / window, mode="valid")


class _Problem:
    """Parameter bookkeeping shared by the pipelines."""

    def __init__(self, theta, phi, trainables):
        self.b = theta.b
        self.params = {"H": theta.H.copy(), "log_sigma": np.log(theta.sigma), "w": phi.w.copy()}
        self.trainables = trainables

    def theta(self):
        return SystemParams(self.params["H"], np.exp(self.params["log_sigma"]), self.b)

    def phi(self):
        return UnfoldedWeights(self.params["w"])

    def loss_and_grads(self, X, R, groups):
        theta, phi = self.theta(), self.phi()
        # a diverging run overflows here; the caller turns that into TrainingError
        with np.errstate(over="ignore", invalid="ignore"):
            out, trace = forward(np.zeros(theta.n), theta, R, phi)
            diff = out - X
            loss = float(np.mean(np.sum(diff * diff, axis=1)))
        if not np.isfinite(loss):
            return loss, {}
        g = backward(trace, theta, R, phi, 2.0 * diff / X.shape[0])
        grads = {}
        if "theta" in groups:
            if "H" in self.trainables:
                grads["H"] = g.H
            if "C" in self.trainables:
                grads["log_sigma"] = g.sigma * theta.sigma
        if "phi" in groups:
            grads["w"] = g.w
        return loss, grads


def _batches(B, batch_size, full_batch, rng):
    if full_batch or batch_size >= B:
        return [np.arange(B)]
    perm = rng.permutation(B)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, B, batch_size)]


def _heldout_metrics(problem, heldout):
    X, R = _arrays(heldout)
    theta, phi = problem.theta(), problem.phi()
    out, _ = forward(np.zeros(theta.n), theta, R, phi)
    loss = float(np.mean(np.sum((out - X) ** 2, axis=1)))
    ber = float(np.mean(project(out) != X))
    return loss, ber


def _run(problem, dataset, config, schedule, epochs, heldout=None, history=None,
         lrs=None, epoch_offset=0):
    """Shared epoch loop.

    ``schedule(epoch)`` returns ``(stage_name, groups, full_batch)`` for the
    1-based epoch index; each group in ``groups`` owns an Adam state.
    """
    X, R = _arrays(dataset)
    B = X.shape[0]
    rng = np.random.Generator(np.random.Philox(key=[config.seed, 0x5EED]))
    states = {"theta": AdamState(), "phi": AdamState()}
    lrs = lrs or {"theta": config.lr_stage1, "phi": config.lr_stage2}
    history = [] if history is None else history
    for epoch in range(1, epochs + 1):
        stage, groups, full_batch = schedule(epoch)
        t0 = time.perf_counter()
        losses, weights = [], []
        for idx in _batches(B, config.batch_size, full_batch, rng):
            loss, grads = problem.loss_and_grads(X[idx], R[idx], groups)
            if not np.isfinite(loss):
                raise TrainingError(f"{stage}: training loss became non-finite at epoch "
                                    f"{epoch + epoch_offset}", epoch + epoch_offset, stage)
            for group in groups:
                sub = {k: v for k, v in grads.items() if _group_of(k) == group}
                if sub:
                    problem.params, _ = adam_step(problem.params, sub, states[group], lrs[group])
            losses.append(loss)
            weights.append(idx.size)
        record = {"epoch": epoch + epoch_offset, "stage": stage,
                  "loss_train": float(np.average(losses, weights=weights)),
                  "loss_heldout": None, "ber_heldout": None}
        if heldout is not None and (epoch % config.eval_every == 0 or epoch == epochs):
            record["loss_heldout"], record["ber_heldout"] = _heldout_metrics(problem, heldout)
        record["wall_ms"] = (time.perf_counter() - t0) * 1e3
        history.append(record)
    return history


def _group_of(key):
    return "phi" if key == "w" else "theta"


def _final(problem, dataset):
    loss = network_loss(problem.theta(), problem.phi(), dataset)
    if not np.isfinite(loss):
        raise TrainingError("final training loss is non-finite")
    return loss


def train_stage1(dataset, config, heldout=None, theta0=None):
    """Fit ``theta`` with the network pinned to ``G_i = delta I``.

    The learned channel is a surrogate that makes the truncated descent land
    near the labels; it is not an estimate of the true channel.
    """
    theta0 = theta0 if theta0 is not None else init_theta(dataset, config)
    phi = UnfoldedWeights.basic(config.L, theta0.n, config.delta, config.full_preconditioner)
    problem = _Problem(theta0, phi, config.theta_trainables)
    full_batch = len(dataset) <= config.full_batch_limit
    initial = _final(problem, dataset)
    history = _run(problem, dataset, config, lambda e: ("stage1", ("theta",), full_batch),
                   config.epochs_stage1, heldout)
    final = _final(problem, dataset)
    log.info("stage1 done: loss %.6g -> %.6g", initial, final)
    return TrainResult(problem.theta(), problem.phi(), history, initial, final)


def train_stage2(dataset, theta_star, config, heldout=None, phi0=None):
    """Fit the preconditioner factors with ``theta_star`` frozen (mini-batch Adam)."""
    L = config.stage2_layers or config.L
    phi0 = phi0 if phi0 is not None else UnfoldedWeights.basic(
        L, theta_star.n, config.delta, config.full_preconditioner)
    problem = _Problem(theta_star, phi0, frozenset())
    initial = _final(problem, dataset)
    history = _run(problem, dataset, config, lambda e: ("stage2", ("phi",), False),
                   config.epochs_stage2, heldout)
    final = _final(problem, dataset)
    log.info("stage2 done: loss %.6g -> %.6g", initial, final)
    return TrainResult(problem.theta(), problem.phi(), history, initial, final)


def train_two_stage(dataset, config, heldout=None):
    s1 = train_stage1(dataset, config, heldout)
    s2 = train_stage2(dataset, s1.theta, config, heldout)
    for rec in s2.history:
        rec["epoch"] += config.epochs_stage1
    return TrainResult(s2.theta, s2.phi, s1.history + s2.history, s1.initial_loss, s2.final_loss)


def train_one_stage(dataset, config, heldout=None):
    """Joint mini-batch Adam over ``theta`` and the preconditioners.

    Runs ``epochs_stage1 + epochs_stage2`` epochs; ``theta`` uses ``lr_stage1``
    and the preconditioners ``lr_stage2``.
    """
    theta0 = init_theta(dataset, config)
    phi = UnfoldedWeights.basic(config.L, theta0.n, config.delta, config.full_preconditioner)
    problem = _Problem(theta0, phi, config.theta_trainables)
    initial = _final(problem, dataset)
    history = _run(problem, dataset, config, lambda e: ("joint", ("theta", "phi"), False),
                   config.epochs_stage1 + config.epochs_stage2, heldout)
    return TrainResult(problem.theta(), problem.phi(), history, initial, _final(problem, dataset))


def alternating_groups(epoch):
    """Odd epochs update ``theta``, even epochs update the preconditioners."""
    return ("theta",) if epoch % 2 == 1 else ("phi",)


def train_alternating(dataset, config, heldout=None, alternations=None):
    """Alternate ``theta`` and preconditioner epochs (default ``epochs_stage1`` alternations).

    ``theta`` epochs use the current learned preconditioners rather than
    resetting them to ``delta I``.
    """
    alternations = config.epochs_stage1 if alternations is None else alternations
    theta0 = init_theta(dataset, config)
    phi = UnfoldedWeights.basic(config.L, theta0.n, config.delta, config.full_preconditioner)
    problem = _Problem(theta0, phi, config.theta_trainables)
    full_batch = len(dataset) <= config.full_batch_limit
    initial = _final(problem, dataset)

    def schedule(epoch):
        groups = alternating_groups(epoch)
        if groups == ("theta",):
            return "alt_theta", groups, full_batch
        return "alt_phi", groups, False

    history = _run(problem, dataset, config, schedule, 2 * alternations, heldout)
    return TrainResult(problem.theta(), problem.phi(), history, initial, _final(problem, dataset))


def train(dataset, config, heldout=None):
    """Dispatch on ``config.mode``."""
    if config.mode == "two_stage":
        return train_two_stage(dataset, config, heldout)
    if config.mode == "one_stage":
        return train_one_stage(dataset, config, heldout)
    return train_alternating(dataset, config, heldout)


def train_variant(dataset, kind="full", L=30, rank=1, lr=1e-3, epochs=400, batch_size=512,
                  seed=0, init_scale=0.1):
    """End-to-end mini-batch Adam for the over-parameterized benchmark networks."""
    X, R = _arrays(dataset)
    m, n = R.shape[1], X.shape[1]
    vw = VariantWeights.random(kind, m, n, L, rank=rank, scale=init_scale, seed=seed)
    b = dataset.b if isinstance(dataset, Dataset) else np.zeros(m)
    state = AdamState()
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xBE4C]))
    history = []
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in _batches(X.shape[0], batch_size, False, rng):
            out, trace = variant_forward(np.zeros(n), R[idx], vw, b, return_trace=True)
            diff = out - X[idx]
            loss = float(np.mean(np.sum(diff * diff, axis=1)))
            if not np.isfinite(loss):
                raise TrainingError(f"variant: loss non-finite at epoch {epoch}", epoch, "variant")
            grads = variant_backward(trace, R[idx], vw, 2.0 * diff / idx.size)
            mats, _ = adam_step(vw.mats, grads, state, lr)
            vw = VariantWeights(kind, mats)
            losses.append(loss)
        history.append({"epoch": epoch, "stage": "variant", "loss_train": float(np.mean(losses))})
    return vw, history
