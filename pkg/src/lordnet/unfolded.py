"""Unfolded detector: preconditioned gradient layers on the one-bit likelihood.

Layer ``i`` maps ``x_i`` to

    x_{i+1} = x_i - G_i z_i,    z_i = H^T Rt eta(u_i),    u_i = Rt (b - H x_i)

with ``Rt = Diag(r / sigma)`` and ``G_i = W_i W_i^T``. With ``G_i = delta I``
the network is exactly ``L`` steps of gradient descent on the negative
log-likelihood. Reverse-mode derivatives with respect to ``H``, ``sigma`` and
every ``W_i`` are hand-derived below (``eta' = -u eta - eta^2``).

All core routines are batched: ``x`` is ``(B, n)`` and ``r`` is ``(B, m)``;
single vectors are accepted and returned unbatched.
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConsistencyError, ParseError, ShapeError, ValidationError
from .likelihood import (Constellation, SystemParams, _eta, _eta_prime,
                         as_observation)

__all__ = [
    "UnfoldedWeights",
    "ForwardTrace",
    "LayerRecord",
    "Gradients",
    "VariantWeights",
    "layer_forward",
    "forward",
    "project",
    "detect",
    "backward",
    "variant_forward",
    "variant_backward",
    "lordnet_num_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

CHECKPOINT_FORMAT = "lordnet-checkpoint"
FORMAT_VERSION = 1


@dataclass(eq=False)
class UnfoldedWeights:
    """Per-layer preconditioner factors.

    ``w`` is ``(L, n)`` for diagonal preconditioners ``G_i = Diag(w_i**2)``
    or ``(L, n, n)`` for full ones ``G_i = W_i W_i^T``.
    """

    w: np.ndarray

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        if self.w.ndim == 3:
            if self.w.shape[1] != self.w.shape[2]:
                raise ShapeError(f"full W_i must be square, got {self.w.shape[1:]}")
        elif self.w.ndim != 2:
            raise ShapeError(f"w must be (L, n) or (L, n, n), got {self.w.shape}")
        if self.w.shape[0] < 1:
            raise ValidationError("need at least one layer")
        if not np.all(np.isfinite(self.w)):
            raise ValidationError("preconditioner factors must be finite")

    @classmethod
    def basic(cls, L, n, delta, full=False):
        """Weights realizing the fixed policy ``G_i = delta I``."""
        if full:
            return cls(np.sqrt(delta) * np.broadcast_to(np.eye(n), (L, n, n)))
        return cls(np.full((L, n), np.sqrt(delta)))

    @property
    def L(self):
        return self.w.shape[0]

    @property
    def n(self):
        return self.w.shape[1]

    @property
    def diagonal(self):
        return self.w.ndim == 2

    @property
    def num_parameters(self):
        return self.w.size

    def preconditioners(self):
        """Realized ``G_i`` as an ``(L, n, n)`` stack."""
        if self.diagonal:
            return np.stack([np.diag(wi * wi) for wi in self.w])
        return self.w @ np.swapaxes(self.w, 1, 2)

    def truncated(self, L):
        return UnfoldedWeights(self.w[:L].copy())

    def copy(self):
        return UnfoldedWeights(self.w.copy())


class LayerRecord(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    eta: np.ndarray


@dataclass
class ForwardTrace:
    """Intermediate vectors of one forward pass.

    ``x_layers`` holds ``x_0 .. x_L`` (``L+1`` rows), ``u_layers`` the
    arguments ``Rt (b - H x_i)`` and ``eta_layers`` their ``eta`` values.
    Batched traces carry an extra sample axis after the layer axis.
    """

    x_layers: np.ndarray
    u_layers: np.ndarray
    eta_layers: np.ndarray

    @property
    def L(self):
        return self.u_layers.shape[0]

    @property
    def batched(self):
        return self.x_layers.ndim == 3


@dataclass
class Gradients:
    H: np.ndarray
    sigma: np.ndarray
    w: np.ndarray
    x0: np.ndarray


def _batch(x, r, theta):
    x = np.asarray(x, dtype=np.float64)
    r = as_observation(r)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    R = np.atleast_2d(r)
    if X.shape[1] != theta.n or R.shape[1] != theta.m:
        raise ShapeError(f"x {x.shape} / r {r.shape} do not match channel "
                         f"(m={theta.m}, n={theta.n})")
    if R.shape[0] != X.shape[0]:
        if X.shape[0] == 1:
            X = np.repeat(X, R.shape[0], axis=0)
            single = False
        else:
            raise ShapeError("x and r batch sizes differ")
    return X, R, single and r.ndim == 1


def _apply_g(Z, g):
    """``G z`` for every row of ``Z``; ``g`` is a diag vector or a matrix."""
    if g.ndim == 1:
        return Z * g
    return Z @ g.T


def _layer(X, S, theta, g):
    U = S * (theta.b - X @ theta.H.T)
    E = _eta(U.ravel()).reshape(U.shape)
    Z = (S * E) @ theta.H
    return X - _apply_g(Z, g), U, E


def _as_g(G, n):
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 0:
        return np.full(n, float(G))
    if G.shape not in ((n,), (n, n)):
        raise ShapeError(f"preconditioner must be scalar, (n,) or (n, n); got {G.shape}")
    return G


def layer_forward(x_i, theta, r, G_i):
    """Single layer. ``G_i`` may be a scalar, a diagonal vector or an n x n matrix."""
    X, R, single = _batch(x_i, r, theta)
    g = _as_g(G_i, theta.n)
    S = R / theta.sigma
    X_next, U, E = _layer(X, S, theta, g)
    if single:
        return X_next[0], LayerRecord(X[0], U[0], E[0])
    return X_next, LayerRecord(X, U, E)


def _realized(phi):
    if phi.diagonal:
        return phi.w * phi.w
    return phi.preconditioners()


def forward(x0, theta, r, phi):
    """Run all ``phi.L`` layers; returns ``(x_L, trace)``."""
    if phi.n != theta.n:
        raise ShapeError(f"weights are for n={phi.n}, channel has n={theta.n}")
    X, R, single = _batch(x0, r, theta)
    S = R / theta.sigma
    gs = _realized(phi)
    B = X.shape[0]
    xs = np.empty((phi.L + 1, B, theta.n))
    us = np.empty((phi.L, B, theta.m))
    es = np.empty((phi.L, B, theta.m))
    xs[0] = X
    for i in range(phi.L):
        xs[i + 1], us[i], es[i] = _layer(xs[i], S, theta, gs[i])
    if single:
        return xs[-1, 0], ForwardTrace(xs[:, 0], us[:, 0], es[:, 0])
    return xs[-1], ForwardTrace(xs, us, es)


def project(x, constellation=None):
    """Elementwise nearest constellation point; ties resolve to the larger point.

    For BPSK this is ``sign`` with ``sign(0) = +1``.
    """
    pts = (constellation or Constellation.bpsk()).as_array()
    x = np.asarray(x, dtype=np.float64)
    if pts.size == 2 and pts[0] == -1.0 and pts[1] == 1.0:
        return np.where(x >= 0, 1.0, -1.0)
    # pts sorted: pick the upper neighbour when x sits at or past the midpoint
    mids = 0.5 * (pts[1:] + pts[:-1])
    return pts[np.searchsorted(mids, x, side="right")]


def detect(r, theta, phi, constellation=None, x0=None):
    """Feed ``r`` through the network and project the output onto the alphabet."""
    r = np.asarray(r, dtype=np.float64)
    if x0 is None:
        x0 = np.zeros(theta.n)
    x_L, _ = forward(x0, theta, r, phi)
    return project(x_L, constellation)


def _check_trace(trace, theta, R, phi):
    xs = trace.x_layers
    if trace.L != phi.L or xs.shape[0] != phi.L + 1:
        raise ConsistencyError(f"trace has {trace.L} layers, weights have {phi.L}")
    if xs.shape[-1] != theta.n or trace.u_layers.shape[-1] != theta.m:
        raise ConsistencyError("trace dimensions do not match the channel")
    if trace.u_layers.shape[1] != R.shape[0]:
        raise ConsistencyError("trace batch size does not match the observations")
    S = R / theta.sigma
    if not np.array_equal(trace.u_layers[0], S * (theta.b - xs[0] @ theta.H.T)):
        raise ConsistencyError("trace was not produced with these (theta, r)")


def backward(trace, theta, r, phi, upstream):
    """Reverse-mode derivatives of ``upstream . x_L``.

    Returns :class:`Gradients` with ``H`` (m x n), ``sigma`` (m), ``w`` (same
    shape as ``phi.w``) and ``x0``. For batched traces the parameter gradients
    are summed over samples and ``upstream`` must be ``(B, n)``.
    """
    batched = trace.batched
    R = np.atleast_2d(as_observation(r))
    if batched:
        xs, us, es = trace.x_layers, trace.u_layers, trace.eta_layers
    else:
        xs, us, es = (trace.x_layers[:, None], trace.u_layers[:, None],
                      trace.eta_layers[:, None])
    _check_trace(ForwardTrace(xs, us, es), theta, R, phi)
    gbar = np.array(np.atleast_2d(upstream), dtype=np.float64)
    if gbar.shape != xs.shape[1:]:
        raise ShapeError(f"upstream shape {gbar.shape} does not match {xs.shape[1:]}")

    H = theta.H
    S = R / theta.sigma
    gs = _realized(phi)
    dH = np.zeros_like(H)
    dS = np.zeros_like(S)
    dw = np.zeros_like(phi.w)
    for i in range(phi.L - 1, -1, -1):
        X, U, E = xs[i], us[i], es[i]
        A = S * E
        Z = A @ H
        if phi.diagonal:
            # x_{i+1} = x_i - (w_i^2) * z_i
            dw[i] = -2.0 * phi.w[i] * np.sum(gbar * Z, axis=0)
            Zbar = -gbar * gs[i]
        else:
            dG = -gbar.T @ Z
            dw[i] = (dG + dG.T) @ phi.w[i]
            Zbar = -gbar @ gs[i]
        # z = H^T a
        dH += A.T @ Zbar
        Abar = Zbar @ H.T
        dS += E * Abar
        Ubar = _eta_prime(U.ravel(), E.ravel()).reshape(U.shape) * (S * Abar)
        # u = s * (b - H x)
        dS += (theta.b - X @ H.T) * Ubar
        V = S * Ubar
        dH -= V.T @ X
        gbar = gbar - V @ H
    # s = r / sigma  =>  ds/dsigma = -s / sigma
    dsigma = -np.sum(dS * S, axis=0) / theta.sigma
    return Gradients(dH, dsigma, dw, gbar if batched else gbar[0])


def lordnet_num_parameters(m, n, L, train_c=False, diagonal=True, train_h=True):
    """Trainable parameter count of the network (``n (L + m)`` in the default setup)."""
    count = (m * n if train_h else 0) + (L * n if diagonal else L * n * n)
    return count + (m if train_c else 0)


@dataclass(eq=False)
class VariantWeights:
    """Per-layer matrices of the over-parameterized unfolded benchmarks.

    ``kind="full"``: ``A`` (L, n, m) and ``B`` (L, m, n).
    ``kind="lowrank"``: ``A_i = P_i Q_i``, ``B_i = R_i S_i`` with ``P`` (L, n, r),
    ``Q`` (L, r, m), ``R`` (L, m, r), ``S`` (L, r, n).
    """

    kind: str
    mats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mats = {k: np.array(v, dtype=np.float64) for k, v in self.mats.items()}
        if self.kind == "full":
            A, B = self.mats["A"], self.mats["B"]
            if A.ndim != 3 or B.shape != (A.shape[0], A.shape[2], A.shape[1]):
                raise ShapeError(f"inconsistent A {A.shape} / B {B.shape}")
        elif self.kind == "lowrank":
            P, Q, R, S = (self.mats[k] for k in "PQRS")
            L, n, r = P.shape
            m = Q.shape[2]
            if r < 1:
                raise ShapeError("rank must be >= 1")
            if Q.shape != (L, r, m) or R.shape != (L, m, r) or S.shape != (L, r, n):
                raise ShapeError("inconsistent low-rank factor shapes")
        else:
            raise ValidationError(f"unknown variant kind {self.kind!r}")

    @classmethod
    def full(cls, A, B):
        return cls("full", {"A": A, "B": B})

    @classmethod
    def lowrank(cls, P, Q, R, S):
        return cls("lowrank", {"P": P, "Q": Q, "R": R, "S": S})

    @classmethod
    def random(cls, kind, m, n, L, rank=1, scale=0.1, seed=0):
        rng = np.random.default_rng(seed)
        if kind == "full":
            return cls.full(scale * rng.standard_normal((L, n, m)),
                            scale * rng.standard_normal((L, m, n)))
        return cls.lowrank(scale * rng.standard_normal((L, n, rank)),
                           scale * rng.standard_normal((L, rank, m)),
                           scale * rng.standard_normal((L, m, rank)),
                           scale * rng.standard_normal((L, rank, n)))

    @property
    def L(self):
        return next(iter(self.mats.values())).shape[0]

    @property
    def rank(self):
        return self.mats["P"].shape[2] if self.kind == "lowrank" else None

    @property
    def num_parameters(self):
        return sum(v.size for v in self.mats.values())

    def realized(self):
        """Per-layer ``(A_i, B_i)`` stacks."""
        if self.kind == "full":
            return self.mats["A"], self.mats["B"]
        m = self.mats
        return m["P"] @ m["Q"], m["R"] @ m["S"]


def variant_forward(x0, r, vw, b=None, return_trace=False):
    """``x_{i+1} = x_i - A_i R eta(R (b - B_i x_i))`` with ``R = Diag(r)``."""
    A, Bm = vw.realized()
    L, n, m = A.shape
    R = np.atleast_2d(as_observation(r, m))
    X = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if X.shape[1] != n:
        raise ShapeError(f"x0 has length {X.shape[1]}, variant expects n={n}")
    if X.shape[0] != R.shape[0]:
        X = np.repeat(X, R.shape[0], axis=0)
    b = np.zeros(m) if b is None else np.asarray(b, dtype=np.float64)
    xs = np.empty((L + 1,) + X.shape)
    us = np.empty((L, R.shape[0], m))
    xs[0] = X
    for i in range(L):
        us[i] = R * (b - xs[i] @ Bm[i].T)
        E = _eta(us[i].ravel()).reshape(us[i].shape)
        xs[i + 1] = xs[i] - (R * E) @ A[i].T
    single = np.ndim(r) == 1 and np.ndim(x0) == 1
    out = xs[-1, 0] if single else xs[-1]
    if return_trace:
        return out, (xs, us)
    return out


def variant_backward(trace, r, vw, upstream):
    """Gradients of ``upstream . x_L`` for the benchmark variants (batched)."""
    xs, us = trace
    A, Bm = vw.realized()
    R = np.atleast_2d(as_observation(r))
    gbar = np.array(np.atleast_2d(upstream), dtype=np.float64)
    dA = np.zeros_like(A)
    dB = np.zeros_like(Bm)
    for i in range(A.shape[0] - 1, -1, -1):
        U = us[i]
        E = _eta(U.ravel()).reshape(U.shape)
        RE = R * E
        dA[i] = -gbar.T @ RE
        REbar = -gbar @ A[i]
        Ubar = _eta_prime(U.ravel(), E.ravel()).reshape(U.shape) * (R * REbar)
        V = R * Ubar
        dB[i] = -V.T @ xs[i]
        gbar = gbar - V @ Bm[i]
    if vw.kind == "full":
        return {"A": dA, "B": dB}
    mt = vw.mats
    return {
        "P": dA @ np.swapaxes(mt["Q"], 1, 2),
        "Q": np.swapaxes(mt["P"], 1, 2) @ dA,
        "R": dB @ np.swapaxes(mt["S"], 1, 2),
        "S": np.swapaxes(mt["R"], 1, 2) @ dB,
    }


@dataclass
class Checkpoint:
    theta: SystemParams
    phi: UnfoldedWeights
    trainable: dict = field(default_factory=lambda: {"H": True, "C": False})
    variant: VariantWeights = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    """Write a checkpoint as JSON; floats keep their exact (round-trip) repr."""
    theta, phi = ckpt.theta, ckpt.phi
    if phi.diagonal:
        phi_doc = {"w_diag": phi.w.tolist()}
    else:
        phi_doc = {"W": [wi.ravel().tolist() for wi in phi.w]}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": FORMAT_VERSION,
        "m": theta.m,
        "n": theta.n,
        "L": phi.L,
        "theta": {
            "H": theta.H.ravel().tolist(),
            "sigma": theta.sigma.tolist(),
            "b": theta.b.tolist(),
            "trainable_flags": dict(ckpt.trainable),
        },
        "phi": phi_doc,
        "variant": None if ckpt.variant is None else {
            "kind": ckpt.variant.kind,
            "shapes": {k: list(v.shape) for k, v in ckpt.variant.mats.items()},
            "mats": {k: v.ravel().tolist() for k, v in ckpt.variant.mats.items()},
        },
        **ckpt.extra,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format", CHECKPOINT_FORMAT) != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: not a checkpoint file")
    try:
        m, n, L = int(doc["m"]), int(doc["n"]), int(doc["L"])
        th = doc["theta"]
        theta = SystemParams(np.reshape(th["H"], (m, n)), th["sigma"], th["b"])
        if "w_diag" in doc["phi"]:
            w = np.reshape(doc["phi"]["w_diag"], (L, n))
        else:
            w = np.reshape(doc["phi"]["W"], (L, n, n))
        variant = None
        if doc.get("variant"):
            v = doc["variant"]
            variant = VariantWeights(v["kind"], {k: np.reshape(v["mats"][k], v["shapes"][k])
                                                 for k in v["mats"]})
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint ({exc!r})") from None
    known = {"format", "format_version", "m", "n", "L", "theta", "phi", "variant"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return Checkpoint(theta, UnfoldedWeights(w), dict(th.get("trainable_flags", {})),
                      variant, extra)
