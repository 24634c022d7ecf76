"""Model-based reference detectors that assume the true system parameters."""

import itertools

import numpy as np
from scipy import special

from .errors import CapacityError, ConfigError, NumericalError, ShapeError
from .likelihood import Constellation, as_observation, nll_grad_batch
from .unfolded import project

__all__ = [
    "DEFAULT_STEP_GRID",
    "BRUTE_FORCE_LIMIT",
    "relaxed_mle_detect",
    "nml_detect",
    "grid_search_step",
    "brute_force_mle",
    "candidate_set",
]

DEFAULT_STEP_GRID = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3)
NML_ITERATIONS = 700
BRUTE_FORCE_LIMIT = 2 ** 20


def _gd(R, theta, iters, step, x0=None):
    R = np.atleast_2d(as_observation(R, theta.m))
    X = np.zeros((R.shape[0], theta.n)) if x0 is None else np.array(
        np.broadcast_to(x0, (R.shape[0], theta.n)), dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(iters):
            X = X - step * nll_grad_batch(X, R, theta)
            if not np.all(np.isfinite(X)):
                raise NumericalError(f"gradient iterate became non-finite at iteration {it + 1}")
    return X


def relaxed_mle_detect(r, theta, iters, step, constellation=None, x0=None):
    """Gradient descent on the relaxed likelihood, then projection.

    Returns ``(x_bar, symbols)`` where ``x_bar`` is the unprojected iterate.
    ``r`` may be one observation or a ``(B, m)`` batch.
    """
    X = _gd(r, theta, iters, step, x0)
    if np.ndim(r) == 1:
        X = X[0]
    return X, project(X, constellation)


def grid_search_step(theta_true, validation_batch, grid=DEFAULT_STEP_GRID,
                     iters=NML_ITERATIONS, constellation=None):
    """Step size with the lowest symbol error rate on a labeled validation batch.

    ``validation_batch`` is ``(x_true, r_obs)`` or a :class:`~lordnet.channel.Dataset`.
    Ties go to the smaller step; steps whose iterates blow up are skipped.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("step grid must not be empty")
    if hasattr(validation_batch, "x_true"):
        X, R = validation_batch.x_true, validation_batch.r_obs
    else:
        X, R = validation_batch
    best = None
    for step in sorted(grid):
        try:
            _, sym = relaxed_mle_detect(R, theta_true, iters, step, constellation)
        except NumericalError:
            continue
        errors = int(np.count_nonzero(sym != X))
        if best is None or errors < best[0]:
            best = (errors, step)
    if best is None:
        raise NumericalError("every step in the grid diverged")
    return best[1]


def nml_detect(r, theta_true, constellation=None, iters=NML_ITERATIONS, step=None,
               validation_batch=None, grid=DEFAULT_STEP_GRID):
    """Coherent near-ML detector: ``iters`` gradient steps with perfect CSI.

    When ``step`` is not given it is grid searched on ``validation_batch``.
    """
    if step is None:
        if validation_batch is None:
            raise ConfigError("nml_detect needs either a step or a validation batch")
        step = grid_search_step(theta_true, validation_batch, grid, iters, constellation)
    return relaxed_mle_detect(r, theta_true, iters, step, constellation)[1]


def candidate_set(constellation, n):
    """All ``|M|^n`` candidates in lexicographic order (points ascending)."""
    pts = (constellation or Constellation.bpsk()).points
    if len(pts) ** n > BRUTE_FORCE_LIMIT:
        raise CapacityError(f"|M|^n = {len(pts)}^{n} exceeds the enumeration limit "
                            f"{BRUTE_FORCE_LIMIT}")
    return np.array(list(itertools.product(pts, repeat=n)), dtype=np.float64).reshape(-1, n)


def brute_force_mle(r, theta, constellation=None, chunk=None, candidates=None):
    """Exact discrete MLE by exhaustive search; ties go to the lexicographically first.

    Accepts one observation or a ``(B, m)`` batch. ``candidates`` overrides the
    full ``|M|^n`` enumeration with an explicit ``(K, n)`` list searched in order.
    """
    if candidates is None:
        cands = candidate_set(constellation, theta.n)
    else:
        cands = np.array(candidates, dtype=np.float64, ndmin=2)
        if cands.shape[1] != theta.n or cands.shape[0] < 1:
            raise ShapeError(f"candidates must be (K, {theta.n}) with K >= 1")
    R = np.atleast_2d(as_observation(r))
    if R.shape[1] != theta.m:
        raise ShapeError(f"r has length {R.shape[1]}, channel expects m={theta.m}")
    margin = theta.b - cands @ theta.H.T              # K x m
    chunk = chunk or max(1, 2 ** 22 // (cands.shape[0] * theta.m))
    out = np.empty((R.shape[0], theta.n))
    for s in range(0, R.shape[0], chunk):
        S = R[s:s + chunk] / theta.sigma               # c x m
        U = S[:, None, :] * margin[None, :, :]         # c x K x m
        cost = -special.log_ndtr(-U).sum(axis=2)
        out[s:s + chunk] = cands[np.argmin(cost, axis=1)]
    return out[0] if np.ndim(r) == 1 else out
