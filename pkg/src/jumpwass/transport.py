"""Exact optimal transport between equal-size uniform empirical measures.

With uniform weights and equal sample counts the optimal coupling is a
permutation, so the earth mover problem reduces to a dense assignment problem.
All distances here are plain averages over matched pairs; any time-step
scaling belongs to the loss layer.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad

MAX_BRUTE_FORCE = 9
PSD_TOL = 1e-10


@dataclass(frozen=True)
class Assignment:
    """``perm[i]`` is the index of the target point matched to source point ``i``."""

    perm: np.ndarray
    cost: float


def _cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("point cloud must be a non-empty (M, k) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("point cloud has non-finite entries")
    return x


def _pair(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = _cloud(xs), _cloud(ys)
    if xs.shape != ys.shape:
        raise ValueError(f"clouds differ in shape: {xs.shape} vs {ys.shape}")
    return xs, ys


def sq_cost_matrix(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    diff = xs[:, None, :] - ys[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def w2sq_1d(xs, ys) -> tuple[float, Assignment]:
    """Squared W2 between two 1-D samples via sorted matching."""
    xs, ys = _pair(xs, ys)
    if xs.shape[1] != 1:
        raise ValueError("w2sq_1d needs one-dimensional samples")
    x, y = xs[:, 0], ys[:, 0]
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    perm = np.empty(len(x), dtype=int)
    perm[ox] = oy
    value = float(np.mean((x[ox] - y[oy]) ** 2))
    return value, Assignment(perm, value)


def _solve(cost: np.ndarray) -> Assignment:
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite transport cost")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[rows] = cols
    return Assignment(perm, float(cost[rows, cols].mean()))


def w2sq_exact(xs, ys) -> tuple[float, Assignment]:
    """Squared W2 by exact minimum-cost perfect matching on squared distances."""
    xs, ys = _pair(xs, ys)
    a = _solve(sq_cost_matrix(xs, ys))
    return a.cost, a


def w1_exact(xs, ys) -> float:
    xs, ys = _pair(xs, ys)
    return _solve(np.sqrt(sq_cost_matrix(xs, ys))).cost


def w1_exact_assignment(xs, ys) -> Assignment:
    xs, ys = _pair(xs, ys)
    return _solve(np.sqrt(sq_cost_matrix(xs, ys)))


def optimal_assignment(xs, ys) -> Assignment:
    """Optimal squared-distance coupling; uses sorting when ``k == 1``."""
    xs, ys = _pair(xs, ys)
    if xs.shape[1] == 1:
        return w2sq_1d(xs, ys)[1]
    return w2sq_exact(xs, ys)[1]


def _bruteforce(cost: np.ndarray) -> float:
    M = cost.shape[0]
    if M > MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to M <= {MAX_BRUTE_FORCE}")
    perms = np.array(list(itertools.permutations(range(M))))
    best = cost[np.arange(M), perms].sum(axis=1).min()
    return float(best / M)


def w2sq_bruteforce(xs, ys) -> float:
    xs, ys = _pair(xs, ys)
    return _bruteforce(sq_cost_matrix(xs, ys))


def w1_bruteforce(xs, ys) -> float:
    xs, ys = _pair(xs, ys)
    return _bruteforce(np.sqrt(sq_cost_matrix(xs, ys)))


def rate_h(M: int, n: int) -> float:
    """Convergence-rate factor of the empirical W2 estimate in dimension ``n``."""
    if M < 1 or n < 1:
        raise ValueError("need M >= 1 and n >= 1")
    if n <= 4:
        return M ** -0.25 * np.log1p(M) ** 0.5
    return M ** (-1.0 / n)


# -- Gaussian lower bound ----------------------------------------------------

@dataclass(frozen=True)
class MomentMatrices:
    """Cumulative noise-moment integrals on grid slices ``0..K``.

    ``S[k]`` and ``S_hat[k]`` approximate the integral over ``[0, t_k]`` of
    ``sigma sigma^T + sum_s rate_s beta_s beta_s^T`` averaged over
    trajectories; ``drift_gap[k]`` is the matching integral of ``f - f_hat``.
    """

    S: np.ndarray  # (K+1, d, d)
    S_hat: np.ndarray  # (K+1, d, d)
    drift_gap: np.ndarray  # (K+1, d)


def _noise_moment(spec, states: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    c = spec.coefficients
    f = np.asarray(ad.value_of(c.drift(states, t)))
    sig = np.asarray(ad.value_of(c.diffusion(states, t)))
    beta = np.asarray(ad.value_of(c.jump(states, t)))
    rates = np.asarray(spec.measure.rates)
    mom = np.einsum("pil,pjl->ij", sig, sig) + np.einsum("pis,pjs,s->ij", beta, beta, rates)
    return f.mean(axis=0), mom / states.shape[0]


def estimate_moment_matrices(spec, spec_hat, ensembles, grid, t_index: int) -> MomentMatrices:
    """Left-endpoint quadrature of the moment integrals up to slice ``t_index``.

    ``S_hat`` uses the surrogate's own jump function.
    """
    ens, ens_hat = ensembles
    if t_index < 0 or t_index > grid.N:
        raise IndexError(f"t_index {t_index} outside 0..{grid.N}")
    if ens.states.shape[1] != grid.N + 1 or ens_hat.states.shape[1] != grid.N + 1:
        raise ValueError("ensembles are not on the given grid")
    d, dt = spec.d, grid.dt
    S = np.zeros((t_index + 1, d, d))
    S_hat = np.zeros_like(S)
    gap = np.zeros((t_index + 1, d))
    for i in range(t_index):
        t = i * dt
        f, mom = _noise_moment(spec, ens.states[:, i, :], t)
        fh, mom_h = _noise_moment(spec_hat, ens_hat.states[:, i, :], t)
        S[i + 1] = S[i] + dt * mom
        S_hat[i + 1] = S_hat[i] + dt * mom_h
        gap[i + 1] = gap[i] + dt * (f - fh)
    return MomentMatrices(S, S_hat, gap)


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Positive square root of a symmetric PSD matrix."""
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    if w.min(initial=0.0) < -PSD_TOL:
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def bures_term(S: np.ndarray, S_hat: np.ndarray) -> float:
    """``Tr(S + S_hat - 2 (S^1/2 S_hat S^1/2)^1/2)``."""
    r = psd_sqrt(S)
    cross = psd_sqrt(r @ S_hat @ r)
    return float(np.trace(S) + np.trace(S_hat) - 2.0 * np.trace(cross))


def gaussian_lower_bound(mm: MomentMatrices, grid) -> float:
    """Left-endpoint integral of the squared drift gap plus the Bures term."""
    dt = grid.dt
    total = 0.0
    for k in range(mm.S.shape[0] - 1):
        total += dt * (float(mm.drift_gap[k] @ mm.drift_gap[k]) + bures_term(mm.S[k], mm.S_hat[k]))
    return total
