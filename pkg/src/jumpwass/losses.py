"""Ensemble-comparison losses.

Every loss takes the observed states ``obs`` (array ``(M, N+1, d)``) and the
surrogate states ``hat`` (same shape, either an array or a taped ``Var``).
Time-step factors are dropped: on a uniform grid they only rescale the loss.

Slice conventions follow the published definitions: trajectory-level losses
use slices ``0..N-1``; the decoupled W2 and MMD losses sum slices ``1..N-1``.

W-loss gradients use the envelope rule: the optimal coupling is computed on
values and held fixed while the matched distances are differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .simulate import Ensemble
from .transport import (optimal_assignment, sq_cost_matrix, w1_exact_assignment,
                        w2sq_exact)

LOSS_KINDS = ("decoupled_w2sq", "w2sq", "w1", "mse", "mean2var", "mmd")
MMD_KERNELS = 5
MMD_MULTIPLIER = 2.0


@dataclass
class LossValue:
    value: float
    per_slice: np.ndarray | None = None
    couplings: list[np.ndarray] | None = None


def _check(obs: np.ndarray, hat) -> None:
    if obs.shape != ad.value_of(hat).shape:
        raise ValueError(f"ensemble shapes differ: {obs.shape} vs {ad.value_of(hat).shape}")


def _gather(hat, rows: np.ndarray, cols: np.ndarray):
    """``hat[rows, cols, :]`` with broadcast index arrays."""
    return ad.take(hat, (rows, cols))


# -- per-kind evaluators: return (scalar value or Var, per-slice values, couplings)

def _decoupled(obs, hat, include_initial=False):
    M, K, _ = obs.shape
    slices = np.arange(0 if include_initial else 1, K - 1)
    hv = ad.value_of(hat)
    perms = [optimal_assignment(obs[:, i], hv[:, i]).perm for i in slices]
    P = np.stack(perms, axis=1) if perms else np.zeros((M, 0), dtype=int)
    matched = _gather(hat, P, np.broadcast_to(slices, P.shape))
    diff = matched - obs[:, slices, :]
    sq = ad.vsum(diff * diff, axis=2)
    per_slice = np.sum(ad.value_of(sq), axis=0) / M
    return ad.vsum(sq) * (1.0 / M), per_slice, perms


def _traj(obs, hat, squared=True):
    M, K, _ = obs.shape
    hv = ad.value_of(hat)
    of, hf = obs[:, :K - 1].reshape(M, -1), hv[:, :K - 1].reshape(M, -1)
    perm = (w2sq_exact(of, hf)[1] if squared else w1_exact_assignment(of, hf)).perm
    matched = ad.take(hat, (perm, slice(0, K - 1)))
    diff = matched - obs[:, :K - 1]
    if squared:
        sq = ad.vsum(diff * diff, axis=2)  # (M, K-1)
        per_slice = np.sum(ad.value_of(sq), axis=0) / M
        return ad.vsum(sq) * (1.0 / M), per_slice, [perm]
    dist = ad.sqrt_abs(ad.vsum(ad.reshape(diff * diff, (M, -1)), axis=1))
    return ad.vsum(dist) * (1.0 / M), None, [perm]


def _mse(obs, hat):
    M, K, _ = obs.shape
    diff = ad.take(hat, (slice(None), slice(0, K - 1))) - obs[:, :K - 1]
    sq = ad.vsum(diff * diff, axis=2)
    per_slice = np.sum(ad.value_of(sq), axis=0) / (M * (K - 1))
    return ad.vsum(sq) * (1.0 / (M * (K - 1))), per_slice, None


def _mean2var(obs, hat):
    M, K, _ = obs.shape
    h = ad.take(hat, (slice(None), slice(0, K - 1)))
    o = obs[:, :K - 1]
    gap = ad.vsum(h - o, axis=0) * (1.0 / M)  # (K-1, d)
    mean_term = ad.vsum(gap * gap, axis=1)
    h_mean = ad.vsum(h, axis=0) * (1.0 / M)
    h_var = ad.vsum(h * h, axis=0) * (1.0 / M) - h_mean * h_mean
    o_var = o.var(axis=0)
    var_term = ad.vsum(ad.absolute(o_var - h_var), axis=1)
    per = mean_term + var_term
    return ad.vsum(per), np.asarray(ad.value_of(per), dtype=float), None


def mmd_base_bandwidth(x: np.ndarray) -> float:
    """Median off-diagonal squared distance, with fallbacks for degenerate slices."""
    D = sq_cost_matrix(x, x)
    off = D[~np.eye(len(x), dtype=bool)]
    if off.size:
        med = float(np.median(off))
        if med > 0:
            return med
        if off.mean() > 0:
            return float(off.mean())
    return 1.0


def _kernel(D, base: float):
    total = 0.0
    for k in range(MMD_KERNELS):
        total = total + ad.exp(D * (-1.0 / (base * MMD_MULTIPLIER**k)))
    return total


def _pairwise_sq(a, b):
    """Squared distances between rows of ``a`` (M, d) and ``b`` (P, d)."""
    M, d = ad.value_of(a).shape
    P = ad.value_of(b).shape[0]
    diff = ad.reshape(a, (M, 1, d)) - ad.reshape(b, (1, P, d))
    return ad.vsum(diff * diff, axis=2)


def _mmd(obs, hat):
    M, K, _ = obs.shape
    terms = []
    for i in range(1, K - 1):
        x = obs[:, i]
        y = ad.take(hat, (slice(None), i))
        base = mmd_base_bandwidth(x)
        kxx = float(np.mean(_kernel(sq_cost_matrix(x, x), base)))
        kxy = ad.vsum(_kernel(_pairwise_sq(x, y), base)) * (1.0 / (M * M))
        kyy = ad.vsum(_kernel(_pairwise_sq(y, y), base)) * (1.0 / (M * M))
        terms.append(kxx - 2.0 * kxy + kyy)
    if not terms:
        return 0.0, np.zeros(0), None
    per = ad.stack(terms)
    return ad.vsum(per), np.asarray(ad.value_of(per), dtype=float), None


_EVALUATORS = {
    "decoupled_w2sq": _decoupled,
    "w2sq": lambda o, h: _traj(o, h, squared=True),
    "w1": lambda o, h: _traj(o, h, squared=False),
    "mse": _mse,
    "mean2var": _mean2var,
    "mmd": _mmd,
}


def _states(E) -> np.ndarray:
    return E.states if isinstance(E, Ensemble) else np.asarray(E, dtype=float)


def _same_grid(E, E_hat) -> None:
    if isinstance(E, Ensemble) and isinstance(E_hat, Ensemble):
        if E.grid.N != E_hat.grid.N or not np.isclose(E.grid.T, E_hat.grid.T, rtol=1e-12):
            raise ValueError("ensembles live on different grids")


def evaluate_loss(kind: str, E, E_hat, **kw) -> LossValue:
    if kind not in _EVALUATORS:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")
    _same_grid(E, E_hat)
    obs, hat = _states(E), _states(E_hat)
    _check(obs, hat)
    value, per, couplings = _EVALUATORS[kind](obs, hat, **kw)
    return LossValue(float(ad.value_of(value)), per, couplings)


def loss_decoupled_w2sq(E, E_hat, include_initial: bool = False) -> LossValue:
    return evaluate_loss("decoupled_w2sq", E, E_hat, include_initial=include_initial)


def loss_w2sq_traj(E, E_hat) -> LossValue:
    return evaluate_loss("w2sq", E, E_hat)


def loss_w1_traj(E, E_hat) -> LossValue:
    return evaluate_loss("w1", E, E_hat)


def loss_mse(E, E_hat) -> LossValue:
    return evaluate_loss("mse", E, E_hat)


def loss_mean2var(E, E_hat) -> LossValue:
    return evaluate_loss("mean2var", E, E_hat)


def loss_mmd(E, E_hat) -> LossValue:
    return evaluate_loss("mmd", E, E_hat)


def loss_graph(kind: str, E_fixed, path: ad.Var, **kw):
    """Record the loss of a taped surrogate path; returns ``(Var, LossValue)``."""
    if kind not in _EVALUATORS:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")
    obs = _states(E_fixed)
    _check(obs, path)
    value, per, couplings = _EVALUATORS[kind](obs, path, **kw)
    if not isinstance(value, ad.Var):
        value = path.tape.constant(value)
    return value, LossValue(float(value.value), per, couplings)


def loss_gradient(kind: str, E_fixed, E_hat: Ensemble, **kw) -> dict:
    """Gradients of the loss w.r.t. every leaf on the surrogate's tape."""
    if E_hat.path is None:
        raise ValueError("surrogate ensemble carries no autodiff tape")
    _same_grid(E_fixed, E_hat)
    value, _ = loss_graph(kind, E_fixed, E_hat.path, **kw)
    return value.tape.backward(value)
