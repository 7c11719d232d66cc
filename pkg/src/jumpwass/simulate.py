"""Euler-Maruyama simulation with compensated Poisson jumps.

Randomness comes from one root seed. Each trajectory gets its own child stream
(``numpy.random.SeedSequence.spawn``), so results do not depend on how the
ensemble is split across workers.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .process import InitialLaw, JumpMeasure, ProcessSpec

_INIT_STREAM = 0
_NOISE_STREAM = 1


class SimulationBlowup(FloatingPointError):
    def __init__(self, trajectory: int, step: int):
        super().__init__(f"non-finite state in trajectory {trajectory} at step {step}")
        self.trajectory = trajectory
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise ValueError("need N >= 1 and T > 0")

    @classmethod
    def from_dt(cls, dt: float, N: int) -> TimeGrid:
        return cls(dt * N, N)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass(frozen=True)
class NoiseTape:
    brownian: np.ndarray  # (M, N, m), N(0, dt)
    jump_counts: np.ndarray  # (M, N, n_marks), Poisson(rate * dt)
    seed: int | None = None

    @property
    def n_traj(self) -> int:
        return self.brownian.shape[0]


@dataclass(frozen=True)
class Ensemble:
    states: np.ndarray  # (M, N+1, d)
    grid: TimeGrid
    origin: str = "ground-truth"
    path: ad.Var | None = None  # taped copy of ``states`` when recorded

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def slice(self, i: int) -> np.ndarray:
        return self.states[:, i, :]


def _streams(seed: int, domain: int, n: int) -> list[np.random.Generator]:
    root = np.random.SeedSequence(seed, spawn_key=(domain,))
    return [np.random.default_rng(s) for s in root.spawn(n)]


def sample_initial(law: InitialLaw, n_traj: int, seed: int = 0) -> np.ndarray:
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    mean = np.asarray(law.mean)
    if law.std == 0:
        return np.tile(mean, (n_traj, 1))
    z = np.stack([g.standard_normal(law.d) for g in _streams(seed, _INIT_STREAM, n_traj)])
    return mean + law.std * z


def sample_noise_tape(grid: TimeGrid, m: int, measure: JumpMeasure, n_traj: int,
                      seed: int = 0) -> NoiseTape:
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    dt = grid.dt
    lam = np.asarray(measure.rates) * dt
    dB = np.empty((n_traj, grid.N, m))
    dN = np.empty((n_traj, grid.N, measure.n_marks))
    for k, g in enumerate(_streams(seed, _NOISE_STREAM, n_traj)):
        dB[k] = g.normal(0.0, np.sqrt(dt), size=(grid.N, m))
        dN[k] = g.poisson(lam, size=(grid.N, measure.n_marks))
    return NoiseTape(dB, dN, seed)


def euler_step(x, t: float, dt: float, spec: ProcessSpec, dB, dN, coefficients=None):
    """One explicit step ``x + f dt + sigma dB + sum_s beta_s (dN_s - rate_s dt)``.

    ``x`` is a batch ``(M, d)`` (a single state of shape ``(d,)`` is accepted);
    ``dB`` is ``(M, m)`` and ``dN`` is ``(M, n_marks)``.
    """
    single = np.ndim(ad.value_of(x)) == 1
    if single:
        x = np.asarray(x, dtype=float)[None, :]
        dB = np.asarray(dB, dtype=float).reshape(1, -1)
        dN = np.asarray(dN, dtype=float).reshape(1, -1)
    c = coefficients or spec.coefficients
    comp = np.asarray(dN, dtype=float) - np.asarray(spec.measure.rates) * dt
    out = x + c.drift(x, t) * dt
    if spec.m > 0:
        out = out + ad.vsum(c.diffusion(x, t) * np.asarray(dB)[:, None, :], axis=2)
    if spec.measure.n_marks > 0:
        out = out + ad.vsum(c.jump(x, t) * comp[:, None, :], axis=2)
    return ad.value_of(out)[0] if single else out


def simulate_ensemble(spec: ProcessSpec, grid: TimeGrid, law: InitialLaw, n_traj: int,
                      seed: int = 0, noise: NoiseTape | None = None,
                      x0: np.ndarray | None = None, graph: ad.Tape | None = None) -> Ensemble:
    """Simulate ``n_traj`` trajectories on ``grid``.

    ``noise`` replaces freshly drawn increments (common-noise replays); ``x0``
    replaces the initial draw. With ``graph`` the coefficients are bound to that
    tape and the returned ensemble carries the taped state history in ``path``.
    """
    if law.d != spec.d:
        raise ValueError(f"initial law has dimension {law.d}, process has {spec.d}")
    if x0 is None:
        x0 = sample_initial(law, n_traj, seed)
    x0 = np.asarray(x0, dtype=float).reshape(n_traj, spec.d)
    if noise is None:
        noise = sample_noise_tape(grid, spec.m, spec.measure, n_traj, seed)
    if noise.brownian.shape != (n_traj, grid.N, spec.m) or \
            noise.jump_counts.shape != (n_traj, grid.N, spec.measure.n_marks):
        raise ValueError("noise tape does not match ensemble, grid, or process")

    coeffs = spec.coefficients if graph is None else spec.coefficients.bind(graph)
    dt = grid.dt
    x = x0
    history = [x0]
    for i in range(grid.N):
        # overflow is detected below and reported as a blow-up
        with np.errstate(over="ignore", invalid="ignore"):
            x = euler_step(x, i * dt, dt, spec, noise.brownian[:, i], noise.jump_counts[:, i],
                           coeffs)
        bad = ~np.all(np.isfinite(ad.value_of(x)), axis=1)
        if bad.any():
            raise SimulationBlowup(int(np.argmax(bad)), i + 1)
        history.append(x)
    if graph is None:
        return Ensemble(np.stack(history, axis=1), grid, spec.source)
    path = ad.stack(history, axis=1)
    if not isinstance(path, ad.Var):
        path = graph.constant(path)
    return Ensemble(np.array(path.value), grid, spec.source, path)


def moment_oracle_example1(t: float, b: float, a: float, y0: float, x0: float) -> float:
    """Exact ``E[X_t]`` for the linear-drift model: solves ``m' = (b + y0) + a m``."""
    if a == 0:
        return x0 + (b + y0) * t
    if np.isinf(t):
        if a > 0:
            raise ValueError("moment diverges for a > 0")
        return -(b + y0) / a
    return -(b + y0) / a + (x0 + (b + y0) / a) * np.exp(a * t)


# -- file formats ------------------------------------------------------------

_JDE_MAGIC = b"JDE1"
_ORIGINS = ("ground-truth", "surrogate")


def ensemble_to_csv(ens: Ensemble, path) -> None:
    M, K, d = ens.states.shape
    times = ens.grid.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "step", "time"] + [f"x{j + 1}" for j in range(d)])
        for k in range(M):
            for i in range(K):
                w.writerow([k, i, repr(float(times[i]))] + [repr(float(v)) for v in ens.states[k, i]])


def ensemble_from_csv(path, origin: str = "ground-truth") -> Ensemble:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:3] != ["trajectory", "step", "time"]:
        raise ValueError(f"{path}: unexpected CSV header {header}")
    d = len(header) - 3
    arr = np.array(body, dtype=float)
    M = int(arr[:, 0].max()) + 1
    K = int(arr[:, 1].max()) + 1
    if arr.shape[0] != M * K:
        raise ValueError(f"{path}: ragged ensemble")
    states = np.empty((M, K, d))
    states[arr[:, 0].astype(int), arr[:, 1].astype(int)] = arr[:, 3:]
    T = float(arr[arr[:, 1] == K - 1, 2][0])
    return Ensemble(states, TimeGrid(T, K - 1), origin)


def ensemble_to_bytes(ens: Ensemble) -> bytes:
    M, K, d = ens.states.shape
    head = _JDE_MAGIC + struct.pack("<IQQQdB", 1, M, K - 1, d, ens.grid.T,
                                    _ORIGINS.index(ens.origin))
    return head + np.ascontiguousarray(ens.states, dtype="<f8").tobytes()


def ensemble_from_bytes(data: bytes) -> Ensemble:
    if data[:4] != _JDE_MAGIC:
        raise ValueError("not a JDE1 ensemble container")
    version, M, N, d, T, origin = struct.unpack_from("<IQQQdB", data, 4)
    if version != 1:
        raise ValueError(f"unsupported JDE1 version {version}")
    off = 4 + struct.calcsize("<IQQQdB")
    states = np.frombuffer(data, dtype="<f8", count=M * (N + 1) * d, offset=off)
    return Ensemble(states.reshape(M, N + 1, d).astype(float), TimeGrid(T, N), _ORIGINS[origin])


def save_ensemble(ens: Ensemble, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        ensemble_to_csv(ens, path)
    else:
        path.write_bytes(ensemble_to_bytes(ens))


def load_ensemble(path) -> Ensemble:
    path = Path(path)
    if path.suffix == ".csv":
        return ensemble_from_csv(path)
    return ensemble_from_bytes(path.read_bytes())
