"""Surrogate assembly, the training loop, error metrics, and sweeps."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import autodiff as ad
from .losses import LOSS_KINDS, loss_graph
from .nn import AdamW, MlpArch, MlpParams, mlp_apply, mlp_init
from .process import CoefficientSet, InitialLaw, ProcessSpec, make_model
from .simulate import Ensemble, SimulationBlowup, TimeGrid, simulate_ensemble

log = logging.getLogger(__name__)

PRIOR_MODES = ("none", "drift_given", "diffusion_given", "jump_given")
_PRIOR_ALIASES = {"drift": "drift_given", "diffusion": "diffusion_given", "jump": "jump_given"}
COMPONENTS = ("drift", "diffusion", "jump")
MAX_CONSECUTIVE_BLOWUPS = 3


class TrainingAborted(RuntimeError):
    pass


def normalize_prior(prior: str) -> str:
    prior = _PRIOR_ALIASES.get(prior, prior)
    if prior not in PRIOR_MODES:
        raise ValueError(f"unknown prior mode {prior!r}; choose from {PRIOR_MODES}")
    return prior


def learned_components(prior: str) -> tuple[str, ...]:
    prior = normalize_prior(prior)
    given = prior.removesuffix("_given")
    return tuple(c for c in COMPONENTS if c != given)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# -- surrogate ---------------------------------------------------------------

class NetworkCoefficients(CoefficientSet):
    """Coefficients where some components come from networks fed ``(x, t)``."""

    def __init__(self, truth: CoefficientSet, nets: dict[str, MlpParams], d: int, m: int,
                 n_marks: int):
        self.truth = truth
        self.nets = dict(nets)
        self.d, self.m, self.n_marks = d, m, n_marks
        super().__init__(self._drift, self._diffusion, self._jump)

    def _net(self, name, x, t):
        rows = ad.value_of(x).shape[0]
        z = ad.concatenate([x, np.full((rows, 1), float(t))], axis=1)
        return mlp_apply(self.nets[name], z)

    def _drift(self, x, t):
        if "drift" not in self.nets:
            return self.truth.drift(x, t)
        return self._net("drift", x, t)

    def _diffusion(self, x, t):
        if "diffusion" not in self.nets:
            return self.truth.diffusion(x, t)
        return ad.reshape(self._net("diffusion", x, t), (-1, self.d, self.m))

    def _jump(self, x, t):
        if "jump" not in self.nets:
            return self.truth.jump(x, t)
        return ad.reshape(self._net("jump", x, t), (-1, self.d, self.n_marks))

    def bind(self, tape: ad.Tape) -> NetworkCoefficients:
        bound = {k: p.bind(tape, k) for k, p in self.nets.items()}
        return NetworkCoefficients(self.truth, bound, self.d, self.m, self.n_marks)

    def parameters(self) -> dict[str, MlpParams]:
        return dict(self.nets)


def net_arch(component: str, spec: ProcessSpec, hidden_layers: int, width: int) -> MlpArch:
    out = {"drift": spec.d, "diffusion": spec.d * spec.m,
           "jump": spec.d * spec.measure.n_marks}[component]
    return MlpArch(spec.d + 1, hidden_layers, width, out)


def assemble_surrogate(prior: str, nets: dict[str, MlpParams], truth: ProcessSpec) -> ProcessSpec:
    """Surrogate whose given component calls ``truth`` and the rest call ``nets``."""
    need = set(learned_components(prior))
    have = {k for k, v in nets.items() if v is not None}
    if have != need:
        raise ValueError(f"prior {prior!r} needs networks for {sorted(need)}, got {sorted(have)}")
    coeffs = NetworkCoefficients(truth.coefficients, {k: nets[k] for k in need},
                                 truth.d, truth.m, truth.measure.n_marks)
    return ProcessSpec(truth.d, truth.m, truth.measure, coeffs, source="surrogate",
                       name=f"{truth.name}-surrogate")


# -- configuration and records -----------------------------------------------

@dataclass
class NetConfig:
    hidden_layers: int = 2
    width: int = 150


@dataclass
class TrainConfig:
    loss: str = "decoupled_w2sq"
    lr: float = 0.002
    weight_decay: float = 0.005
    epochs: int = 100
    n_traj: int = 100
    dt: float = 0.2
    N: int = 101
    nets: dict[str, NetConfig] = field(default_factory=lambda: {c: NetConfig() for c in COMPONENTS})
    init: str = "fan_uniform"
    init_var: float = 1e-4
    seed: int = 0
    prior: str = "none"
    noise: str = "fresh"

    def __post_init__(self):
        self.nets = {k: v if isinstance(v, NetConfig) else NetConfig(**v)
                     for k, v in self.nets.items()}
        self.prior = normalize_prior(self.prior)
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSS_KINDS}")
        if not self.lr > 0 or self.epochs < 0 or self.n_traj < 1:
            raise ValueError("need lr > 0, epochs >= 0 and n_traj >= 1")
        if self.noise not in ("fresh", "fixed"):
            raise ValueError("noise must be 'fresh' or 'fixed'")
        if self.init not in ("fan_uniform", "gaussian"):
            raise ValueError("init must be 'fan_uniform' or 'gaussian'")
        missing = set(learned_components(self.prior)) - set(self.nets)
        if missing:
            raise ValueError(f"missing network settings for {sorted(missing)}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_dt(self.dt, self.N)


@dataclass
class ErrorReport:
    drift_err: float | None
    diffusion_err: float | None
    jump_err: float | None
    form: str = "scalar"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)
    seed: int = 0
    start_epoch: int = 0
    nets: dict[str, MlpParams] = field(default_factory=dict, repr=False)
    optimizer: AdamW | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "losses": [None if math.isnan(v) else v for v in self.losses],
            "wall_clock": self.wall_clock,
            "rejected_epochs": self.rejected,
            "seed": self.seed,
            "start_epoch": self.start_epoch,
            "epochs_completed": len(self.losses),
        }


def init_networks(config: TrainConfig, spec: ProcessSpec) -> dict[str, MlpParams]:
    nets = {}
    for k, comp in enumerate(COMPONENTS):
        if comp not in learned_components(config.prior):
            continue
        nc = config.nets[comp]
        arch = net_arch(comp, spec, nc.hidden_layers, nc.width)
        nets[comp] = mlp_init(arch, config.init, derive_seed(config.seed, 1, k), config.init_var)
    return nets


# -- training ------------------------------------------------------------------

def _flatten(nets: dict[str, MlpParams]) -> np.ndarray:
    if not nets:
        return np.zeros(0)
    return np.concatenate([nets[k].flat() for k in COMPONENTS if k in nets])


def _unflatten(nets: dict[str, MlpParams], vec: np.ndarray) -> dict[str, MlpParams]:
    out, k = {}, 0
    for name in COMPONENTS:
        if name in nets:
            n = nets[name].size
            out[name] = nets[name].with_flat(vec[k:k + n])
            k += n
    return out


def train_step(surrogate: ProcessSpec, observed: Ensemble, law: InitialLaw, config: TrainConfig,
               noise_seed: int):
    """Simulate the taped surrogate once; return ``(loss, flat gradient)``."""
    tape = ad.Tape()
    ens = simulate_ensemble(surrogate, observed.grid, law, observed.n_traj, seed=noise_seed,
                            graph=tape)
    value, _ = loss_graph(config.loss, observed, ens.path)
    grads = tape.backward(value)
    nets = surrogate.coefficients.parameters()
    flat = (np.concatenate([nets[k].flat_grad(grads, k) for k in COMPONENTS if k in nets])
            if nets else np.zeros(0))
    return float(value.value), flat


def train(config: TrainConfig, observed: Ensemble, truth_for_eval: ProcessSpec,
          law: InitialLaw, nets: dict[str, MlpParams] | None = None,
          optimizer: AdamW | None = None, start_epoch: int = 0):
    """Fit the surrogate to ``observed``; returns ``(TrainTrace, ErrorReport)``.

    Passing ``nets``/``optimizer``/``start_epoch`` resumes an earlier run. Epoch
    ``e`` always draws its surrogate noise from ``(seed, e)`` (or ``(seed, 0)`` in
    fixed-noise mode), so a resumed run continues the original sequence.
    """
    if observed.n_traj != config.n_traj:
        raise ValueError(f"observed ensemble has {observed.n_traj} trajectories, "
                         f"config expects {config.n_traj}")
    if not np.isclose(observed.grid.dt, config.dt) or observed.grid.N != config.N:
        raise ValueError("observed ensemble is not on the configured grid")
    if nets is None:
        nets = init_networks(config, truth_for_eval)
    if optimizer is None:
        optimizer = AdamW(config.lr, config.weight_decay)
    trace = TrainTrace(seed=config.seed, start_epoch=start_epoch)
    params = _flatten(nets)
    streak = 0
    for epoch in range(start_epoch, start_epoch + config.epochs):
        t0 = time.perf_counter()
        surrogate = assemble_surrogate(config.prior, nets, truth_for_eval)
        noise_seed = derive_seed(config.seed, 2, epoch if config.noise == "fresh" else 0)
        try:
            loss, grad = train_step(surrogate, observed, law, config, noise_seed)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise SimulationBlowup(-1, -1)
        except SimulationBlowup as exc:
            streak += 1
            trace.losses.append(float("nan"))
            trace.rejected.append(epoch)
            trace.wall_clock.append(time.perf_counter() - t0)
            log.warning("epoch %d rejected: %s", epoch, exc)
            if streak >= MAX_CONSECUTIVE_BLOWUPS:
                trace.nets, trace.optimizer = nets, optimizer
                raise TrainingAborted(
                    f"{streak} consecutive simulation blow-ups ending at epoch {epoch}: {exc}"
                ) from exc
            continue
        streak = 0
        if params.size:
            params = optimizer.step(params, grad)
            nets = _unflatten(nets, params)
        trace.losses.append(loss)
        trace.wall_clock.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.6g", epoch, loss)
    trace.nets, trace.optimizer = nets, optimizer
    hat = assemble_surrogate(config.prior, nets, truth_for_eval)
    return trace, error_metrics(truth_for_eval, hat, observed)


# -- error metrics ---------------------------------------------------------------

def _eval_all(spec: ProcessSpec, ens: Ensemble):
    """Coefficients at every ``(x_j(t_i), t_i)``; arrays lead with ``(N+1, M)``."""
    c = spec.coefficients
    f, s, b = [], [], []
    for i, t in enumerate(ens.grid.times):
        x = ens.states[:, i, :]
        f.append(np.asarray(ad.value_of(c.drift(x, t)), dtype=float))
        s.append(np.asarray(ad.value_of(c.diffusion(x, t)), dtype=float))
        b.append(np.asarray(ad.value_of(c.jump(x, t)), dtype=float))
    return np.stack(f), np.stack(s), np.stack(b)


def _ratio(num: float, den: float) -> float | None:
    if den == 0:
        return None
    return float(num / den)


def error_metrics_scalar(truth: ProcessSpec, hat: ProcessSpec, eval_ens: Ensemble) -> ErrorReport:
    """Summed absolute deviations over all observed points, relative to the truth.

    The jump terms are weighted by the mark rates. The diffusion term compares
    magnitudes only.
    """
    if truth.d != 1:
        raise ValueError("scalar error metrics need d == 1")
    f, s, b = _eval_all(truth, eval_ens)
    fh, sh, bh = _eval_all(hat, eval_ens)
    rates = np.asarray(truth.measure.rates)
    return ErrorReport(
        _ratio(np.abs(f - fh).sum(), np.abs(f).sum()),
        _ratio(np.abs(np.abs(s) - np.abs(sh)).sum(), np.abs(s).sum()),
        _ratio((np.abs(b - bh) * rates).sum(), (np.abs(b) * rates).sum()),
        form="scalar",
    )


def error_metrics_matrix(truth: ProcessSpec, hat: ProcessSpec, eval_ens: Ensemble) -> ErrorReport:
    """Squared-Frobenius errors of ``sigma sigma^T`` and ``beta beta^T``.

    Denominators use the reconstructed products. The drift entry is the ratio
    of summed Euclidean deviations to summed Euclidean norms.
    """
    f, s, b = _eval_all(truth, eval_ens)
    fh, sh, bh = _eval_all(hat, eval_ens)
    ss, ssh = s @ np.swapaxes(s, -1, -2), sh @ np.swapaxes(sh, -1, -2)
    bb, bbh = b @ np.swapaxes(b, -1, -2), bh @ np.swapaxes(bh, -1, -2)
    return ErrorReport(
        _ratio(np.linalg.norm(f - fh, axis=-1).sum(), np.linalg.norm(f, axis=-1).sum()),
        _ratio(((ss - ssh) ** 2).sum(), (ssh**2).sum()),
        _ratio(((bb - bbh) ** 2).sum(), (bbh**2).sum()),
        form="matrix",
    )


def error_metrics(truth: ProcessSpec, hat: ProcessSpec, eval_ens: Ensemble) -> ErrorReport:
    if truth.d == 1:
        return error_metrics_scalar(truth, hat, eval_ens)
    return error_metrics_matrix(truth, hat, eval_ens)


# -- experiments and sweeps ------------------------------------------------------

@dataclass
class Experiment:
    model: str
    model_params: dict[str, Any]
    initial: InitialLaw
    train: TrainConfig
    data_seed: int = 0

    def truth(self) -> ProcessSpec:
        return make_model(self.model, **self.model_params)


def generate_observed(exp: Experiment) -> Ensemble:
    return simulate_ensemble(exp.truth(), exp.train.grid, exp.initial, exp.train.n_traj,
                             seed=exp.data_seed)


def run_experiment(exp: Experiment, observed: Ensemble | None = None):
    truth = exp.truth()
    if observed is None:
        observed = generate_observed(exp)
    trace, report = train(exp.train, observed, truth, exp.initial)
    return trace, report


def _final_loss(trace: TrainTrace) -> float:
    finite = [v for v in trace.losses if not math.isnan(v)]
    return finite[-1] if finite else float("nan")


def run_cell(exp: Experiment, repeat: int) -> dict:
    """One sweep cell/repeat; failures are recorded rather than raised."""
    cell = replace(exp, data_seed=exp.data_seed + repeat,
                   train=replace(exp.train, seed=exp.train.seed + repeat))
    row = {"repeat": repeat, "train_seed": cell.train.seed, "data_seed": cell.data_seed}
    try:
        trace, report = run_experiment(cell)
    except (TrainingAborted, SimulationBlowup, ValueError, FloatingPointError) as exc:
        row.update(status="failed", error=str(exc), final_loss=float("nan"),
                   drift_err=None, diffusion_err=None, jump_err=None)
        return row
    row.update(status="ok", error="", final_loss=_final_loss(trace),
               drift_err=report.drift_err, diffusion_err=report.diffusion_err,
               jump_err=report.jump_err)
    return row


def sweep(cells: list[tuple[dict, Experiment]], repeats: int = 1, workers: int = 1) -> list[dict]:
    """Run every ``(label, experiment)`` cell ``repeats`` times.

    Repeat ``r`` of every cell uses data seed ``data_seed + r`` and training seed
    ``seed + r``, so a one-cell one-repeat sweep equals a direct run.
    """
    jobs = [(ci, label, exp, r) for ci, (label, exp) in enumerate(cells) for r in range(repeats)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, [j[2] for j in jobs], [j[3] for j in jobs]))
    else:
        results = [run_cell(exp, r) for _, _, exp, r in jobs]
    rows = []
    for (ci, label, _, _), res in zip(jobs, results):
        rows.append({"cell": ci, **{k: v for k, v in label.items()}, **res})
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation of each metric per cell over its repeats."""
    out = []
    for ci in sorted({r["cell"] for r in rows}):
        group = [r for r in rows if r["cell"] == ci]
        summary = {"cell": ci, "repeats": len(group),
                   "failed": sum(r["status"] != "ok" for r in group)}
        for key in ("final_loss", "drift_err", "diffusion_err", "jump_err"):
            vals = np.array([np.nan if r[key] is None else r[key] for r in group], dtype=float)
            ok = vals[np.isfinite(vals)]
            summary[f"{key}_mean"] = float(ok.mean()) if ok.size else None
            summary[f"{key}_std"] = float(ok.std()) if ok.size else None
        out.append(summary)
    return out
