"""Jump-diffusion process definitions and the ground-truth model zoo.

Coefficient functions are batched: ``x`` has shape ``(M, d)`` and ``t`` is a
scalar time. They return

* drift ``(M, d)``
* diffusion ``(M, d, m)``
* jump ``(M, d, n_marks)``, column ``s`` being the jump vector of mark ``s``.

They are written against :mod:`jumpwass.autodiff` helpers so they can be
evaluated on taped variables as well as plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class JumpMeasure:
    rates: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if any(r < 0 or not np.isfinite(r) for r in self.rates):
            raise ValueError("jump rates must be finite and nonnegative")

    @property
    def marks(self) -> tuple[int, ...]:
        return tuple(range(len(self.rates)))

    @property
    def n_marks(self) -> int:
        return len(self.rates)

    @property
    def total_rate(self) -> float:
        return float(sum(self.rates))


@dataclass
class CoefficientSet:
    drift: Callable
    diffusion: Callable
    jump: Callable

    def bind(self, tape: ad.Tape) -> CoefficientSet:
        """Closed-form coefficients carry no parameters; binding is a no-op."""
        return self

    def parameters(self) -> dict:
        return {}


@dataclass
class ProcessSpec:
    d: int
    m: int
    measure: JumpMeasure
    coefficients: CoefficientSet
    source: Literal["ground-truth", "surrogate"] = "ground-truth"
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m < 0:
            raise ValueError("need d >= 1 and m >= 0")


@dataclass(frozen=True)
class InitialLaw:
    mean: tuple[float, ...]
    std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in np.atleast_1d(self.mean)))
        if self.std < 0:
            raise ValueError("initial standard deviation must be >= 0")

    @property
    def d(self) -> int:
        return len(self.mean)


def _col(x, j):
    return ad.take(x, (slice(None), slice(j, j + 1)))


def _rows(x) -> int:
    return np.shape(ad.value_of(x))[0]


# -- Example 1: bond-pricing model with deterministic jump size ---------------

def make_example1(b: float = 4.0, a: float = -1.0, sigma0: float = 0.4,
                  y0: float = 1.0) -> ProcessSpec:
    def drift(x, t):
        return (b + y0) + a * x

    def diffusion(x, t):
        return ad.reshape(sigma0 * ad.sqrt_abs(x), (-1, 1, 1))

    def jump(x, t):
        return np.full((_rows(x), 1, 1), float(y0))

    return ProcessSpec(1, 1, JumpMeasure((1.0,)), CoefficientSet(drift, diffusion, jump),
                       name="example1", params=dict(b=b, a=a, sigma0=sigma0, y0=y0))


# -- Example 2: constant drift, selectable noise forms -----------------------

FORMS = ("const", "linear", "langevin")


def _form(kind: str, c: float) -> Callable:
    if kind == "const":
        return lambda x: np.full(np.shape(ad.value_of(x)), float(c))
    if kind == "linear":
        return lambda x: c * x
    if kind == "langevin":
        return lambda x: c * ad.sqrt_abs(x)
    raise ValueError(f"unknown coefficient form {kind!r}; choose from {FORMS}")


def make_example2(form_sigma: str = "langevin", form_beta: str = "langevin",
                  sigma0: float = 0.1, beta0: float = 0.1, r0: float = 0.05) -> ProcessSpec:
    sig, bet = _form(form_sigma, sigma0), _form(form_beta, beta0)

    def drift(x, t):
        return np.full((_rows(x), 1), float(r0))

    def diffusion(x, t):
        return ad.reshape(sig(x), (-1, 1, 1))

    def jump(x, t):
        return ad.reshape(bet(x), (-1, 1, 1))

    return ProcessSpec(1, 1, JumpMeasure((1.0,)), CoefficientSet(drift, diffusion, jump),
                       name="example2",
                       params=dict(form_sigma=form_sigma, form_beta=form_beta,
                                   sigma0=sigma0, beta0=beta0, r0=r0))


# -- Example 3: 2-D mixture-gradient drift with correlated noise -------------

EX3_CONST = dict(s1=1.0, s2=0.95, mu11=1.6, mu12=1.2, mu21=1.8, mu22=1.0)


def example3_g(x):
    """Drift field ``g`` (the process drift is ``-g``).

    The second component uses ``mu21`` in its first term, exactly as the model
    is published.
    """
    c = EX3_CONST
    s1, s2 = c["s1"], c["s2"]
    x1, x2 = _col(x, 0), _col(x, 1)
    n1 = (1.0 / (np.sqrt(2 * np.pi) * s1)) * ad.exp(
        -((x1 - c["mu11"]) ** 2) / (2 * s1**2) - ((x2 - c["mu12"]) ** 2) / (2 * s1**2))
    n2 = (1.0 / (np.sqrt(2 * np.pi) * s2)) * ad.exp(
        -((x1 - c["mu21"]) ** 2) / (2 * s2**2) - ((x2 - c["mu22"]) ** 2) / (2 * s2**2))
    w1 = n1 / (n1 + n2)
    w2 = n2 / (n1 + n2)
    g1 = (1 / s1) * w1 * (x1 - c["mu11"]) + (1 / s2) * w2 * (x1 - c["mu21"])
    g2 = (1 / s1) * w1 * (x2 - c["mu21"]) + (1 / s2) * w2 * (x2 - c["mu22"])
    return ad.concatenate([g1, g2], axis=1)


def make_example3(c1: float = -0.5, c2: float = -0.5, sigma0: float = 0.1,
                  beta0: float = 0.1) -> ProcessSpec:
    if abs(c1) > 1 or abs(c2) > 1:
        raise ValueError("correlation coefficients must satisfy |c| <= 1")
    beta_mat = np.array([[beta0, c2 * beta0], [c2 * beta0, beta0]])

    def drift(x, t):
        return -example3_g(x)

    def diffusion(x, t):
        r1 = sigma0 * ad.sqrt_abs(_col(x, 0))
        r2 = sigma0 * ad.sqrt_abs(_col(x, 1))
        row1 = ad.concatenate([r1, c1 * r2], axis=1)
        row2 = ad.concatenate([c1 * r1, r2], axis=1)
        return ad.stack([row1, row2], axis=1)

    def jump(x, t):
        return np.broadcast_to(beta_mat, (_rows(x), 2, 2)).copy()

    return ProcessSpec(2, 2, JumpMeasure((1.0, 1.0)), CoefficientSet(drift, diffusion, jump),
                       name="example3", params=dict(c1=c1, c2=c2, sigma0=sigma0, beta0=beta0))


def make_zero(d: int = 1, m: int = 1, n_marks: int = 1) -> ProcessSpec:
    def drift(x, t):
        return np.zeros((_rows(x), d))

    def diffusion(x, t):
        return np.zeros((_rows(x), d, m))

    def jump(x, t):
        return np.zeros((_rows(x), d, n_marks))

    return ProcessSpec(d, m, JumpMeasure((1.0,) * n_marks), CoefficientSet(drift, diffusion, jump),
                       name="zero")


ZOO = {"example1": make_example1, "example2": make_example2, "example3": make_example3,
       "zero": make_zero}


def make_model(model_id: str, **params) -> ProcessSpec:
    try:
        factory = ZOO[model_id]
    except KeyError:
        raise ValueError(f"unknown model {model_id!r}; known: {sorted(ZOO)}") from None
    return factory(**params)


def evaluate_coefficients(spec: ProcessSpec, x, t: float):
    """Evaluate ``(f, sigma, [beta_s ...])`` at a single state ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, spec.d)
    if not (np.all(np.isfinite(x)) and np.isfinite(t)):
        raise ValueError("non-finite state or time")
    c = spec.coefficients
    f = np.asarray(ad.value_of(c.drift(x, t)), dtype=float).reshape(spec.d)
    sig = np.asarray(ad.value_of(c.diffusion(x, t)), dtype=float).reshape(spec.d, spec.m)
    jmp = np.asarray(ad.value_of(c.jump(x, t)), dtype=float).reshape(spec.d, spec.measure.n_marks)
    return f, sig, [jmp[:, s].copy() for s in range(spec.measure.n_marks)]
