"""Benchmark dynamical systems and the reference sample oracle.

A system is an autonomous ODE du/dt = rhs(u) on a box-shaped domain with a
fixed observation lag ``delta``.  The oracle advances states with fixed-step
RK4 at substep delta/100, which resolves all built-in systems to well below
1e-9 relative error; a step-halving mode quantifies the residual truncation
error.  Every oracle query is counted in a global ledger, split by purpose,
so an experiment can demonstrate that model selection used no ground truth.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._util import STREAM_INIT, fmt, fmt_row, parse_floats, rng_for

PROV_INITIAL = "oracle-initial"
PROV_CRITICAL = "oracle-critical"
PROV_AUGMENTED = "augmented"
PROVENANCES = (PROV_INITIAL, PROV_CRITICAL, PROV_AUGMENTED)

# Oracle pairs must be distinct initial states; two draws closer than this
# are treated as the same physical sample.
U0_TOLERANCE = 1e-12


class DivergenceError(RuntimeError):
    """Raised when a trajectory leaves the representable range.

    ``time_reached`` is the largest time at which the state was still finite.
    """

    def __init__(self, message: str, time_reached: float):
        super().__init__(message)
        self.time_reached = float(time_reached)


@dataclass(frozen=True)
class Hypercube:
    """Axis-aligned box: the state domain and sampling region."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1D vectors of equal length")
        if not np.all(lo < hi):
            raise ValueError("requires lower[i] < upper[i] for every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, u, pad: float = 0.0) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.lower - pad) & (u <= self.upper + pad), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(int(n), self.dim))


@dataclass(frozen=True)
class SystemSpec:
    """A named autonomous system: rhs evaluator, lag, and state domain."""

    name: str
    dim: int
    rhs: Callable[[np.ndarray], np.ndarray]
    delta: float
    domain: Hypercube

    def __post_init__(self):
        if self.dim < 1 or self.delta <= 0:
            raise ValueError("requires dim >= 1 and delta > 0")
        if self.domain.dim != self.dim:
            raise ValueError("domain dimension does not match state dimension")


class OracleLedger:
    """Thread-safe count of reference-solver queries, split by purpose.

    ``train`` covers queries whose results may reach the models (sample
    collection); ``eval`` covers held-out assessment.  Proxy-driven runs are
    expected to finish with eval_calls untouched.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.train_calls = 0
        self.eval_calls = 0

    def record(self, n: int = 1, kind: str = "train") -> None:
        if kind not in ("train", "eval"):
            raise ValueError("kind must be 'train' or 'eval'")
        with self._lock:
            if kind == "train":
                self.train_calls += int(n)
            else:
                self.eval_calls += int(n)

    def reset(self) -> None:
        with self._lock:
            self.train_calls = 0
            self.eval_calls = 0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "train_calls": self.train_calls,
                "eval_calls": self.eval_calls,
                "total": self.train_calls + self.eval_calls,
            }


LEDGER = OracleLedger()


def rhs_eval(system: SystemSpec, u) -> np.ndarray:
    """Evaluate the governing equations at one state or a batch of states."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != system.dim:
        raise ValueError(
            f"state has length {u.shape[-1]}, system {system.name} has dim {system.dim}"
        )
    return system.rhs(u)


def reversed_system(system: SystemSpec) -> SystemSpec:
    """Sign-flipped copy of a system: its forward flow is the original's
    backward flow, so backward steppers can be checked against it directly."""
    return SystemSpec(
        name=system.name + "-reversed",
        dim=system.dim,
        rhs=lambda u: -system.rhs(u),
        delta=system.delta,
        domain=system.domain,
    )


def integrate(system: SystemSpec, u0, t: float, substep: float | None = None) -> np.ndarray:
    """Reference flow map: advance u0 by time t with fixed-substep RK4.

    The substep defaults to delta/100 and is shrunk so an integer number of
    steps lands on t exactly.  Accepts a single state (n,) or a batch (B, n).
    """
    if t < 0:
        raise ValueError("requires t >= 0")
    u = np.array(u0, dtype=float)
    if u.shape[-1] != system.dim:
        raise ValueError("state dimension mismatch")
    if not np.all(np.isfinite(u)):
        raise DivergenceError("non-finite initial state", time_reached=0.0)
    if t == 0:
        return u
    h0 = system.delta / 100.0 if substep is None else float(substep)
    # Multiplicative guard so t an exact multiple of h0 is not bumped up a step.
    nsub = max(1, int(np.ceil(t / h0 * (1.0 - 1e-12))))
    h = t / nsub
    rhs = system.rhs
    for i in range(nsub):
        k1 = rhs(u)
        k2 = rhs(u + (0.5 * h) * k1)
        k3 = rhs(u + (0.5 * h) * k2)
        k4 = rhs(u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(u)):
            raise DivergenceError(
                f"trajectory of {system.name} left the finite range at t={fmt((i + 1) * h)}",
                time_reached=i * h,
            )
    return u


def integrate_verified(system: SystemSpec, u0, t: float, substep: float | None = None):
    """Step-halving check on the reference solver.

    Returns ``(u, err)`` where u is the half-substep solution and err the
    max-norm gap to the full-substep run, an estimate of truncation error.
    """
    h0 = system.delta / 100.0 if substep is None else float(substep)
    coarse = integrate(system, u0, t, substep=h0)
    fine = integrate(system, u0, t, substep=0.5 * h0)
    err = float(np.max(np.abs(coarse - fine))) if np.asarray(coarse).size else 0.0
    return fine, err


@dataclass(frozen=True)
class SamplePair:
    """One observed transition u(0) -> u(delta)."""

    u0: np.ndarray
    u1: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        u0 = np.asarray(self.u0, dtype=float)
        u1 = np.asarray(self.u1, dtype=float)
        if u0.shape != u1.shape or u0.ndim != 1:
            raise ValueError("u0 and u1 must be vectors of equal length")
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "u1", u1)


class SampleSet:
    """Ordered collection of transition pairs for one system and lag.

    Rows are stored as two (J, n) arrays plus a provenance tag per row.
    ``iteration`` records which refinement pass the set belongs to; it is
    in-memory loop state, not persisted in the text format.  Augmented rows
    are synthetic and never count toward the collected-sample total.
    """

    def __init__(self, system: str, delta: float, u0, u1, provenance, iteration: int = 0):
        u0 = np.atleast_2d(np.asarray(u0, dtype=float))
        u1 = np.atleast_2d(np.asarray(u1, dtype=float))
        provenance = tuple(provenance)
        if u0.shape != u1.shape:
            raise ValueError("u0 and u1 arrays must have equal shape")
        if len(provenance) != u0.shape[0]:
            raise ValueError("one provenance tag per pair is required")
        for tag in provenance:
            if tag not in PROVENANCES:
                raise ValueError(f"unknown provenance {tag!r}")
        self.system = str(system)
        self.delta = float(delta)
        self.u0 = u0
        self.u1 = u1
        self.provenance = provenance
        self.iteration = int(iteration)

    def __len__(self) -> int:
        return self.u0.shape[0]

    @property
    def dim(self) -> int:
        return self.u0.shape[1]

    @property
    def pairs(self) -> list[SamplePair]:
        return [
            SamplePair(self.u0[i], self.u1[i], self.provenance[i]) for i in range(len(self))
        ]

    def oracle_mask(self) -> np.ndarray:
        return np.array([p != PROV_AUGMENTED for p in self.provenance], dtype=bool)

    @property
    def oracle_count(self) -> int:
        """Number of collected samples (augmented rows excluded)."""
        return int(np.count_nonzero(self.oracle_mask()))

    def select(self, mask) -> "SampleSet":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return SampleSet(
            self.system,
            self.delta,
            self.u0[idx],
            self.u1[idx],
            [self.provenance[i] for i in idx],
            iteration=self.iteration,
        )

    def without_augmented(self) -> "SampleSet":
        return self.select(self.oracle_mask())

    def extended(self, u0, u1, provenance, iteration: int | None = None) -> "SampleSet":
        """Append rows, enforcing u0 uniqueness among oracle-provenance pairs."""
        u0 = np.atleast_2d(np.asarray(u0, dtype=float))
        u1 = np.atleast_2d(np.asarray(u1, dtype=float))
        if isinstance(provenance, str):
            provenance = [provenance] * u0.shape[0]
        provenance = list(provenance)
        new_oracle = np.array([p != PROV_AUGMENTED for p in provenance], dtype=bool)
        if np.any(new_oracle):
            cand = u0[new_oracle]
            base = self.u0[self.oracle_mask()]
            pool = np.concatenate([base, cand], axis=0)
            for j in range(base.shape[0], pool.shape[0]):
                d = np.linalg.norm(pool[:j] - pool[j], axis=1)
                if d.size and float(np.min(d)) <= U0_TOLERANCE:
                    raise ValueError(
                        f"duplicate initial state within {U0_TOLERANCE} at appended row"
                    )
        it = self.iteration if iteration is None else int(iteration)
        if it < self.iteration:
            raise ValueError("iteration must be nondecreasing")
        return SampleSet(
            self.system,
            self.delta,
            np.concatenate([self.u0, u0], axis=0),
            np.concatenate([self.u1, u1], axis=0),
            list(self.provenance) + provenance,
            iteration=it,
        )

    def save(self, path) -> None:
        """Columnar text: one metadata line (dim, delta, system), one row per pair."""
        with open(path, "w") as fh:
            fh.write(f"{self.dim},{fmt(self.delta)},{self.system}\n")
            for i in range(len(self)):
                fh.write(
                    f"{self.provenance[i]},{fmt_row(self.u0[i])},{fmt_row(self.u1[i])}\n"
                )

    @staticmethod
    def load(path) -> "SampleSet":
        with open(path) as fh:
            head = fh.readline().strip().split(",")
            if len(head) != 3:
                raise ValueError("malformed sample file: expected dim,delta,system")
            dim = int(head[0])
            delta = float(head[1])
            system = head[2]
            u0, u1, prov = [], [], []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                tag, rest = line.split(",", 1)
                vals = parse_floats(rest)
                if vals.size != 2 * dim:
                    raise ValueError("malformed sample row: wrong value count")
                prov.append(tag)
                u0.append(vals[:dim])
                u1.append(vals[dim:])
        if not u0:
            return SampleSet(system, delta, np.zeros((0, dim)), np.zeros((0, dim)), [])
        return SampleSet(system, delta, np.array(u0), np.array(u1), prov)


def oracle_pair(system: SystemSpec, u0, provenance: str = PROV_CRITICAL) -> SamplePair:
    """Query the reference solver for one transition and log the cost."""
    u0 = np.asarray(u0, dtype=float)
    u1 = integrate(system, u0, system.delta)
    LEDGER.record(1, kind="train")
    return SamplePair(u0, u1, provenance)


def oracle_pairs(system: SystemSpec, u0s, provenance: str, kind: str = "train"):
    """Batched oracle queries: returns (u0s, u1s) and logs one call per state."""
    u0s = np.atleast_2d(np.asarray(u0s, dtype=float))
    u1s = integrate(system, u0s, system.delta)
    LEDGER.record(u0s.shape[0], kind=kind)
    return u0s, u1s


def generate_initial_set(system: SystemSpec, J0: int, seed: int) -> SampleSet:
    """Uniform initial sample set of J0 oracle pairs, reproducible under seed."""
    if J0 < 1:
        raise ValueError("requires J0 >= 1")
    rng = rng_for(seed, STREAM_INIT)
    u0 = system.domain.sample(rng, J0)
    u0, u1 = oracle_pairs(system, u0, PROV_INITIAL)
    return SampleSet(system.name, system.delta, u0, u1, [PROV_INITIAL] * J0, iteration=0)


# ---------------------------------------------------------------------------
# Built-in benchmark systems


def _pendulum_rhs(u: np.ndarray) -> np.ndarray:
    du = np.empty_like(u)
    du[..., 0] = u[..., 1]
    du[..., 1] = -0.2 * u[..., 1] - 8.91 * np.sin(u[..., 0])
    return du


def pendulum() -> SystemSpec:
    """Damped pendulum: angle in [-pi, pi], velocity in [-2pi, 2pi], lag 0.1."""
    dom = Hypercube([-np.pi, -2.0 * np.pi], [np.pi, 2.0 * np.pi])
    return SystemSpec("pendulum", 2, _pendulum_rhs, 0.1, dom)


def _nonlinear_rhs(u: np.ndarray) -> np.ndarray:
    r2m1 = u[..., 0] ** 2 + u[..., 1] ** 2 - 1.0
    du = np.empty_like(u)
    du[..., 0] = u[..., 1] - u[..., 0] * r2m1
    du[..., 1] = -u[..., 0] - u[..., 1] * r2m1
    return du


def nonlinear() -> SystemSpec:
    """Planar rotation with radial attraction to the unit circle, lag 0.1."""
    dom = Hypercube([-2.0, -2.0], [2.0, 2.0])
    return SystemSpec("nonlinear", 2, _nonlinear_rhs, 0.1, dom)


def _lorenz_rhs(u: np.ndarray) -> np.ndarray:
    du = np.empty_like(u)
    du[..., 0] = 10.0 * (u[..., 1] - u[..., 0])
    du[..., 1] = u[..., 0] * (28.0 - u[..., 2]) - u[..., 1]
    du[..., 2] = u[..., 0] * u[..., 1] - (8.0 / 3.0) * u[..., 2]
    return du


def lorenz() -> SystemSpec:
    """Lorenz system, classic chaotic parameters, lag 0.01."""
    dom = Hypercube([-25.0, -25.0, 0.0], [25.0, 25.0, 50.0])
    return SystemSpec("lorenz", 3, _lorenz_rhs, 0.01, dom)


# Sine-Galerkin reduction of the viscous Burgers equation on (-pi, pi) with
# homogeneous boundary values: u(x,t) = sum_j c_j(t) sin(j x), j = 1..9.
# The nonlinear flux is evaluated on a 256-point collocation grid; products
# of 9-mode fields have bandwidth 27 < 128, so the periodic rectangle rule
# used for the projection is exact quadrature up to roundoff.
BURGERS_MODES = 9
BURGERS_VISCOSITY = 0.1
_BURGERS_GRID = 256
_BURGERS_X = -np.pi + 2.0 * np.pi * np.arange(_BURGERS_GRID) / _BURGERS_GRID
_BURGERS_J = np.arange(1, BURGERS_MODES + 1)
_BURGERS_SIN = np.sin(np.outer(_BURGERS_J, _BURGERS_X))  # (9, M)
_BURGERS_DCOS = _BURGERS_J[:, None] * np.cos(np.outer(_BURGERS_J, _BURGERS_X))


def burgers_reconstruct(coeffs, x) -> np.ndarray:
    """Field values sum_j c_j sin(j x) at the given points."""
    coeffs = np.asarray(coeffs, dtype=float)
    x = np.asarray(x, dtype=float)
    basis = np.sin(np.multiply.outer(x, _BURGERS_J))  # (..., 9)
    return basis @ coeffs if coeffs.ndim == 1 else coeffs @ basis.T


def burgers_modal_rhs(coeffs) -> np.ndarray:
    """Time derivative of the 9 sine-mode coefficients.

    Diffusion acts diagonally as -0.1 j^2 c_j; the quadratic flux u u_x is
    formed on the collocation grid and projected back onto the modes.
    """
    c = np.asarray(coeffs, dtype=float)
    u = c @ _BURGERS_SIN  # (..., M)
    ux = c @ _BURGERS_DCOS
    nonlin = (2.0 / _BURGERS_GRID) * ((u * ux) @ _BURGERS_SIN.T)
    return -BURGERS_VISCOSITY * (_BURGERS_J**2) * c - nonlin


def burgers() -> SystemSpec:
    """Nine-mode Burgers reduction, viscosity 0.1, lag 0.05.

    The modal box shrinks with mode number, mirroring the decay of resolved
    spectra; it is the sampling and evaluation region for the coefficients.
    """
    half = np.array([1.5, 0.5, 0.2, 0.2, 0.1, 0.1, 0.05, 0.05, 0.02])
    dom = Hypercube(-half, half)
    return SystemSpec("burgers", BURGERS_MODES, burgers_modal_rhs, 0.05, dom)


BUILTIN = {
    "pendulum": pendulum,
    "nonlinear": nonlinear,
    "lorenz": lorenz,
    "burgers": burgers,
}


def get_system(name: str) -> SystemSpec:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; available: {sorted(BUILTIN)}") from None
    return factory()
