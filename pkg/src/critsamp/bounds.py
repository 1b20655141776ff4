"""Error-growth bounds for learned steppers, estimated and verified from data.

A Lipschitz rate of the governing field turns the steppers' one-step gaps
into window-wide guarantees: forward rollout errors grow at most
geometrically in the lag count, backward re-prediction errors inherit the
same rate from the far end of the window, and the two combine into a
ceiling on how far the round-trip path can drift from the true trajectory.
Every constant in those statements is estimated here from data (the rate
from sampled Jacobian spectral norms, the gaps and round-trip defects from
grid maxima), and the resulting ceilings are checked point by point against
observed rollout errors on reference trajectories.

The bounds only speak about states whose flow stays inside the training
domain for a full lag, so each checker filters its start points through
that membership test and reports the surviving mask alongside the verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from ._util import STREAM_BOUNDS, fmt, rng_for
from .dynsys import (
    LEDGER,
    Hypercube,
    SystemSpec,
    integrate,
    reversed_system,
    rhs_eval,
)
from .evonet import EvolutionModel, rollout_batch

__all__ = [
    "BoundCheck",
    "BoundParams",
    "EpsEstimate",
    "backward_bound",
    "bound_grid",
    "calibrate_bounds",
    "check_backward_bounds",
    "check_forward_bounds",
    "check_reciprocal_bounds",
    "estimate_composition_gaps",
    "estimate_eps",
    "estimate_lipschitz",
    "forward_bound",
    "lag_membership",
    "load_bound_report",
    "reciprocal_bound",
    "save_bound_report",
]

JACOBIAN_STEP = 1.0e-6
MEMBERSHIP_CHECKS = 10
LIPSCHITZ_MARGIN = 1.05


@dataclass(frozen=True)
class BoundParams:
    """Constants feeding the growth bounds.

    ``lipschitz`` is the field's rate on the domain, ``eps_forward`` and
    ``eps_backward`` the steppers' one-step gaps versus the reference flow,
    ``delta`` the lag, and ``window`` the rollout length the bounds cover.
    ``comp_gap[j]``, when supplied, is the measured round-trip defect after
    j lags out and j lags back (index 0 is identically zero); without it
    the reciprocal bound falls back to its chained route alone.
    """

    lipschitz: float
    eps_forward: float
    eps_backward: float
    delta: float
    window: int
    comp_gap: np.ndarray | None = None

    def __post_init__(self):
        ok = (self.lipschitz >= 0 and self.eps_forward >= 0
              and self.eps_backward >= 0)
        if not ok:
            raise ValueError("rate and one-step gaps must be nonnegative")
        if not self.delta > 0:
            raise ValueError("requires delta > 0")
        if self.window != int(self.window) or self.window < 1:
            raise ValueError("requires integer window >= 1")
        object.__setattr__(self, "window", int(self.window))
        if self.comp_gap is not None:
            gap = np.asarray(self.comp_gap, dtype=float)
            if gap.shape != (self.window + 1,):
                raise ValueError("comp_gap needs one entry per lag count, "
                                 "0 through window")
            if np.any(np.isnan(gap)) or np.any(gap < 0):
                raise ValueError("comp_gap entries must be nonnegative")
            if gap[0] != 0.0:
                raise ValueError("comp_gap[0] is a zero-lag round trip "
                                 "and must be 0")
            object.__setattr__(self, "comp_gap", gap)


def _growth_sum(rate: float, delta: float, steps: int) -> float:
    # sum of e^{rate*delta*j} over j < steps; the expm1 ratio keeps small
    # rates accurate and the rate -> 0 limit is the step count itself
    x = rate * delta
    if x == 0.0:
        return float(steps)
    return float(np.expm1(steps * x) / np.expm1(x))


def forward_bound(params: BoundParams, initial_error: float, k: int) -> float:
    """Ceiling on the forward rollout error after k lags.

    The initial offset grows at the flow's Lipschitz rate while the
    one-step gap accumulates geometrically.
    """
    if k < 0:
        raise ValueError("requires k >= 0")
    if not initial_error >= 0:
        raise ValueError("requires initial_error >= 0")
    grow = np.exp(params.lipschitz * k * params.delta)
    acc = _growth_sum(params.lipschitz, params.delta, k)
    return float(initial_error * grow + acc * params.eps_forward)


def backward_bound(params: BoundParams, end_error: float, k: int) -> float:
    """Ceiling on the backward re-prediction error at lag k, driven by the
    offset at the window's far end and the backward stepper's one-step gap."""
    if not 0 <= k <= params.window:
        raise ValueError("requires 0 <= k <= window")
    if not end_error >= 0:
        raise ValueError("requires end_error >= 0")
    j = params.window - k
    grow = np.exp(params.lipschitz * j * params.delta)
    acc = _growth_sum(params.lipschitz, params.delta, j)
    return float(end_error * grow + acc * params.eps_backward)


def reciprocal_bound(params: BoundParams, k: int) -> float:
    """Ceiling on the round-trip path's deviation from the true trajectory
    at lag k, when the backward pass restarts from the forward endpoint.

    Two routes bound the same quantity and the smaller one wins: the
    measured round-trip defect plus accumulated forward gap, or the forward
    endpoint error carried back through the backward recursion.  Without
    round-trip measurements only the chained route is available.
    """
    if not 0 <= k <= params.window:
        raise ValueError("requires 0 <= k <= window")
    c, d = params.lipschitz, params.delta
    j = params.window - k
    chained = (_growth_sum(c, d, params.window) * params.eps_forward
               * float(np.exp(c * j * d))
               + _growth_sum(c, d, j) * params.eps_backward)
    if params.comp_gap is None:
        return float(chained)
    direct = float(params.comp_gap[j]) + _growth_sum(c, d, k) * params.eps_forward
    return float(min(direct, chained))


def estimate_lipschitz(system: SystemSpec, domain: Hypercube | None = None,
                       n_samples: int = 1000, seed: int = 0) -> float:
    """Lipschitz rate of the governing field over a box, from sampled
    Jacobian spectral norms with a five percent safety margin.

    Central differences with a fixed 1e-6 step; the margin covers the gap
    between a sample maximum and the true supremum on smooth fields.
    """
    if n_samples < 100:
        raise ValueError("requires n_samples >= 100 for a stable maximum")
    box = system.domain if domain is None else domain
    if box.dim != system.dim:
        raise ValueError("domain dimension does not match the system")
    pts = box.sample(rng_for(seed, STREAM_BOUNDS, 0), n_samples)
    jac = np.empty((n_samples, system.dim, system.dim))
    for j in range(system.dim):
        offset = np.zeros(system.dim)
        offset[j] = JACOBIAN_STEP
        jac[:, :, j] = (rhs_eval(system, pts + offset)
                        - rhs_eval(system, pts - offset)) / (2.0 * JACOBIAN_STEP)
    spectral = np.linalg.svd(jac, compute_uv=False)[:, 0]
    return LIPSCHITZ_MARGIN * float(spectral.max())


def bound_grid(domain: Hypercube, n_points: int = 10_000, seed: int = 0) -> np.ndarray:
    """Evaluation grid over a box: low-discrepancy points in low dimension,
    uniform random draws above (Halton spreads poorly past a few axes)."""
    if n_points < 1:
        raise ValueError("requires n_points >= 1")
    if domain.dim <= 3:
        halton = qmc.Halton(d=domain.dim, scramble=True,
                            seed=rng_for(seed, STREAM_BOUNDS, 1))
        return qmc.scale(halton.random(int(n_points)), domain.lower, domain.upper)
    return domain.sample(rng_for(seed, STREAM_BOUNDS, 2), n_points)


def lag_membership(system: SystemSpec, points,
                   checks: int = MEMBERSHIP_CHECKS) -> tuple[np.ndarray, np.ndarray]:
    """Whether each point's reference flow stays inside the domain for one
    full lag, sampled at ``checks`` evenly spaced times.

    Returns (mask, endpoints) where endpoints are the states one lag ahead;
    rows that fail the test carry placeholder endpoints.  Points outside the
    domain, or non-finite ones, fail without being integrated.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    finite = np.isfinite(pts).all(axis=1)
    safe = np.where(finite[:, None], pts, system.domain.center)
    ok = finite & system.domain.contains(safe)
    u = np.where(ok[:, None], safe, system.domain.center)
    step = system.delta / checks
    for _ in range(checks):
        u = integrate(system, u, step)
        ok &= system.domain.contains(u)
    LEDGER.record(pts.shape[0], kind="eval")
    return ok, u


@dataclass(frozen=True)
class EpsEstimate:
    """One-step model gap versus the reference flow, maximized over a grid.

    The value is a grid maximum, so it estimates (from below) the true
    supremum over the domain.  ``grid`` keeps the points that passed the
    flow-membership filter and ``errors`` their per-point gaps, so the
    estimate's provenance stays inspectable.
    """

    value: float
    grid: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 2 or self.errors.shape != (self.grid.shape[0],):
            raise ValueError("errors must align with grid rows")


def estimate_eps(model: EvolutionModel, system: SystemSpec, grid,
                 checks: int = MEMBERSHIP_CHECKS) -> EpsEstimate:
    """One-step gap of a stepper against the reference flow, maximized over
    the eligible part of a grid.

    Backward steppers are compared against the sign-flipped system's flow.
    Eligibility demands the (possibly reversed) flow to stay inside the
    domain for the full lag; a grid with no eligible point is an error.
    """
    ref_system = system if model.direction == "forward" else reversed_system(system)
    mask, endpoints = lag_membership(ref_system, grid, checks=checks)
    if not np.any(mask):
        raise ValueError("no grid point keeps its one-lag flow inside the domain")
    pts = np.atleast_2d(np.asarray(grid, dtype=float))[mask]
    with np.errstate(over="ignore", invalid="ignore"):
        gaps = model.predict(pts) - endpoints[mask]
        errs = np.sqrt(np.einsum("mn,mn->m", gaps, gaps))
    errs = np.where(np.isfinite(errs), errs, np.inf)
    return EpsEstimate(value=float(errs.max()), grid=pts, errors=errs)


def estimate_composition_gaps(forward: EvolutionModel, backward: EvolutionModel,
                              grid, window: int) -> np.ndarray:
    """Grid maxima of the round-trip defect: j lags forward, j lags back,
    distance to the starting point, for j = 0 through window.

    Index 0 is exactly zero.  Non-finite round trips push the estimate to
    inf, which simply deactivates the direct route in the reciprocal bound.
    """
    if forward.direction != "forward" or backward.direction != "backward":
        raise ValueError("requires a forward and a backward stepper")
    if window < 1:
        raise ValueError("requires window >= 1")
    pts = np.atleast_2d(np.asarray(grid, dtype=float))
    gaps = np.zeros(window + 1)
    fpaths = rollout_batch(forward, pts, window)
    for j in range(1, window + 1):
        back = rollout_batch(backward, fpaths[:, j], j)[:, j]
        with np.errstate(over="ignore", invalid="ignore"):
            d = back - pts
            dist = np.sqrt(np.einsum("mn,mn->m", d, d))
        dist = np.where(np.isfinite(dist), dist, np.inf)
        gaps[j] = float(dist.max())
    return gaps


def calibrate_bounds(forward: EvolutionModel, backward: EvolutionModel,
                     system: SystemSpec, window: int, n_grid: int = 10_000,
                     n_lipschitz: int = 1000, seed: int = 0,
                     ) -> tuple[BoundParams, dict]:
    """Estimate every bound constant from data on a fresh grid.

    Returns the assembled parameters plus the per-direction gap estimates,
    whose grids record exactly which states the maxima were taken over.
    """
    grid = bound_grid(system.domain, n_grid, seed)
    eps_f = estimate_eps(forward, system, grid)
    eps_g = estimate_eps(backward, system, grid)
    rate = estimate_lipschitz(system, system.domain, n_lipschitz, seed)
    comp = estimate_composition_gaps(forward, backward, grid, window)
    params = BoundParams(lipschitz=rate, eps_forward=eps_f.value,
                         eps_backward=eps_g.value, delta=system.delta,
                         window=window, comp_gap=comp)
    return params, {"forward": eps_f, "backward": eps_g}


@dataclass(frozen=True)
class BoundCheck:
    """One horizon row of a dominance report: the worst observed error at
    lag k against the predicted ceiling."""

    k: int
    empirical: float
    bound: float
    satisfied: bool


def _reference_path(system: SystemSpec, starts, window: int,
                    checks: int = MEMBERSHIP_CHECKS) -> tuple[np.ndarray, np.ndarray]:
    """Reference trajectories over the window, with in-domain confinement.

    Returns (path, confined): path[:, k] is the state after k lags and
    confined marks starts whose trajectory stays inside the domain at every
    sub-lag sample time, which is what the growth bounds assume.
    """
    pts = np.atleast_2d(np.asarray(starts, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise ValueError("start states must be finite")
    confined = system.domain.contains(pts)
    u = np.where(confined[:, None], pts, system.domain.center)
    path = [pts]
    step = system.delta / checks
    for _ in range(window):
        for _ in range(checks):
            u = integrate(system, u, step)
            confined &= system.domain.contains(u)
        path.append(u)
    LEDGER.record(pts.shape[0] * window, kind="eval")
    return np.stack(path, axis=1), confined


def check_forward_bounds(model: EvolutionModel, system: SystemSpec,
                         params: BoundParams, starts,
                         ) -> tuple[tuple[BoundCheck, ...], np.ndarray]:
    """Verify forward rollout errors against their ceilings, lag by lag.

    Rollouts start on the true trajectory, so the initial offset is zero.
    Eligibility follows the bound's assumptions: the reference trajectory
    stays inside the domain across the window and every intermediate model
    state keeps its one-lag flow inside as well.  Empirical entries are
    maxima over the eligible starts; the mask is returned for inspection.
    """
    if model.direction != "forward":
        raise ValueError("requires a forward stepper")
    ref, eligible = _reference_path(system, starts, params.window)
    mpath = rollout_batch(model, ref[:, 0], params.window)
    eligible = eligible & np.isfinite(mpath).all(axis=(1, 2))
    for k in range(params.window):
        eligible &= lag_membership(system, mpath[:, k])[0]
    return _dominance(ref, mpath, eligible,
                      lambda k: forward_bound(params, 0.0, k), params.window)


def check_backward_bounds(model: EvolutionModel, system: SystemSpec,
                          params: BoundParams, starts,
                          ) -> tuple[tuple[BoundCheck, ...], np.ndarray]:
    """Verify backward re-prediction errors against their ceilings.

    The rollout starts from the true state at the window's far end, so the
    end offset is zero.  Eligibility additionally requires the reversed
    flow from both paths' states to stay inside the domain for a lag, which
    is where the backward recursion lives.
    """
    if model.direction != "backward":
        raise ValueError("requires a backward stepper")
    ref, eligible = _reference_path(system, starts, params.window)
    rev = reversed_system(system)
    bpath = rollout_batch(model, ref[:, params.window], params.window)[:, ::-1]
    eligible = eligible & np.isfinite(bpath).all(axis=(1, 2))
    for k in range(params.window):
        eligible &= lag_membership(rev, ref[:, k])[0]
        eligible &= lag_membership(rev, bpath[:, k])[0]
    return _dominance(ref, bpath, eligible,
                      lambda k: backward_bound(params, 0.0, k), params.window)


def check_reciprocal_bounds(forward: EvolutionModel, backward: EvolutionModel,
                            system: SystemSpec, params: BoundParams, starts,
                            ) -> tuple[tuple[BoundCheck, ...], np.ndarray]:
    """Verify round-trip path deviations from the true trajectory against
    the reciprocal ceilings.

    The forward pass starts on the true trajectory and the backward pass
    restarts from the forward endpoint.  Eligibility combines the forward
    conditions on the outbound path with the reversed-flow conditions on
    the returning path and the reference states, endpoint included, since
    the backward recursion is anchored there.
    """
    if forward.direction != "forward" or backward.direction != "backward":
        raise ValueError("requires a forward and a backward stepper")
    ref, eligible = _reference_path(system, starts, params.window)
    rev = reversed_system(system)
    fpath = rollout_batch(forward, ref[:, 0], params.window)
    bpath = rollout_batch(backward, fpath[:, params.window], params.window)[:, ::-1]
    eligible = (eligible & np.isfinite(fpath).all(axis=(1, 2))
                & np.isfinite(bpath).all(axis=(1, 2)))
    for k in range(params.window):
        eligible &= lag_membership(system, fpath[:, k])[0]
    for k in range(params.window + 1):
        eligible &= lag_membership(rev, ref[:, k])[0]
        eligible &= lag_membership(rev, bpath[:, k])[0]
    return _dominance(ref, bpath, eligible,
                      lambda k: reciprocal_bound(params, k), params.window)


def _dominance(ref, path, eligible, ceiling, window):
    if not np.any(eligible):
        raise ValueError("no start point satisfies the bound's domain conditions")
    gaps = path[eligible] - ref[eligible]
    errs = np.sqrt(np.einsum("mkn,mkn->mk", gaps, gaps))
    rows = []
    for k in range(window + 1):
        emp = float(errs[:, k].max())
        limit = ceiling(k)
        rows.append(BoundCheck(k=k, empirical=emp, bound=limit,
                               satisfied=bool(emp <= limit)))
    return tuple(rows), eligible


REPORT_COLUMNS = ("k", "empirical", "bound", "satisfied")


def save_bound_report(path, checks) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for c in checks:
            fh.write(f"{c.k},{fmt(c.empirical)},{fmt(c.bound)},{int(c.satisfied)}\n")


def load_bound_report(path) -> tuple[BoundCheck, ...]:
    with open(path) as fh:
        head = tuple(fh.readline().strip().split(","))
        if head != REPORT_COLUMNS:
            raise ValueError("malformed bound report: unexpected columns")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != len(REPORT_COLUMNS):
                raise ValueError("malformed bound report row: wrong value count")
            rows.append(BoundCheck(k=int(vals[0]), empirical=float(vals[1]),
                                   bound=float(vals[2]),
                                   satisfied=bool(int(vals[3]))))
    return tuple(rows)
