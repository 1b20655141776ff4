"""Reciprocal-error scoring and the adaptive sample-collection loop.

The forward and backward steppers disagree most where the data constrained
them least, so the summed squared gap between a forward rollout and the
backward re-prediction of the same window scores model quality without any
reference solution.  The loop exploits that: train on what has been
collected, score a dense candidate pool, query the reference solver only at
suppressed peaks of the score, and repeat until a stop rule fires.  Every
pass retrains from scratch under seeds derived from (seed, pass index), so
an interrupted run resumes bitwise at any pass boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from ._util import fmt, fmt_row, parse_floats, subseed
from .dynsys import (
    LEDGER,
    PROV_CRITICAL,
    SampleSet,
    SystemSpec,
    generate_initial_set,
    integrate,
    oracle_pairs,
)
from .evonet import (
    EvolutionModel,
    RolloutDiverged,
    reciprocal_trace,
    rollout_batch,
    train_evolution,
)
from .spatial import AUGMENT_CAP, SpatialModel, augment, train_sdn
from .tensornet import NetArchitecture, TrainConfig, TrainingDiverged

STOP_MODES = ("oracle-error-threshold", "proxy-threshold", "sample-budget")

# A candidate this close (Euclidean) to an already-collected initial state is
# never selected again; matches the sample-set uniqueness tolerance scale.
EXCLUDE_TOLERANCE = 1e-9

HISTORY_COLUMNS = ("iteration", "J_m", "mean_recip", "max_recip",
                   "eval_error", "oracle_calls", "seconds")


class LoopDiverged(RuntimeError):
    """Training failed mid-loop; ``state`` resumes at the last completed pass."""

    def __init__(self, message: str, state: "LoopState"):
        super().__init__(message)
        self.state = state


def reciprocal_error(fwd: EvolutionModel, bwd: EvolutionModel, u0, steps: int) -> float:
    """Summed squared gap between the forward window and its backward re-prediction.

    Divergence of either rollout maps to +inf rather than an exception, so
    badly modeled regions rank highest when the value drives selection.  The
    final index contributes zero by construction (exact handoff).
    """
    try:
        trace = reciprocal_trace(fwd, bwd, u0, steps)
    except RolloutDiverged:
        return float("inf")
    value = float(np.sum(trace.deviations()))
    return value if np.isfinite(value) else float("inf")


def true_modeling_error(fwd: EvolutionModel, system: SystemSpec, u0):
    """One-lag gap to the reference flow, ``|fwd(u0) - flow(u0)|``.

    Needs the reference solver, so it only belongs in evaluation: every call
    is logged under the ledger's eval counter.  Accepts one state (n,) for a
    scalar or a batch (B, n) for a vector of gaps.
    """
    u0 = np.asarray(u0, dtype=float)
    single = u0.ndim == 1
    batch = np.atleast_2d(u0)
    ref = integrate(system, batch, system.delta)
    LEDGER.record(batch.shape[0], kind="eval")
    err = np.linalg.norm(fwd.predict(batch) - ref, axis=1)
    return float(err[0]) if single else err


@dataclass(frozen=True)
class ErrorField:
    """Proxy scores (and optionally reference gaps) over candidate states."""

    points: np.ndarray
    reciprocal: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        rec = np.atleast_1d(np.asarray(self.reciprocal, dtype=float))
        if rec.shape != (pts.shape[0],):
            raise ValueError("one reciprocal value per candidate is required")
        if np.any(rec < 0) or np.any(np.isnan(rec)):
            raise ValueError("reciprocal values must be nonnegative (inf allowed)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "reciprocal", rec)
        if self.truth is not None:
            tru = np.atleast_1d(np.asarray(self.truth, dtype=float))
            if tru.shape != rec.shape:
                raise ValueError("one truth value per candidate is required")
            object.__setattr__(self, "truth", tru)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def divergent(self) -> np.ndarray:
        """Mask of candidates whose rollout left the finite range."""
        return ~np.isfinite(self.reciprocal)


def error_field(
    fwd: EvolutionModel,
    bwd: EvolutionModel,
    candidates,
    steps: int,
    with_truth: bool = False,
    system: SystemSpec | None = None,
) -> ErrorField:
    """Score every candidate by the reciprocal gap (and the oracle on request).

    Both window rollouts run batched over all candidates; a non-finite value
    anywhere along a candidate's paths flags that candidate as +inf.
    """
    pts = np.atleast_2d(np.asarray(candidates, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("requires at least one candidate")
    fpaths = rollout_batch(fwd, pts, steps)
    bpaths = rollout_batch(bwd, fpaths[:, steps], steps)
    # bpaths[:, j] is j lag-steps back from the handoff, i.e. window index
    # steps - j, so reversing the path axis aligns the two windows.
    with np.errstate(invalid="ignore", over="ignore"):
        gaps = fpaths - bpaths[:, ::-1]
        recip = np.einsum("mkn,mkn->m", gaps, gaps)
    bad = ~np.isfinite(fpaths).all(axis=(1, 2))
    bad |= ~np.isfinite(bpaths).all(axis=(1, 2))
    bad |= ~np.isfinite(recip)
    recip = np.where(bad, np.inf, recip)
    truth = None
    if with_truth:
        if system is None:
            raise ValueError("with_truth requires the system for reference flows")
        truth = true_modeling_error(fwd, system, pts)
    return ErrorField(pts, recip, truth)


def correlation(field: ErrorField) -> tuple[float, float]:
    """Pearson and Spearman association between the proxy and the oracle gap.

    Non-finite entries are dropped pairwise; a constant column leaves both
    coefficients undefined and raises instead of returning nan.
    """
    if field.truth is None:
        raise ValueError("correlation requires truth values on the field")
    mask = np.isfinite(field.reciprocal) & np.isfinite(field.truth)
    x = field.reciprocal[mask]
    y = field.truth[mask]
    if x.size < 3:
        raise ValueError("requires at least 3 finite candidate pairs")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ValueError("correlation undefined for zero-variance values")
    pearson = float(stats.pearsonr(x, y).statistic)
    spearman = float(stats.spearmanr(x, y).statistic)
    return pearson, spearman


@dataclass(frozen=True)
class PeakSelection:
    """Greedy peak picks: the states, their candidate indices, and whether
    the eligible pool ran out before the requested count was reached."""

    points: np.ndarray
    indices: np.ndarray
    exhausted: bool


def select_peaks(
    field: ErrorField,
    count: int,
    radius: float,
    exclude=None,
    exclude_radius: float = 0.0,
) -> PeakSelection:
    """Repeated argmax of the proxy score with spatial suppression.

    ``radius`` is an absolute Euclidean distance; each pick removes every
    candidate strictly within it, so returned points are pairwise at least
    ``radius`` apart.  Ties go to the lowest candidate index.  Candidates
    within EXCLUDE_TOLERANCE of any ``exclude`` state are never eligible;
    a positive ``exclude_radius`` widens that standoff so the batch also
    keeps its distance from everything already collected.  The score is
    not recomputed between picks (the models are unchanged).
    """
    if count < 1:
        raise ValueError("requires count >= 1")
    if radius < 0:
        raise ValueError("requires radius >= 0")
    pts = field.points
    vals = field.reciprocal
    eligible = ~np.isnan(vals)
    if exclude is not None:
        ex = np.atleast_2d(np.asarray(exclude, dtype=float))
        if ex.shape[0]:
            near, _ = cKDTree(ex).query(pts)
            eligible &= near > EXCLUDE_TOLERANCE
            if exclude_radius > 0.0:
                eligible &= near >= exclude_radius
    picked = []
    for _ in range(count):
        if not np.any(eligible):
            break
        masked = np.where(eligible, vals, -np.inf)
        i = int(np.argmax(masked))
        picked.append(i)
        dist = np.linalg.norm(pts - pts[i], axis=1)
        eligible &= dist >= radius
        eligible[i] = False
    idx = np.array(picked, dtype=int)
    return PeakSelection(pts[idx].copy(), idx, exhausted=len(picked) < count)


def _select_batch(fld: ErrorField, count: int, radius: float,
                  collected, standoff: float):
    """Pick up to ``count`` peaks while keeping ``standoff`` distance from
    the collected set; when the standoff empties the pool early, halve it
    and fill the remainder, so a batch comes back short only when every
    candidate coincides with a collected state."""
    sel = select_peaks(fld, count, radius, exclude=collected,
                       exclude_radius=standoff)
    points = sel.points
    while points.shape[0] < count and standoff > EXCLUDE_TOLERANCE:
        standoff *= 0.5
        ex = np.vstack([collected, points]) if points.size else collected
        more = select_peaks(fld, count - points.shape[0], radius,
                            exclude=ex, exclude_radius=standoff)
        if more.points.shape[0]:
            points = (np.vstack([points, more.points])
                      if points.size else more.points)
    return points


@dataclass(frozen=True)
class LoopConfig:
    """One adaptive run, fully determined: loop structure, stop rule, and the
    training hyperparameters of every model fit inside the loop.

    ``suppression_fraction`` scales the domain-box diagonal into the peak
    suppression radius.  ``standoff_fraction`` controls how far new picks
    must stay from everything already collected: the standoff radius is
    min(suppression radius, standoff_fraction * diagonal / J^(1/dim)), so
    it relaxes as the set grows and never blocks large budgets; 0 disables
    the standoff entirely.  ``budget`` caps collected samples in
    sample-budget mode and optionally also in the threshold modes;
    ``threshold`` is the stop level for the threshold modes (mean proxy
    score, or the eval_fn value under oracle-error-threshold).
    """

    J0: int
    batch_per_iter: int
    recip_steps: int = 5
    suppression_fraction: float = 0.02
    standoff_fraction: float = 0.5
    stop_mode: str = "sample-budget"
    budget: int | None = None
    threshold: float | None = None
    max_iterations: int = 1000
    seed: int = 0
    warm_start: bool = False
    # stepper training
    epochs: int = 150
    batch_size: int = 10
    lr_initial: float = 1e-3
    lr_final: float = 1e-6
    consistency_weight: float = 0.1
    consistency_points: int = 500
    blocks: int = 1
    width: int = 20
    # neighbor model and augmentation
    neighbors: int = 10
    poly_order: int = 2
    sdn_epochs: int = 300
    sdn_lr_initial: float = 1e-2
    augment_factor: int = 20

    def __post_init__(self):
        if self.J0 < 1 or self.batch_per_iter < 1:
            raise ValueError("requires J0 >= 1 and batch_per_iter >= 1")
        if self.recip_steps < 1:
            raise ValueError("requires recip_steps >= 1")
        if self.suppression_fraction < 0:
            raise ValueError("requires suppression_fraction >= 0")
        if self.standoff_fraction < 0:
            raise ValueError("requires standoff_fraction >= 0")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"stop_mode must be one of {STOP_MODES}")
        if self.stop_mode == "sample-budget":
            if self.budget is None or self.budget < self.J0:
                raise ValueError("sample-budget mode requires budget >= J0")
        elif self.threshold is None or self.threshold < 0:
            raise ValueError("threshold modes require a nonnegative threshold")
        if self.max_iterations < 1:
            raise ValueError("requires max_iterations >= 1")
        if self.augment_factor < 0:
            raise ValueError("requires augment_factor >= 0")


@dataclass(frozen=True)
class IterationRecord:
    """One loop pass: the collected count its models trained on, field
    statistics, optional held-out assessment, and cost counters.

    ``mean_recip`` averages the finite field entries only (a lone divergent
    candidate would otherwise erase the trend); ``max_recip`` keeps +inf so
    divergence stays visible.  ``oracle_calls`` is the collected total after
    this pass's peak queries.  ``seconds`` is wall time and is excluded from
    determinism comparisons.
    """

    iteration: int
    samples: int
    mean_recip: float
    max_recip: float
    eval_error: float
    oracle_calls: int
    seconds: float


@dataclass(frozen=True)
class LoopState:
    """Resume point: the collected set, history so far, and next pass index.

    The models of the last completed pass ride along for checkpoint export;
    resuming retrains them from the per-pass sub-seeds, so they may be None
    (a state recovered after a training failure has none).
    """

    samples: SampleSet
    history: tuple
    iteration: int
    forward: EvolutionModel | None = None
    backward: EvolutionModel | None = None
    spatial: SpatialModel | None = None


@dataclass(frozen=True)
class LoopResult:
    forward: EvolutionModel
    backward: EvolutionModel
    spatial: SpatialModel
    samples: SampleSet
    field: ErrorField
    history: tuple
    stop_reason: str


def histories_equal(a, b) -> bool:
    """Record-by-record equality ignoring the wall-time column.

    Float fields compare bitwise except that nan equals nan, so records from
    runs without held-out assessment still match.
    """
    if len(a) != len(b):
        return False
    def feq(x, y):
        return x == y or (np.isnan(x) and np.isnan(y))
    return all(
        x.iteration == y.iteration
        and x.samples == y.samples
        and x.oracle_calls == y.oracle_calls
        and feq(x.mean_recip, y.mean_recip)
        and feq(x.max_recip, y.max_recip)
        and feq(x.eval_error, y.eval_error)
        for x, y in zip(a, b)
    )


def critical_sampling_loop(
    system: SystemSpec,
    config: LoopConfig,
    eval_fn=None,
    checkpoint_cb=None,
    resume_state: LoopState | None = None,
) -> LoopResult:
    """Adaptive collection: train, score candidates by the proxy, query peaks.

    Each pass fits the neighbor model on the collected pairs, fabricates
    synthetic pairs at uniform points, fits the forward stepper (with the
    consistency pull) and the backward stepper on the enlarged set, scores
    every enlarged-set input by the reciprocal gap, then queries the
    reference solver at suppressed peaks and appends only those collected
    pairs; synthetic rows never enter the collected set.  ``eval_fn`` maps
    the pass's forward model to a scalar assessment and is consulted only
    under oracle-error-threshold, so the other stop modes make zero
    evaluation-oracle calls.  ``checkpoint_cb`` receives a LoopState after
    each pass; feeding one back as ``resume_state`` replays the remaining
    passes bitwise.  Warm starting reuses the previous pass's parameters as
    the next initialization, which ties passes together: a resume state must
    then carry the last pass's models (checkpoints do) or the first resumed
    pass falls back to a fresh initialization.
    """
    if config.stop_mode == "oracle-error-threshold" and eval_fn is None:
        raise ValueError("oracle-error-threshold mode requires an eval_fn")
    if resume_state is None:
        samples = generate_initial_set(system, config.J0, config.seed)
        history: list = []
        m = 0
    else:
        samples = resume_state.samples
        history = list(resume_state.history)
        m = int(resume_state.iteration)
    radius = config.suppression_fraction * system.domain.diagonal
    arch = NetArchitecture(system.dim, system.dim,
                           blocks=config.blocks, width=config.width)
    prev_fwd = prev_bwd = None
    if resume_state is not None and config.warm_start and resume_state.forward is not None:
        prev_fwd = resume_state.forward.params
        prev_bwd = resume_state.backward.params
    while True:
        t0 = time.perf_counter()
        try:
            sdn_cfg = TrainConfig(epochs=config.sdn_epochs,
                                  batch_size=config.batch_size,
                                  lr_initial=config.sdn_lr_initial,
                                  seed=subseed(config.seed, m, 0))
            spatial = train_sdn(samples, h_nn=config.neighbors,
                                order=config.poly_order, config=sdn_cfg,
                                scale=system.domain.halfwidth)
            n_aug = min(config.augment_factor * samples.oracle_count, AUGMENT_CAP)
            enlarged = augment(samples, spatial, n_aug, system.domain,
                               seed=subseed(config.seed, m, 1))
            fwd_cfg = TrainConfig(epochs=config.epochs,
                                  batch_size=config.batch_size,
                                  lr_initial=config.lr_initial,
                                  lr_final=config.lr_final,
                                  seed=subseed(config.seed, m, 2),
                                  consistency_weight=config.consistency_weight)
            bwd_cfg = replace(fwd_cfg, seed=subseed(config.seed, m, 3),
                              consistency_weight=0.0)
            fwd = train_evolution(enlarged, "forward", fwd_cfg, system.domain,
                                  arch=arch, spatial=spatial,
                                  consistency_points=config.consistency_points,
                                  init_params=prev_fwd)
            bwd = train_evolution(enlarged, "backward", bwd_cfg, system.domain,
                                  arch=arch, init_params=prev_bwd)
        except TrainingDiverged as exc:
            raise LoopDiverged(
                f"training diverged in pass {m}: {exc}",
                LoopState(samples, tuple(history), m),
            ) from exc
        if config.warm_start:
            prev_fwd, prev_bwd = fwd.params, bwd.params
        fld = error_field(fwd, bwd, enlarged.u0, config.recip_steps)
        finite = fld.reciprocal[np.isfinite(fld.reciprocal)]
        mean_recip = float(np.mean(finite)) if finite.size else float("inf")
        max_recip = float(np.max(fld.reciprocal))
        eval_error = float("nan")
        if config.stop_mode == "oracle-error-threshold":
            eval_error = float(eval_fn(fwd))
        trained_on = samples.oracle_count

        stop_reason = None
        n_new = config.batch_per_iter
        if config.stop_mode == "proxy-threshold" and mean_recip <= config.threshold:
            stop_reason = "proxy-threshold-met"
        elif (config.stop_mode == "oracle-error-threshold"
              and eval_error <= config.threshold):
            stop_reason = "oracle-threshold-met"
        if stop_reason is None and config.budget is not None:
            n_new = min(n_new, config.budget - samples.oracle_count)
            if n_new <= 0:
                stop_reason = "sample-budget-exhausted"
        if stop_reason is None and len(history) + 1 >= config.max_iterations:
            stop_reason = "max-iterations"
        if stop_reason is None:
            standoff = 0.0
            if config.standoff_fraction > 0:
                standoff = min(radius,
                               config.standoff_fraction * system.domain.diagonal
                               / samples.oracle_count ** (1.0 / system.dim))
            pts_new = _select_batch(fld, n_new, radius, samples.u0, standoff)
            if pts_new.shape[0] == 0:
                stop_reason = "candidates-exhausted"
            else:
                u0s, u1s = oracle_pairs(system, pts_new, PROV_CRITICAL)
                samples = samples.extended(u0s, u1s, PROV_CRITICAL,
                                           iteration=m + 1)
        history.append(IterationRecord(
            iteration=m,
            samples=trained_on,
            mean_recip=mean_recip,
            max_recip=max_recip,
            eval_error=eval_error,
            oracle_calls=samples.oracle_count,
            seconds=time.perf_counter() - t0,
        ))
        if checkpoint_cb is not None:
            checkpoint_cb(LoopState(samples, tuple(history), m + 1,
                                    forward=fwd, backward=bwd, spatial=spatial))
        if stop_reason is not None:
            return LoopResult(fwd, bwd, spatial, samples, fld,
                              tuple(history), stop_reason)
        m += 1


# ---------------------------------------------------------------------------
# Columnar text formats


def save_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in history:
            fh.write(f"{r.iteration},{r.samples},{fmt(r.mean_recip)},"
                     f"{fmt(r.max_recip)},{fmt(r.eval_error)},"
                     f"{r.oracle_calls},{fmt(r.seconds)}\n")


def load_history(path) -> tuple:
    with open(path) as fh:
        head = tuple(fh.readline().strip().split(","))
        if head != HISTORY_COLUMNS:
            raise ValueError("malformed history file: unexpected columns")
        records = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != len(HISTORY_COLUMNS):
                raise ValueError("malformed history row: wrong value count")
            records.append(IterationRecord(
                iteration=int(vals[0]),
                samples=int(vals[1]),
                mean_recip=float(vals[2]),
                max_recip=float(vals[3]),
                eval_error=float(vals[4]),
                oracle_calls=int(vals[5]),
                seconds=float(vals[6]),
            ))
    return tuple(records)


def save_field(path, field: ErrorField) -> None:
    n = field.points.shape[1]
    cols = [f"x_{j + 1}" for j in range(n)] + ["recip"]
    if field.truth is not None:
        cols.append("truth")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(field)):
            row = f"{fmt_row(field.points[i])},{fmt(field.reciprocal[i])}"
            if field.truth is not None:
                row += f",{fmt(field.truth[i])}"
            fh.write(row + "\n")


def load_field(path) -> ErrorField:
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
        if "recip" not in cols:
            raise ValueError("malformed field file: missing recip column")
        n = cols.index("recip")
        if cols[:n] != [f"x_{j + 1}" for j in range(n)]:
            raise ValueError("malformed field file: unexpected state columns")
        has_truth = cols[n:] == ["recip", "truth"]
        if not has_truth and cols[n:] != ["recip"]:
            raise ValueError("malformed field file: unexpected trailing columns")
        pts, rec, tru = [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = parse_floats(line)
            if vals.size != len(cols):
                raise ValueError("malformed field row: wrong value count")
            pts.append(vals[:n])
            rec.append(vals[n])
            if has_truth:
                tru.append(vals[n + 1])
    return ErrorField(np.array(pts), np.array(rec),
                      np.array(tru) if has_truth else None)
