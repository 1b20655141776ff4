"""Held-out evaluation metrics and the reproducible experiment registry.

Metrics here are the only place trained steppers meet the reference solver
on purpose: every reference trajectory is logged under the oracle ledger's
eval counter so proxy-driven runs can prove they never peeked.  Evaluation
start states are drawn from their own seed stream and re-drawn if they land
on a training input, keeping test data disjoint from collection.

``run_experiment`` maps a fixed set of study names onto configured runs of
the collection loop plus the matching metric, and emits a flat key = value
report (floats printed to round-trip precision) along with plot-ready CSV
files when an output directory is given.  Reports are deterministic under a
fixed seed except for keys under the ``timing.`` prefix.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from ._util import STREAM_BOUNDS, STREAM_EVAL, fmt, rng_for
from .bounds import (
    calibrate_bounds,
    check_backward_bounds,
    check_forward_bounds,
    check_reciprocal_bounds,
    save_bound_report,
)
from .dynsys import (
    LEDGER,
    SystemSpec,
    burgers_reconstruct,
    get_system,
    integrate,
)
from .evonet import rollout_batch
from .sampler import (
    EXCLUDE_TOLERANCE,
    ErrorField,
    LoopConfig,
    LoopDiverged,
    correlation,
    critical_sampling_loop,
    error_field,
    save_field,
    save_history,
)

__all__ = [
    "METRICS",
    "EvalProtocol",
    "MetricResult",
    "RelativeL2Result",
    "PRESETS",
    "protocol_steps",
    "eval_starts",
    "trajectory_mse",
    "mse_evaluator",
    "pde_l2_error",
    "relative_l2",
    "lattice",
    "loop_config_for",
    "protocol_for",
    "experiment_names",
    "experiment_defaults",
    "run_experiment",
    "save_report",
    "load_report",
]

METRICS = ("per-step-mse", "modal-l2", "relative-l2-step", "relative-l2-second")

# spatial grid for field reconstruction error: one period, cell-left points
FIELD_POINTS = 100
_FIELD_X = -np.pi + 2.0 * np.pi * np.arange(FIELD_POINTS) / FIELD_POINTS

_DRAW_ROUNDS = 64  # rejection rounds before eval_starts gives up


@dataclass(frozen=True)
class EvalProtocol:
    """Held-out assessment setup: horizon, trajectory count, metric, seed.

    ``horizon`` is physical time and must be an integer multiple of the
    system lag (checked where the two meet, in :func:`protocol_steps`).

    ``confined`` restricts test starts to states whose reference trajectory
    stays inside the domain over the whole horizon.  The learned operator
    carries no information beyond the sampled region, so unconfined scores
    mostly measure extrapolation; confinement keeps the metric about the
    operator.  It is switched off for systems whose attractor pokes outside
    the sampling box, where confinement would reject nearly every draw.
    """

    horizon: float
    n_trajectories: int = 50
    metric: str = "per-step-mse"
    seed: int = 0
    confined: bool = True

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ValueError("requires a finite horizon > 0")
        if int(self.n_trajectories) < 1:
            raise ValueError("requires n_trajectories >= 1")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_trajectories", int(self.n_trajectories))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "confined", bool(self.confined))
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


def protocol_steps(protocol: EvalProtocol, delta: float) -> int:
    """Number of lag steps spanning the horizon; rejects non-integer ratios."""
    ratio = protocol.horizon / float(delta)
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * max(1.0, abs(ratio)):
        raise ValueError(
            f"horizon {protocol.horizon} is not an integer multiple of lag {delta}"
        )
    return steps


def _confined_mask(system: SystemSpec, starts: np.ndarray, steps: int) -> np.ndarray:
    """Which starts keep their reference trajectory inside the domain.

    Membership is checked at every lag point (excursions between lag points
    pass; the rollout metrics only ever look at lag points).  The screening
    integrations are reference-solver work and count as evaluation calls.
    """
    u = np.array(starts, dtype=float)
    alive = np.ones(u.shape[0], dtype=bool)
    computed = 0
    for _ in range(steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        u[idx] = integrate(system, u[idx], system.delta)
        computed += idx.size
        alive[idx] &= system.domain.contains(u[idx])
    LEDGER.record(computed, "eval")
    return alive


def eval_starts(system: SystemSpec, protocol: EvalProtocol, exclude=None) -> np.ndarray:
    """Test initial states: uniform over the domain under the eval stream.

    Any draw within EXCLUDE_TOLERANCE of a row of ``exclude`` (training
    inputs) is rejected and replaced, so test starts never coincide with
    collected data.  Under a confined protocol, draws whose reference
    trajectory leaves the domain within the horizon are rejected as well.
    """
    rng = rng_for(protocol.seed, STREAM_EVAL, 0)
    steps = protocol_steps(protocol, system.delta) if protocol.confined else 0
    tree = None
    if exclude is not None:
        pts = np.atleast_2d(np.asarray(exclude, dtype=float))
        if pts.shape[0]:
            tree = cKDTree(pts)
    rows = []
    need = protocol.n_trajectories
    for _ in range(_DRAW_ROUNDS):
        if need == 0:
            break
        draw = system.domain.sample(rng, need)
        if tree is not None:
            dist, _ = tree.query(draw)
            draw = draw[dist > EXCLUDE_TOLERANCE]
        if protocol.confined and draw.shape[0]:
            draw = draw[_confined_mask(system, draw, steps)]
        rows.append(draw)
        need -= draw.shape[0]
    if need:
        raise RuntimeError("could not draw test states clear of the training set")
    return np.concatenate(rows, axis=0)


@dataclass(frozen=True)
class MetricResult:
    """Score summary across held-out trajectories.

    ``mean``/``std`` aggregate the per-trajectory scores, the reporting
    order; ``pooled_mean``/``pooled_std`` flatten every step of every finite
    trajectory first, the other defensible order.  A divergent rollout
    scores +inf and stays in ``values``, poisoning the headline mean
    visibly; ``diverged`` counts such trajectories.  Spreads use the n-1
    normalization.
    """

    mean: float
    std: float
    values: tuple
    diverged: int
    pooled_mean: float
    pooled_std: float


def _spread(values: np.ndarray) -> float:
    # +inf entries from divergent rollouts make the spread nan; that is the
    # honest answer, just not worth a runtime warning
    with np.errstate(invalid="ignore"):
        return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def _aggregate(per_traj: np.ndarray, pooled: np.ndarray, diverged: int) -> MetricResult:
    pooled = np.asarray(pooled, dtype=float)
    if pooled.size == 0:
        pooled_mean, pooled_std = float("inf"), float("inf")
    else:
        pooled_mean, pooled_std = float(np.mean(pooled)), _spread(pooled)
    return MetricResult(
        mean=float(np.mean(per_traj)),
        std=_spread(per_traj),
        values=tuple(float(v) for v in per_traj),
        diverged=int(diverged),
        pooled_mean=pooled_mean,
        pooled_std=pooled_std,
    )


def _check_lag(model, system: SystemSpec) -> None:
    lag = getattr(model, "delta", None)
    if lag is not None and abs(float(lag) - system.delta) > 1e-12:
        raise ValueError(
            f"model lag {lag} does not match system lag {system.delta}"
        )


def _reference_trajectories(system: SystemSpec, starts: np.ndarray, steps: int) -> np.ndarray:
    """Reference paths (T, steps+1, n); every lag step is an eval oracle call."""
    path = np.empty((starts.shape[0], steps + 1, system.dim), dtype=float)
    path[:, 0] = starts
    for k in range(steps):
        path[:, k + 1] = integrate(system, path[:, k], system.delta)
    LEDGER.record(starts.shape[0] * steps, kind="eval")
    return path


def _per_step_scores(model, starts, ref, dim):
    """Per-trajectory mean squared deviation per component, +inf on blow-up."""
    steps = ref.shape[1] - 1
    path = rollout_batch(model, starts, steps)
    with np.errstate(invalid="ignore", over="ignore"):
        gap = path[:, 1:] - ref[:, 1:]
        sq = np.einsum("tkn,tkn->tk", gap, gap) / dim
    finite = np.isfinite(path).all(axis=(1, 2))
    per_traj = np.full(starts.shape[0], np.inf)
    per_traj[finite] = sq[finite].mean(axis=1)
    return per_traj, sq[finite].ravel(), int((~finite).sum())


def mse_evaluator(system: SystemSpec, protocol: EvalProtocol, exclude=None):
    """Reusable per-step MSE scorer with the reference paths integrated once.

    Returns ``score(model) -> MetricResult``.  Handy as a loop ``eval_fn``
    (take ``.mean`` of the result) where re-integrating the references every
    pass would be waste; the oracle cost is logged exactly once because the
    solver really runs exactly once.
    """
    starts = eval_starts(system, protocol, exclude)
    steps = protocol_steps(protocol, system.delta)
    ref = _reference_trajectories(system, starts, steps)

    def score(model) -> MetricResult:
        _check_lag(model, system)
        return _aggregate(*_per_step_scores(model, starts, ref, system.dim))

    score.starts = starts
    return score


def trajectory_mse(model, system: SystemSpec, protocol: EvalProtocol, exclude=None) -> MetricResult:
    """Per-step MSE against reference trajectories from fresh test starts.

    Each step contributes the squared Euclidean gap divided by the state
    dimension; a trajectory's score averages its steps (the start state is
    the rollout input, not a prediction, and is not scored).
    """
    return mse_evaluator(system, protocol, exclude)(model)


def pde_l2_error(model, protocol: EvalProtocol, exclude=None) -> MetricResult:
    """Field-space error for the modal Burgers system at the horizon.

    Modal coefficients roll to the final time, both paths are reconstructed
    on a fixed 100-point spatial grid, and each start scores the root mean
    square pointwise deviation there.  Divergent rollouts score +inf.
    """
    system = get_system("burgers")
    _check_lag(model, system)
    steps = protocol_steps(protocol, system.delta)
    starts = eval_starts(system, protocol, exclude)
    ref = _reference_trajectories(system, starts, steps)
    path = rollout_batch(model, starts, steps)
    truth_field = burgers_reconstruct(ref[:, steps], _FIELD_X)
    with np.errstate(invalid="ignore", over="ignore"):
        model_field = burgers_reconstruct(path[:, steps], _FIELD_X)
        diff = model_field - truth_field
        scores = np.sqrt(np.einsum("tm,tm->t", diff, diff) / FIELD_POINTS)
    finite = np.isfinite(path).all(axis=(1, 2))
    per_ic = np.where(finite, scores, np.inf)
    # a single-time norm has no inner step axis, so both aggregation orders
    # coincide and the pooled pair just drops the divergent entries
    return _aggregate(per_ic, per_ic[finite], int((~finite).sum()))


@dataclass(frozen=True)
class RelativeL2Result:
    """Relative errors along one held-out trajectory.

    ``per_step`` averages |model(u_k) - u_{k+1}| / |u_{k+1}| over the test
    states; ``per_second`` does the same after composing the stepper across
    a physical second.  ``diverged`` counts states whose prediction left the
    finite range at either horizon.
    """

    per_step: float
    per_second: float
    n_states: int
    diverged: int


def relative_l2(
    model,
    system: SystemSpec,
    per_second_steps: int = 20,
    n_states: int = 100,
    seed: int = 0,
    exclude=None,
) -> RelativeL2Result:
    """Relative L2 error on a held-out trajectory, per lag and per second.

    One reference trajectory long enough for ``n_states`` test states plus
    the composition window is integrated from a seeded random start; states
    that coincide with a training input are dropped from the test set.
    """
    _check_lag(model, system)
    if per_second_steps < 1 or n_states < 1:
        raise ValueError("requires per_second_steps >= 1 and n_states >= 1")
    start = system.domain.sample(rng_for(seed, STREAM_EVAL, 1), 1)
    traj = _reference_trajectories(system, start, n_states + per_second_steps)[0]
    states = np.arange(n_states)
    if exclude is not None:
        pts = np.atleast_2d(np.asarray(exclude, dtype=float))
        if pts.shape[0]:
            dist, _ = cKDTree(pts).query(traj[states])
            states = states[dist > EXCLUDE_TOLERANCE]
    if states.size == 0:
        raise ValueError("no test state is clear of the training set")
    rolled = rollout_batch(model, traj[states], per_second_steps)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        step_rel = np.linalg.norm(rolled[:, 1] - traj[states + 1], axis=1)
        step_rel = step_rel / np.linalg.norm(traj[states + 1], axis=1)
        comp_rel = np.linalg.norm(
            rolled[:, per_second_steps] - traj[states + per_second_steps], axis=1
        )
        comp_rel = comp_rel / np.linalg.norm(traj[states + per_second_steps], axis=1)
    bad = ~np.isfinite(rolled).all(axis=(1, 2))
    step_rel = np.where(np.isfinite(step_rel), step_rel, np.inf)
    comp_rel = np.where(bad | ~np.isfinite(comp_rel), np.inf, comp_rel)
    return RelativeL2Result(
        per_step=float(np.mean(step_rel)),
        per_second=float(np.mean(comp_rel)),
        n_states=int(states.size),
        diverged=int(bad.sum()),
    )


# ---------------------------------------------------------------------------
# per-system presets

PRESETS = {
    "pendulum": dict(
        J0=100, batch_per_iter=36, budget=417, blocks=1, width=20, epochs=600,
        sdn_epochs=3000, poly_order=2, horizon=20.0, metric="per-step-mse",
    ),
    "nonlinear": dict(
        J0=100, batch_per_iter=36, budget=925, blocks=1, width=20, epochs=400,
        sdn_epochs=1500, poly_order=2, horizon=10.0, metric="per-step-mse",
    ),
    "lorenz": dict(
        J0=500, batch_per_iter=200, budget=1765, blocks=1, width=30, epochs=60,
        sdn_epochs=300, poly_order=2, horizon=5.0, metric="per-step-mse",
        confined=False,
    ),
    "burgers": dict(
        J0=5000, batch_per_iter=2000, budget=19683, blocks=4, width=20, epochs=60,
        sdn_epochs=300, poly_order=1, horizon=2.0, metric="modal-l2",
    ),
}

_LOOP_FIELD_NAMES = frozenset(LoopConfig.__dataclass_fields__)


def loop_config_for(name: str, **overrides) -> LoopConfig:
    """Loop configuration preloaded with a builtin system's defaults.

    Any LoopConfig field may be overridden by keyword; unknown names are
    rejected rather than silently dropped.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown system {name!r}; presets exist for {sorted(PRESETS)}")
    p = PRESETS[name]
    fields = dict(
        J0=p["J0"],
        batch_per_iter=p["batch_per_iter"],
        stop_mode="sample-budget",
        budget=p["budget"],
        blocks=p["blocks"],
        width=p["width"],
        epochs=p["epochs"],
        sdn_epochs=p["sdn_epochs"],
        poly_order=p["poly_order"],
    )
    unknown = sorted(set(overrides) - _LOOP_FIELD_NAMES)
    if unknown:
        raise ValueError(f"unknown loop settings {unknown}")
    fields.update(overrides)
    return LoopConfig(**fields)


def protocol_for(name: str, **overrides) -> EvalProtocol:
    """Evaluation protocol preloaded with a builtin system's defaults."""
    if name not in PRESETS:
        raise ValueError(f"unknown system {name!r}; presets exist for {sorted(PRESETS)}")
    p = PRESETS[name]
    fields = dict(horizon=p["horizon"], metric=p["metric"],
                  confined=p.get("confined", True))
    allowed = {"horizon", "n_trajectories", "metric", "seed", "confined"}
    unknown = sorted(set(overrides) - allowed)
    if unknown:
        raise ValueError(f"unknown protocol settings {unknown}")
    fields.update(overrides)
    return EvalProtocol(**fields)


def lattice(domain, side: int) -> np.ndarray:
    """Cell-centered regular grid with side**dim points over the box."""
    if side < 1:
        raise ValueError("requires side >= 1")
    axes = [
        lo + (np.arange(side) + 0.5) * (hi - lo) / side
        for lo, hi in zip(domain.lower, domain.upper)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------------------
# experiment registry

def _merge(defaults: dict, overrides) -> dict:
    cfg = dict(defaults)
    if overrides:
        unknown = sorted(set(overrides) - set(defaults))
        if unknown:
            raise ValueError(
                f"unknown override keys {unknown}; valid keys are {sorted(defaults)}"
            )
        cfg.update(overrides)
    return cfg


def _loop_settings(cfg: dict) -> dict:
    return {k: cfg[k] for k in cfg if k in _LOOP_FIELD_NAMES}


def _run_loop(system, config, out_dir, eval_fn=None):
    """Loop run that leaves a resumable checkpoint behind on every pass.

    A divergence abort still writes the last completed state before the
    exception propagates, so long runs never vanish.
    """
    cb = None
    if out_dir is not None:
        def cb(state):
            state.samples.save(os.path.join(out_dir, "samples_checkpoint.csv"))
            save_history(os.path.join(out_dir, "history_checkpoint.csv"), state.history)
    try:
        return critical_sampling_loop(system, config, eval_fn=eval_fn, checkpoint_cb=cb)
    except LoopDiverged as exc:
        if out_dir is not None:
            exc.state.samples.save(os.path.join(out_dir, "samples_checkpoint.csv"))
            save_history(os.path.join(out_dir, "history_checkpoint.csv"), exc.state.history)
        raise


def _history_keys(report: dict, history) -> None:
    report["history.rows"] = len(history)
    for r in history:
        report[f"history.{r.iteration}.samples"] = r.samples
        report[f"history.{r.iteration}.mean_recip"] = r.mean_recip
        report[f"history.{r.iteration}.eval_error"] = r.eval_error


def _write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _disjoint(starts: np.ndarray, training: np.ndarray) -> bool:
    dist, _ = cKDTree(np.atleast_2d(training)).query(np.atleast_2d(starts))
    return bool(np.min(dist) > EXCLUDE_TOLERANCE)


def _trajectory_figure(out_dir, name, system, model, start, steps) -> None:
    """Reference and model paths from one start, columns t, ref_*, model_*."""
    ref = _reference_trajectories(system, start[None, :], steps)[0]
    path = rollout_batch(model, start[None, :], steps)[0]
    n = system.dim
    header = (
        ["t"]
        + [f"ref_{j + 1}" for j in range(n)]
        + [f"model_{j + 1}" for j in range(n)]
    )
    rows = [
        [k * system.delta, *ref[k], *path[k]]
        for k in range(steps + 1)
    ]
    _write_csv(os.path.join(out_dir, name), header, rows)


def _field_figure(out_dir, name, system, model, start, steps) -> None:
    """Reconstructed final-time fields for one modal start, columns x, ref, model."""
    ref = _reference_trajectories(system, start[None, :], steps)[0, steps]
    path = rollout_batch(model, start[None, :], steps)[0, steps]
    with np.errstate(invalid="ignore", over="ignore"):
        rows = np.column_stack(
            [_FIELD_X, burgers_reconstruct(ref, _FIELD_X), burgers_reconstruct(path, _FIELD_X)]
        )
    _write_csv(os.path.join(out_dir, name), ["x", "ref", "model"], rows)


# plot-data slot per system for the solution-comparison export
_FIGURE_SLOT = {"pendulum": 6, "nonlinear": 6, "lorenz": 7, "burgers": 8}


def _table2_defaults(name: str) -> dict:
    p = PRESETS[name]
    return dict(
        J0=p["J0"],
        batch_per_iter=p["batch_per_iter"],
        budget=p["budget"],
        blocks=p["blocks"],
        width=p["width"],
        epochs=p["epochs"],
        poly_order=p["poly_order"],
        recip_steps=5,
        augment_factor=20,
        sdn_epochs=p["sdn_epochs"],
        consistency_points=500,
        warm_start=False,
        seed=0,
        n_trajectories=50,
        horizon=p["horizon"],
    )


def _run_table2(name: str, cfg: dict, out_dir) -> dict:
    system = get_system(name)
    config = loop_config_for(name, **_loop_settings(cfg))
    result = _run_loop(system, config, out_dir)
    protocol = protocol_for(
        name,
        horizon=cfg["horizon"],
        n_trajectories=cfg["n_trajectories"],
        seed=cfg["seed"],
    )
    exclude = result.samples.u0
    if protocol.metric == "modal-l2":
        metric = pde_l2_error(result.forward, protocol, exclude=exclude)
    else:
        metric = trajectory_mse(result.forward, system, protocol, exclude=exclude)
    report = {
        "system": name,
        "seed": cfg["seed"],
        "samples.final": result.samples.oracle_count,
        "stop_reason": result.stop_reason,
        "error.metric": protocol.metric,
        "error.mean": metric.mean,
        "error.std": metric.std,
        "error.pooled_mean": metric.pooled_mean,
        "error.pooled_std": metric.pooled_std,
        "error.diverged": metric.diverged,
        "error.n_trajectories": protocol.n_trajectories,
        "error.horizon": protocol.horizon,
        "eval.disjoint": _disjoint(eval_starts(system, protocol, exclude), exclude),
    }
    _history_keys(report, result.history)
    if out_dir is not None:
        save_history(os.path.join(out_dir, f"history_{name}.csv"), result.history)
        _write_csv(
            os.path.join(out_dir, f"figure3_{name}.csv"),
            ["samples", "mean_recip"],
            [[r.samples, r.mean_recip] for r in result.history],
        )
        steps = protocol_steps(protocol, system.delta)
        start = eval_starts(system, protocol, exclude)[0]
        figure = f"figure{_FIGURE_SLOT[name]}_{name}.csv"
        if name == "burgers":
            _field_figure(out_dir, figure, system, result.forward, start, steps)
        else:
            _trajectory_figure(out_dir, figure, system, result.forward, start, steps)
    return report


def _ksweep_defaults() -> dict:
    d = _table2_defaults("pendulum")
    d.update(k_values=(1, 3, 5, 7, 9), seeds=(0, 1, 2))
    d.pop("seed")
    return d


def _run_ksweep(cfg: dict, out_dir) -> dict:
    system = get_system("pendulum")
    k_values = tuple(int(k) for k in cfg["k_values"])
    seeds = tuple(int(s) for s in cfg["seeds"])
    if not k_values or not seeds:
        raise ValueError("requires at least one window length and one seed")
    report = {"system": "pendulum", "k_values": ",".join(map(str, k_values))}
    rows = []
    votes = dict.fromkeys(k_values, 0)
    settings = _loop_settings(cfg)
    settings.pop("recip_steps", None)
    for seed in seeds:
        errors = {}
        for k in k_values:
            config = loop_config_for("pendulum", recip_steps=k, seed=seed, **settings)
            result = _run_loop(system, config, None)
            protocol = protocol_for(
                "pendulum",
                horizon=cfg["horizon"],
                n_trajectories=cfg["n_trajectories"],
                seed=seed,
            )
            metric = trajectory_mse(
                result.forward, system, protocol, exclude=result.samples.u0
            )
            errors[k] = metric.mean
            report[f"error.seed{seed}.K{k}"] = metric.mean
            report[f"samples.seed{seed}.K{k}"] = result.samples.oracle_count
            rows.append([k, seed, metric.mean])
        best = min(errors, key=errors.get)
        votes[best] += 1
        report[f"argmin.seed{seed}"] = best
    for k in k_values:
        report[f"argmin.count.K{k}"] = votes[k]
    if out_dir is not None:
        _write_csv(os.path.join(out_dir, "table4_k_sweep.csv"), ["K", "seed", "error"], rows)
    return report


def _sweep_defaults() -> dict:
    d = _table2_defaults("pendulum")
    d.update(
        budget=1440,
        targets=(0.128, 0.075, 0.044, 0.026),
        baselines=(3600, 6400, 10000, 14400),
    )
    return d


def _run_sweep(cfg: dict, out_dir) -> dict:
    system = get_system("pendulum")
    targets = tuple(float(t) for t in cfg["targets"])
    baselines = tuple(int(b) for b in cfg["baselines"])
    if len(targets) != len(baselines) or not targets:
        raise ValueError("requires matching nonempty targets and baselines")
    protocol = protocol_for(
        "pendulum",
        horizon=cfg["horizon"],
        n_trajectories=cfg["n_trajectories"],
        seed=cfg["seed"],
    )
    score = mse_evaluator(system, protocol)
    config = loop_config_for(
        "pendulum",
        **_loop_settings(cfg),
        stop_mode="oracle-error-threshold",
        threshold=min(targets),
    )
    result = _run_loop(system, config, out_dir, eval_fn=lambda fwd: score(fwd).mean)
    report = {
        "system": "pendulum",
        "seed": cfg["seed"],
        "samples.final": result.samples.oracle_count,
        "stop_reason": result.stop_reason,
        "eval.disjoint": _disjoint(score.starts, result.samples.u0),
    }
    _history_keys(report, result.history)
    rows = []
    for i, (target, baseline) in enumerate(zip(targets, baselines)):
        hit = [r.samples for r in result.history if r.eval_error <= target]
        crossed = min(hit) if hit else -1
        ratio = baseline / crossed if hit else float("nan")
        report[f"sweep.{i}.target"] = target
        report[f"sweep.{i}.baseline"] = baseline
        report[f"sweep.{i}.samples"] = crossed
        report[f"sweep.{i}.ratio"] = ratio
        rows.append([target, baseline, crossed, ratio])
    if out_dir is not None:
        save_history(os.path.join(out_dir, "history_pendulum.csv"), result.history)
        _write_csv(
            os.path.join(out_dir, "figure5_pendulum.csv"),
            ["samples", "eval_error"],
            [[r.samples, r.eval_error] for r in result.history],
        )
        _write_csv(
            os.path.join(out_dir, "table5_crossings.csv"),
            ["target", "baseline", "samples", "ratio"],
            rows,
        )
    return report


def _mno_defaults() -> dict:
    p = PRESETS["lorenz"]
    return dict(
        J0=p["J0"],
        batch_per_iter=p["batch_per_iter"],
        budget=4452,
        blocks=p["blocks"],
        width=p["width"],
        epochs=p["epochs"],
        poly_order=p["poly_order"],
        recip_steps=5,
        augment_factor=20,
        sdn_epochs=p["sdn_epochs"],
        consistency_points=500,
        seed=0,
        delta=0.05,
        per_second_steps=20,
        n_states=100,
    )


def _run_mno(cfg: dict, out_dir) -> dict:
    system = replace(get_system("lorenz"), delta=float(cfg["delta"]))
    config = loop_config_for("lorenz", **_loop_settings(cfg))
    result = _run_loop(system, config, out_dir)
    rel = relative_l2(
        result.forward,
        system,
        per_second_steps=int(cfg["per_second_steps"]),
        n_states=int(cfg["n_states"]),
        seed=int(cfg["seed"]),
        exclude=result.samples.u0,
    )
    report = {
        "system": "lorenz",
        "seed": cfg["seed"],
        "delta": float(cfg["delta"]),
        "samples.final": result.samples.oracle_count,
        "stop_reason": result.stop_reason,
        "relative.per_step": rel.per_step,
        "relative.per_second": rel.per_second,
        "relative.n_states": rel.n_states,
        "relative.diverged": rel.diverged,
    }
    _history_keys(report, result.history)
    if out_dir is not None:
        save_history(os.path.join(out_dir, "history_lorenz.csv"), result.history)
    return report


def _correlation_defaults() -> dict:
    d = _table2_defaults("pendulum")
    d.update(seeds=(0, 1, 2), grid_side=20, corr_steps=15)
    for k in ("budget", "n_trajectories", "horizon", "seed"):
        d.pop(k)
    return d


def _window_truth(system: SystemSpec, model, points: np.ndarray,
                  steps: int) -> np.ndarray:
    """True modeling error accumulated over a forecast window: the summed
    squared gap between the forward stepper's rollout and the reference
    trajectory from the same starts.  This matches the multi-step structure
    of the reciprocal proxy, which integrates error over a window rather
    than scoring a single step."""
    path = rollout_batch(model, points, steps)
    gap = np.zeros(points.shape[0])
    cur = points
    for k in range(1, steps + 1):
        cur = integrate(system, cur, system.delta)
        gap += np.sum((path[:, k] - cur) ** 2, axis=1)
    LEDGER.record(points.shape[0] * steps, kind="eval")
    return gap


def _run_correlation(cfg: dict, out_dir) -> dict:
    system = get_system("pendulum")
    seeds = tuple(int(s) for s in cfg["seeds"])
    if not seeds:
        raise ValueError("requires at least one seed")
    grid = lattice(system.domain, int(cfg["grid_side"]))
    steps = int(cfg["corr_steps"])
    report = {
        "system": "pendulum",
        "grid.points": grid.shape[0],
        "corr.steps": steps,
    }
    pearsons, spearmans = [], []
    for seed in seeds:
        # budget == J0 stops the loop right after its first training pass,
        # so the scored models are exactly the first-iteration ones
        config = loop_config_for(
            "pendulum", **_loop_settings(cfg), budget=int(cfg["J0"]), seed=seed
        )
        result = _run_loop(system, config, None)
        # proxy and truth are both integrated over the same window, so the
        # scatter compares like against like: window proxy vs window error
        proxy = error_field(result.forward, result.backward, grid, steps=steps)
        field = ErrorField(
            grid, proxy.reciprocal,
            truth=_window_truth(system, result.forward, grid, steps),
        )
        pear, spear = correlation(field)
        pearsons.append(pear)
        spearmans.append(spear)
        report[f"corr.seed{seed}.pearson"] = pear
        report[f"corr.seed{seed}.spearman"] = spear
        # single-step error against the same proxy, reported for reference;
        # it ranks differently because one step ignores error growth
        onestep = error_field(
            result.forward,
            result.backward,
            grid,
            steps=int(cfg["recip_steps"]),
            with_truth=True,
            system=system,
        )
        pear1, spear1 = correlation(onestep)
        report[f"corr.seed{seed}.pearson_onestep"] = pear1
        report[f"corr.seed{seed}.spearman_onestep"] = spear1
        if out_dir is not None:
            save_field(os.path.join(out_dir, f"figure4_pendulum_seed{seed}.csv"), field)
    report["corr.min.pearson"] = min(pearsons)
    report["corr.min.spearman"] = min(spearmans)
    return report


def _bound_defaults() -> dict:
    d = _table2_defaults("pendulum")
    d.update(budget=172, window=5, n_grid=10_000, n_lipschitz=1000, n_starts=100)
    for k in ("n_trajectories", "horizon"):
        d.pop(k)
    return d


def _run_bounds(cfg: dict, out_dir) -> dict:
    system = get_system("pendulum")
    config = loop_config_for("pendulum", **_loop_settings(cfg))
    result = _run_loop(system, config, out_dir)
    window = int(cfg["window"])
    params, eps = calibrate_bounds(
        result.forward,
        result.backward,
        system,
        window=window,
        n_grid=int(cfg["n_grid"]),
        n_lipschitz=int(cfg["n_lipschitz"]),
        seed=int(cfg["seed"]),
    )
    starts = system.domain.sample(rng_for(int(cfg["seed"]), STREAM_BOUNDS, 3), int(cfg["n_starts"]))
    report = {
        "system": "pendulum",
        "seed": cfg["seed"],
        "samples.final": result.samples.oracle_count,
        "window": window,
        "params.lipschitz": params.lipschitz,
        "params.eps_forward": params.eps_forward,
        "params.eps_backward": params.eps_backward,
        "eps.forward_grid": eps["forward"].value,
        "eps.backward_grid": eps["backward"].value,
    }
    checkers = {
        "forward": lambda: check_forward_bounds(result.forward, system, params, starts),
        "backward": lambda: check_backward_bounds(result.backward, system, params, starts),
        "reciprocal": lambda: check_reciprocal_bounds(
            result.forward, result.backward, system, params, starts
        ),
    }
    for label, run in checkers.items():
        checks, eligible = run()
        report[f"{label}.eligible"] = int(np.sum(eligible))
        report[f"{label}.all_satisfied"] = all(c.satisfied for c in checks)
        for c in checks:
            report[f"{label}.k{c.k}.empirical"] = c.empirical
            report[f"{label}.k{c.k}.bound"] = c.bound
            report[f"{label}.k{c.k}.satisfied"] = c.satisfied
        if out_dir is not None:
            save_bound_report(os.path.join(out_dir, f"bounds_{label}.csv"), checks)
    _history_keys(report, result.history)
    return report


_EXPERIMENTS = {
    "table2-pendulum": (lambda: _table2_defaults("pendulum"), lambda c, o: _run_table2("pendulum", c, o)),
    "table2-nonlinear": (lambda: _table2_defaults("nonlinear"), lambda c, o: _run_table2("nonlinear", c, o)),
    "table2-lorenz": (lambda: _table2_defaults("lorenz"), lambda c, o: _run_table2("lorenz", c, o)),
    "table2-burgers": (lambda: _table2_defaults("burgers"), lambda c, o: _run_table2("burgers", c, o)),
    "table4-K-sweep": (_ksweep_defaults, _run_ksweep),
    "table5-frequency-sweep": (_sweep_defaults, _run_sweep),
    "table6-mno-protocol": (_mno_defaults, _run_mno),
    "correlation-study": (_correlation_defaults, _run_correlation),
    "bound-study": (_bound_defaults, _run_bounds),
}


def experiment_names() -> tuple:
    return tuple(sorted(_EXPERIMENTS))


def experiment_defaults(name: str) -> dict:
    """Registered configuration of one experiment (a fresh copy)."""
    if name not in _EXPERIMENTS:
        raise ValueError(
            f"unknown experiment {name!r}; valid names are {', '.join(experiment_names())}"
        )
    return _EXPERIMENTS[name][0]()


def run_experiment(name: str, overrides=None, out_dir=None) -> dict:
    """Run one registered study and return its flat report dictionary.

    ``overrides`` may replace any registered default (unknown keys are
    rejected with the valid set in the message).  With ``out_dir`` the
    report, per-pass checkpoints, and plot-ready CSV files are written
    there.  All keys except the ``timing.`` group are deterministic under a
    fixed configuration.
    """
    if name not in _EXPERIMENTS:
        raise ValueError(
            f"unknown experiment {name!r}; valid names are {', '.join(experiment_names())}"
        )
    defaults, runner = _EXPERIMENTS[name]
    cfg = _merge(defaults(), overrides)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    before = LEDGER.snapshot()
    t0 = time.perf_counter()
    report = {"experiment": name}
    report.update(runner(cfg, out_dir))
    after = LEDGER.snapshot()
    report["oracle.train_calls"] = after["train_calls"] - before["train_calls"]
    report["oracle.eval_calls"] = after["eval_calls"] - before["eval_calls"]
    report["timing.total_seconds"] = time.perf_counter() - t0
    if out_dir is not None:
        save_report(os.path.join(out_dir, "report.txt"), report)
    return report


# ---------------------------------------------------------------------------
# report files

def _format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(float(v))
    return str(v)


def save_report(path, report: dict) -> None:
    """Sorted key = value lines; floats print at round-trip precision."""
    with open(path, "w") as fh:
        for key in sorted(report):
            fh.write(f"{key} = {_format_value(report[key])}\n")


def load_report(path) -> dict:
    """Report file back as a string-valued mapping."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition(" = ")
            if not sep:
                raise ValueError(f"malformed report line {line!r}")
            out[key] = value
    return out
