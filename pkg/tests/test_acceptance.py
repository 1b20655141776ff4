"""Acceptance gate: one test per release criterion, at its stated tolerance.

Each test records a one-line verdict that pytest prints in an "acceptance
criteria" summary section after the run.  The expensive criteria share
module-scoped fixtures holding full critical-sampling runs; the multi-hour
reproductions only run with CRITSAMP_EXTENDED=1.
"""

import math
import os

import numpy as np
import pytest

from conftest import record
from _helpers import shift_stepper

from critsamp._util import rng_for
from critsamp.dynsys import (
    BURGERS_MODES,
    Hypercube,
    SampleSet,
    SystemSpec,
    burgers_modal_rhs,
    burgers_reconstruct,
    get_system,
    integrate,
    reversed_system,
)
from critsamp.evonet import (
    load_evolution,
    reciprocal_trace,
    save_evolution,
)
from critsamp.sampler import (
    LoopConfig,
    critical_sampling_loop,
    histories_equal,
    load_history,
    reciprocal_error,
    save_history,
)
from critsamp.spatial import knn, load_spatial, save_spatial, sdn_predict
from critsamp.evalbench import run_experiment
from critsamp.tensornet import (
    NetArchitecture,
    NetParams,
    mse_loss,
    net_forward,
    net_gradient,
)
from critsamp import cli

EXTENDED = os.environ.get("CRITSAMP_EXTENDED") == "1"
extended = pytest.mark.skipif(
    not EXTENDED, reason="set CRITSAMP_EXTENDED=1 for paper-scale reproductions"
)


def _accept(criterion: str, ok, detail: str) -> None:
    record(criterion, bool(ok), detail)
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared runs (module scope: each expensive pipeline executes once)


@pytest.fixture(scope="module")
def pendulum_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_pendulum")
    return run_experiment("table2-pendulum", out_dir=str(out))


@pytest.fixture(scope="module")
def nonlinear_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_nonlinear")
    return run_experiment("table2-nonlinear", out_dir=str(out))


@pytest.fixture(scope="module")
def efficiency_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_efficiency")
    return run_experiment("table5-frequency-sweep", out_dir=str(out))


@pytest.fixture(scope="module")
def correlation_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_correlation")
    return run_experiment("correlation-study", out_dir=str(out))


@pytest.fixture(scope="module")
def ksweep_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_ksweep")
    return run_experiment("table4-K-sweep", out_dir=str(out))


@pytest.fixture(scope="module")
def bound_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_bounds")
    return run_experiment("bound-study", out_dir=str(out))


# ---------------------------------------------------------------------------
# 1-2: few-sample accuracy on the 2D benchmark systems


@pytest.mark.slow
def test_criterion_01_pendulum_accuracy(pendulum_run):
    record("01", False, "did not complete")
    r = pendulum_run
    ok = r["samples.final"] <= 450 and r["error.mean"] <= 0.05
    _accept(
        "01",
        ok,
        f"pendulum {r['samples.final']} samples -> trajectory MSE "
        f"{r['error.mean']:.5f} (need <= 0.05 with <= 450), "
        f"{r['timing.total_seconds'] / 60:.0f} min",
    )


@pytest.mark.slow
def test_criterion_02_nonlinear_accuracy(nonlinear_run):
    record("02", False, "did not complete")
    r = nonlinear_run
    ok = r["samples.final"] <= 1000 and r["error.mean"] <= 7e-4
    _accept(
        "02",
        ok,
        f"nonlinear {r['samples.final']} samples -> trajectory MSE "
        f"{r['error.mean']:.6f} (need <= 7e-4 with <= 1000), "
        f"{r['timing.total_seconds'] / 60:.0f} min",
    )


# ---------------------------------------------------------------------------
# 3: sample-efficiency ratios against the fixed-budget uniform baseline


@pytest.mark.slow
def test_criterion_03_sample_efficiency(efficiency_run):
    record("03", False, "did not complete")
    r = efficiency_run
    parts = []
    ok = True
    for i in range(4):
        target = r[f"sweep.{i}.target"]
        crossed = r[f"sweep.{i}.samples"]
        ratio = r[f"sweep.{i}.ratio"]
        good = crossed > 0 and ratio >= 10.0
        ok = ok and good
        parts.append(f"{target:g}@{crossed} ({ratio:.1f}x)")
    _accept("03", ok, "target@samples: " + ", ".join(parts)
        + f" (need >= 10x each), {r['timing.total_seconds'] / 60:.0f} min")


@pytest.mark.slow
def test_error_vs_samples_curve_improves(efficiency_run):
    # exported error-vs-samples curve ends >= 3x below its first iteration
    # (proxy means are not comparable across passes: the candidate pool
    # follows the collected set, so the check reads the evaluation column)
    r = efficiency_run
    rows = r["history.rows"]
    first = r["history.0.eval_error"]
    final = r[f"history.{rows - 1}.eval_error"]
    assert math.isfinite(first) and math.isfinite(final)
    assert final < first / 3.0


# ---------------------------------------------------------------------------
# 4: proxy-vs-truth correlation after the first collection pass


@pytest.mark.slow
def test_criterion_04_proxy_correlation(correlation_run):
    record("04", False, "did not complete")
    r = correlation_run
    ok = (
        r["grid.points"] == 400
        and r["corr.min.pearson"] >= 0.6
        and r["corr.min.spearman"] >= 0.6
    )
    _accept(
        "04",
        ok,
        f"min over 3 seeds: pearson {r['corr.min.pearson']:.3f}, "
        f"spearman {r['corr.min.spearman']:.3f} on {r['grid.points']} points, "
        f"proxy vs {r['corr.steps']}-step accumulated error "
        f"(need >= 0.6 both), {r['timing.total_seconds'] / 60:.1f} min",
    )


# ---------------------------------------------------------------------------
# 5: the production window length wins the sweep


@pytest.mark.slow
def test_criterion_05_window_sweep(ksweep_run):
    record("05", False, "did not complete")
    r = ksweep_run
    votes = r["argmin.count.K5"]
    per_seed = ", ".join(
        f"seed{s}->K{r[f'argmin.seed{s}']}" for s in (0, 1, 2)
    )
    _accept(
        "05",
        votes >= 2,
        f"K=5 minimal in {votes}/3 seeds ({per_seed}; need >= 2), "
        f"{r['timing.total_seconds'] / 60:.0f} min",
    )


# ---------------------------------------------------------------------------
# 6: error-growth bounds dominate observed errors on trained models


@pytest.mark.slow
def test_criterion_06_bound_dominance(bound_run):
    record("06", False, "did not complete")
    r = bound_run
    ok = True
    parts = []
    for label in ("forward", "backward", "reciprocal"):
        eligible = r[f"{label}.eligible"]
        satisfied = r[f"{label}.all_satisfied"] and all(
            r[f"{label}.k{k}.satisfied"] for k in range(1, 6)
        )
        ok = ok and satisfied and eligible > 0
        parts.append(f"{label}: {eligible} eligible, all k<=5 {satisfied}")
    parts.append(f"{r['timing.total_seconds'] / 60:.1f} min")
    _accept("06", ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 7: the reference backward map inverts the reference forward map


def test_criterion_07_reference_reversibility():
    record("07", False, "did not complete")
    worst = 0.0
    for name in ("pendulum", "nonlinear"):
        system = get_system(name)
        flipped = reversed_system(system)
        u0 = system.domain.sample(rng_for(7, 96), 100)
        u1 = integrate(system, u0, system.delta)
        back = integrate(flipped, u1, system.delta)
        worst = max(worst, float(np.max(np.linalg.norm(back - u0, axis=1))))
    _accept("07", worst <= 1e-7, f"round-trip gap {worst:.2e} on 100 points per system (need <= 1e-7)")


# ---------------------------------------------------------------------------
# 8: solver, gradient, neighbor, and proxy oracles


def _gradient_gap(arch, params, x, y, step=1e-5):
    # max relative deviation of reverse-mode gradients from central differences
    _, grad = net_gradient(arch, params, x, y)
    fd = np.zeros_like(grad)
    for i in range(params.flat.size):
        hi = params.copy()
        hi.flat[i] += step
        lo = params.copy()
        lo.flat[i] -= step
        fd[i] = (mse_loss(arch, hi, x, y) - mse_loss(arch, lo, x, y)) / (2 * step)
    scale = np.maximum(np.abs(fd), 1e-6 * np.max(np.abs(fd)) + 1e-12)
    return float(np.max(np.abs(grad - fd) / scale))


def test_criterion_08_oracle_and_gradient_suites():
    record("08", False, "did not complete")

    # closed-form linear flows: scalar decay and the harmonic rotation
    decay = SystemSpec("decay", 1, lambda u: -u, 0.1, Hypercube([-2.0], [2.0]))
    err_decay = abs(float(integrate(decay, np.array([1.0]), 1.0)[0]) - math.exp(-1.0))
    spin = SystemSpec(
        "spin", 2,
        lambda u: np.stack([u[..., 1], -u[..., 0]], axis=-1),
        0.1, Hypercube([-2.0, -2.0], [2.0, 2.0]),
    )
    t = 1.0
    got = integrate(spin, np.array([1.0, 0.0]), t)
    want = np.array([math.cos(t), -math.sin(t)])
    err_spin = float(np.max(np.abs(got - want)))
    solver_ok = err_decay <= 1e-8 and err_spin <= 1e-8

    # reverse-mode gradients against central differences, 20 random shapes
    rng = rng_for(8, 96)
    worst_grad = 0.0
    for _ in range(20):
        arch = NetArchitecture(
            int(rng.integers(1, 4)), int(rng.integers(1, 4)),
            blocks=int(rng.integers(1, 3)), width=int(rng.integers(2, 6)),
        )
        params = NetParams.init(arch, rng)
        x = rng.uniform(-1.5, 1.5, (4, arch.input_dim))
        y = rng.uniform(-1.5, 1.5, (4, arch.output_dim))
        worst_grad = max(worst_grad, _gradient_gap(arch, params, x, y))
    grad_ok = worst_grad <= 1e-4

    # exact nearest neighbors against a brute-force scan
    pts = rng.uniform(-1.0, 1.0, (60, 2))
    samples = SampleSet("toy", 0.1, pts, pts + 0.01, ["oracle-initial"] * 60)
    knn_ok = True
    for _ in range(10):
        q = rng.uniform(-1.0, 1.0, 2)
        found = knn(samples, q, 10).indices
        brute = np.argsort(np.linalg.norm(pts - q, axis=1), kind="stable")[:10]
        knn_ok = knn_ok and np.array_equal(found, brute)

    # hand-derived reciprocal toy: f(x) = x + 1 against g(x) = x - 1 + eps;
    # eps a power of two keeps every float operation exact
    eps = 2.0**-10
    fwd = shift_stepper(1.0)
    bwd = shift_stepper(-1.0 + eps, direction="backward")
    one = reciprocal_error(fwd, bwd, np.array([0.0]), 1)
    two = reciprocal_error(fwd, bwd, np.array([0.0]), 2)
    trace = reciprocal_trace(fwd, bwd, np.array([0.0]), 2).deviations()
    toy_ok = (
        one == eps * eps
        and two == 5.0 * eps * eps
        and np.array_equal(trace, np.array([4.0 * eps * eps, eps * eps, 0.0]))
    )

    ok = solver_ok and grad_ok and knn_ok and toy_ok
    _accept(
        "08",
        ok,
        f"solver gaps {err_decay:.1e}/{err_spin:.1e} (<= 1e-8), gradient gap "
        f"{worst_grad:.1e} (<= 1e-4), knn exact {knn_ok}, toy proxy exact {toy_ok}",
    )


# ---------------------------------------------------------------------------
# 9: modal-system properties (desk stand-in for the full reproduction)


def test_criterion_09_modal_properties():
    record("09", False, "did not complete")
    system = get_system("burgers")

    # energy never grows along reference trajectories
    rng = rng_for(9, 96)
    worst_rise = -np.inf
    for start in system.domain.sample(rng, 5):
        c = start
        prev = np.linalg.norm(c)
        for _ in range(20):
            c = integrate(system, c, system.delta)
            now = np.linalg.norm(c)
            worst_rise = max(worst_rise, now - prev)
            prev = now
    energy_ok = worst_rise <= 1e-9

    # pure first mode feeds only diffusion back into itself
    e1 = np.zeros(BURGERS_MODES)
    e1[0] = 1.0
    rhs1 = float(burgers_modal_rhs(e1)[0])
    mode_ok = abs(rhs1 + 0.1) <= 1e-12

    # the basis satisfies the endpoints exactly
    ends = np.array([-np.pi, np.pi])
    coeffs = system.domain.sample(rng, 3)
    edge = float(np.max(np.abs([burgers_reconstruct(c, ends) for c in coeffs])))
    edge_ok = edge <= 1e-13

    ok = energy_ok and mode_ok and edge_ok
    _accept(
        "09",
        ok,
        f"worst energy rise {worst_rise:.1e} (<= 1e-9), mode-1 rhs {rhs1:.6f} "
        f"(= -0.1), boundary residue {edge:.1e} (<= 1e-13)",
    )


@extended
@pytest.mark.extended
@pytest.mark.slow
def test_criterion_09_extended_modal_reproduction(tmp_path):
    record("09-extended", False, "did not complete")
    r = run_experiment("table2-burgers", out_dir=str(tmp_path))
    ok = r["samples.final"] <= 19683 and r["error.mean"] <= 0.033
    _accept(
        "09-extended",
        ok,
        f"modal system {r['samples.final']} samples -> modal-l2 "
        f"{r['error.mean']:.5f} (need <= 0.033 with <= 19683)",
    )


# ---------------------------------------------------------------------------
# 10: chaotic system, desk scale: the proxy level falls pass over pass


@pytest.mark.slow
def test_criterion_10_chaotic_desk_progress():
    record("10", False, "did not complete")
    system = get_system("lorenz")
    config = LoopConfig(
        J0=500, batch_per_iter=200, stop_mode="sample-budget", budget=900,
        blocks=1, width=30, epochs=60, sdn_epochs=300, poly_order=2, seed=0,
    )
    result = critical_sampling_loop(system, config)
    levels = [r.mean_recip for r in result.history]
    ok = len(levels) == 3 and levels[0] > levels[1] > levels[2]
    _accept(
        "10",
        ok,
        "mean reciprocal by pass: "
        + " -> ".join(f"{v:.3e}" for v in levels)
        + " (need strictly decreasing over 3 passes)",
    )


@extended
@pytest.mark.extended
@pytest.mark.slow
def test_criterion_10_extended_chaotic_relative_error(tmp_path):
    record("10-extended", False, "did not complete")
    r = run_experiment("table6-mno-protocol", out_dir=str(tmp_path))
    ok = r["samples.final"] <= 5000 and r["relative.per_step"] <= 1.2e-3
    _accept(
        "10-extended",
        ok,
        f"chaotic system {r['samples.final']} samples -> per-step relative l2 "
        f"{r['relative.per_step']:.6f} (need <= 1.2e-3 with <= 5000)",
    )


# ---------------------------------------------------------------------------
# 11: engineering invariants at tiny scale


TINY = dict(
    J0=25, batch_per_iter=5, stop_mode="sample-budget", budget=35,
    recip_steps=3, epochs=15, sdn_epochs=40, consistency_points=40,
    augment_factor=4, width=10, seed=3,
)


def _samples_identical(a: SampleSet, b: SampleSet) -> bool:
    return (
        np.array_equal(a.u0, b.u0)
        and np.array_equal(a.u1, b.u1)
        and tuple(a.provenance) == tuple(b.provenance)
    )


def test_criterion_11_engineering_invariants(tmp_path):
    record("11", False, "did not complete")
    system = get_system("pendulum")
    config = LoopConfig(**TINY)

    # determinism: two identical runs agree bitwise
    a = critical_sampling_loop(system, config)
    b = critical_sampling_loop(system, config)
    determinism_ok = histories_equal(a.history, b.history) and _samples_identical(
        a.samples, b.samples
    ) and np.array_equal(a.forward.params.flat, b.forward.params.flat)

    # checkpoint-resume: replaying from the first checkpoint matches end state
    states = []
    critical_sampling_loop(system, config, checkpoint_cb=states.append)
    resumed = critical_sampling_loop(system, config, resume_state=states[0])
    resume_ok = histories_equal(resumed.history, a.history) and _samples_identical(
        resumed.samples, a.samples
    )

    # serialization round-trips reproduce stored models and data bitwise
    probe = system.domain.sample(rng_for(11, 96), 16)
    fwd_path = tmp_path / "fwd.csv"
    save_evolution(fwd_path, a.forward)
    fwd = load_evolution(fwd_path)
    sdn_path = tmp_path / "sdn.csv"
    save_spatial(sdn_path, a.spatial)
    sdn = load_spatial(sdn_path)
    smp_path = tmp_path / "smp.csv"
    a.samples.save(smp_path)
    smp = SampleSet.load(smp_path)
    his_path = tmp_path / "his.csv"
    save_history(his_path, a.history)
    his = load_history(his_path)
    serial_ok = (
        np.array_equal(fwd.predict(probe), a.forward.predict(probe))
        and np.array_equal(
            sdn_predict(sdn, smp, probe[0]), sdn_predict(a.spatial, a.samples, probe[0])
        )
        and _samples_identical(smp, a.samples)
        and histories_equal(his, a.history)
    )

    # CLI run reproduces the API run through the console entry point
    out = tmp_path / "cli"
    argv = ["loop", "--out", str(out), "--seed", str(TINY["seed"])]
    for key, value in TINY.items():
        if key != "seed":
            argv += ["--set", f"sampler.{key}={value}"]
    code = cli.main(argv)
    cli_fwd = load_evolution(out / "forward.csv")
    cli_ok = (
        code == 0
        and histories_equal(load_history(out / "history.csv"), a.history)
        and _samples_identical(SampleSet.load(out / "samples.csv"), a.samples)
        and np.array_equal(cli_fwd.params.flat, a.forward.params.flat)
    )

    ok = determinism_ok and resume_ok and serial_ok and cli_ok
    _accept(
        "11",
        ok,
        f"determinism {determinism_ok}, resume {resume_ok}, "
        f"serialization {serial_ok}, cli parity {cli_ok}",
    )
