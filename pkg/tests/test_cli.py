"""Command-line behavior: configuration, subcommands, resume, parity."""

import os
import subprocess
import sys

import numpy as np
import pytest

from critsamp import cli
from critsamp._util import get_threads
from critsamp.dynsys import SampleSet, generate_initial_set, get_system
from critsamp.evalbench import load_report, loop_config_for, protocol_for, run_experiment, trajectory_mse
from critsamp.evonet import load_evolution
from critsamp.sampler import critical_sampling_loop, histories_equal, load_history

TINY = [
    "--set", "sampler.J0=25",
    "--set", "sampler.batch_per_iter=5",
    "--set", "sampler.budget=35",
    "--set", "sampler.recip_steps=3",
    "--set", "sampler.epochs=15",
    "--set", "sampler.sdn_epochs=40",
    "--set", "sampler.consistency_points=40",
    "--set", "sampler.augment_factor=4",
    "--set", "sampler.width=10",
]

TINY_KW = dict(J0=25, batch_per_iter=5, budget=35, recip_steps=3, epochs=15,
               sdn_epochs=40, consistency_points=40, augment_factor=4, width=10)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# configuration resolution


def test_defaults_resolve():
    cfg = cli.resolve_config()
    assert cfg["run.system"] == "pendulum"
    assert cfg["run.seed"] == 0
    assert cfg["sampler.J0"] is None
    assert cfg["eval.n_trajectories"] == 50


def test_precedence_file_then_set_then_flag(tmp_path):
    f = tmp_path / "conf.txt"
    f.write_text("run.seed = 5\nsampler.J0 = 10\nrun.system = nonlinear\n")
    cfg = cli.resolve_config(str(f))
    assert (cfg["run.seed"], cfg["sampler.J0"], cfg["run.system"]) == (5, 10, "nonlinear")
    cfg = cli.resolve_config(str(f), sets=["run.seed=7"])
    assert cfg["run.seed"] == 7
    cfg = cli.resolve_config(str(f), sets=["run.seed=7"], seed=9)
    assert cfg["run.seed"] == 9
    assert cfg["sampler.J0"] == 10


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(cli.ConfigError, match="unknown configuration key"):
        cli.resolve_config(sets=["nope.key=1"])
    f = tmp_path / "conf.txt"
    f.write_text("sampler.bogus = 3\n")
    with pytest.raises(cli.ConfigError, match="sampler.bogus"):
        cli.resolve_config(str(f))
    with pytest.raises(cli.ConfigError, match="KEY=VALUE"):
        cli.resolve_config(sets=["justakey"])


def test_bad_value_reports_key():
    with pytest.raises(cli.ConfigError, match="run.seed"):
        cli.resolve_config(sets=["run.seed=abc"])


def test_config_roundtrip(tmp_path):
    cfg = cli.resolve_config(sets=[
        "sampler.J0=40", "sampler.lr_initial=0.01", "sampler.warm_start=true",
        "run.system=lorenz", "eval.horizon=2.5", "field.with_truth=true",
        "experiment.name=table2-lorenz", "experiment.budget=600",
    ], seed=11, threads=2)
    path = tmp_path / "resolved.txt"
    cli.save_config(str(path), cfg)
    back = cli.resolve_config(str(path))
    assert back.values == cfg.values


def test_experiment_namespace_is_open():
    cfg = cli.resolve_config(sets=["experiment.anything=1,2,3"])
    assert cfg.extras() == {"experiment.anything": "1,2,3"}


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_deterministic_set(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["generate", "--seed", "3", "--set", "sampler.J0=30"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert read_bytes(a / "samples.csv") == read_bytes(b / "samples.csv")
    loaded = SampleSet.load(str(a / "samples.csv"))
    assert len(loaded) == 30
    direct = generate_initial_set(get_system("pendulum"), 30, 3)
    assert np.array_equal(loaded.u0, direct.u0)
    assert np.array_equal(loaded.u1, direct.u1)


def test_console_script_runs(tmp_path):
    out = tmp_path / "gen"
    proc = subprocess.run(
        [sys.executable, "-m", "critsamp.cli", "generate", "--out", str(out),
         "--seed", "3", "--set", "sampler.J0=12"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert len(SampleSet.load(str(out / "samples.csv"))) == 12


# ---------------------------------------------------------------------------
# loop


@pytest.fixture(scope="module")
def loop_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_loop") / "run"
    code = cli.main(["loop", "--out", str(out), "--seed", "3"] + TINY)
    assert code == 0
    return out


def test_loop_artifacts_and_state(loop_dir):
    for name in ("config.txt", "samples.csv", "history.csv", "forward.csv",
                 "backward.csv", "spatial.csv", "field.csv", "state.txt"):
        assert (loop_dir / name).exists()
    state = load_report(str(loop_dir / "state.txt"))
    assert state["finished"] == "true"
    assert state["stop_reason"] == "sample-budget-exhausted"
    assert len(SampleSet.load(str(loop_dir / "samples.csv"))) == 35


def test_loop_matches_direct_api(loop_dir, tmp_path):
    result = critical_sampling_loop(
        get_system("pendulum"), loop_config_for("pendulum", seed=3, **TINY_KW))
    # wall-time column aside, the persisted history matches the API run bitwise
    assert histories_equal(load_history(str(loop_dir / "history.csv")), result.history)
    sref = tmp_path / "samples.csv"
    result.samples.save(str(sref))
    assert read_bytes(loop_dir / "samples.csv") == read_bytes(sref)
    cli_fwd = load_evolution(str(loop_dir / "forward.csv"))
    assert np.array_equal(
        np.concatenate([w.ravel() for w in cli_fwd.params.weights]),
        np.concatenate([w.ravel() for w in result.forward.params.weights]))


def test_budget_equal_to_initial_set_stops_immediately(tmp_path):
    out = tmp_path / "flat"
    args = ["loop", "--out", str(out), "--seed", "3"] + TINY
    args[args.index("sampler.budget=35")] = "sampler.budget=25"
    assert cli.main(args) == 0
    history = load_history(str(out / "history.csv"))
    assert len(history) == 1
    assert len(SampleSet.load(str(out / "samples.csv"))) == 25


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, capsys):
    out = tmp_path / "div"
    code = cli.main(["loop", "--out", str(out), "--seed", "3"]
                    + TINY + ["--set", "sampler.lr_initial=1e200"])
    assert code == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
    state = load_report(str(out / "state.txt"))
    assert state["finished"] == "false"
    assert state["stop_reason"] == "diverged"
    # the checkpoint survives for inspection
    assert (out / "samples.csv").exists()


# ---------------------------------------------------------------------------
# resume


def test_resume_after_interrupt_matches_uninterrupted(loop_dir, tmp_path, monkeypatch):
    broken = tmp_path / "broken"
    real_writer = cli.checkpoint_writer

    def interrupting_writer(out_dir):
        write = real_writer(out_dir)
        calls = {"n": 0}

        def wrapped(state):
            write(state)
            calls["n"] += 1
            if calls["n"] == 2:
                raise KeyboardInterrupt
        return wrapped

    monkeypatch.setattr(cli, "checkpoint_writer", interrupting_writer)
    with pytest.raises(KeyboardInterrupt):
        cli.main(["loop", "--out", str(broken), "--seed", "3"] + TINY)
    monkeypatch.undo()

    state = load_report(str(broken / "state.txt"))
    assert (state["finished"], state["iteration"]) == ("false", "2")
    assert cli.main(["resume", "--out", str(broken)]) == 0
    assert histories_equal(load_history(str(broken / "history.csv")),
                           load_history(str(loop_dir / "history.csv")))
    assert read_bytes(broken / "samples.csv") == read_bytes(loop_dir / "samples.csv")
    assert load_report(str(broken / "state.txt"))["finished"] == "true"


def test_warm_start_resume_matches_uninterrupted(tmp_path, monkeypatch):
    # warm start chains passes through the model parameters; the checkpointed
    # models must feed the first resumed pass for the replay to stay exact
    args = TINY + ["--set", "sampler.warm_start=true"]
    whole = tmp_path / "whole"
    assert cli.main(["loop", "--out", str(whole), "--seed", "3"] + args) == 0

    broken = tmp_path / "broken"
    real_writer = cli.checkpoint_writer

    def interrupting_writer(out_dir):
        write = real_writer(out_dir)
        calls = {"n": 0}

        def wrapped(state):
            write(state)
            calls["n"] += 1
            if calls["n"] == 2:
                raise KeyboardInterrupt
        return wrapped

    monkeypatch.setattr(cli, "checkpoint_writer", interrupting_writer)
    with pytest.raises(KeyboardInterrupt):
        cli.main(["loop", "--out", str(broken), "--seed", "3"] + args)
    monkeypatch.undo()
    assert cli.main(["resume", "--out", str(broken)]) == 0
    assert histories_equal(load_history(str(broken / "history.csv")),
                           load_history(str(whole / "history.csv")))
    assert read_bytes(broken / "forward.csv") == read_bytes(whole / "forward.csv")


def test_resume_of_finished_run_is_a_no_op(loop_dir, capsys):
    before = read_bytes(loop_dir / "history.csv")
    assert cli.main(["resume", "--out", str(loop_dir)]) == 0
    assert "already finished" in capsys.readouterr().out
    assert read_bytes(loop_dir / "history.csv") == before


def test_resume_with_changed_config_is_rejected(loop_dir, capsys):
    code = cli.main(["resume", "--out", str(loop_dir), "--set", "sampler.J0=999"])
    assert code == cli.EXIT_MISMATCH
    assert "sampler.J0" in capsys.readouterr().err


def test_resume_allows_matching_explicit_config(loop_dir):
    # restating the stored values is not a mismatch
    assert cli.main(["resume", "--out", str(loop_dir), "--seed", "3"] + TINY) == 0


def test_resume_ignores_thread_count_changes(loop_dir):
    assert cli.main(["resume", "--out", str(loop_dir), "--threads", "2"]) == 0


def test_resume_requires_checkpoint(tmp_path, capsys):
    code = cli.main(["resume", "--out", str(tmp_path / "empty")])
    assert code == cli.EXIT_CONFIG
    assert "missing checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval / field / bounds on the loop directory


def test_eval_matches_direct_invocation(loop_dir, capsys):
    args = ["eval", "--out", str(loop_dir), "--seed", "3",
            "--set", "eval.n_trajectories=6", "--set", "eval.horizon=1.0"]
    assert cli.main(args) == 0
    capsys.readouterr()
    report = load_report(str(loop_dir / "eval_report.txt"))
    model = load_evolution(str(loop_dir / "forward.csv"))
    system = get_system("pendulum")
    protocol = protocol_for("pendulum", horizon=1.0, n_trajectories=6, seed=3)
    exclude = SampleSet.load(str(loop_dir / "samples.csv")).u0
    direct = trajectory_mse(model, system, protocol, exclude=exclude)
    assert float(report["eval.mean"]) == direct.mean
    assert float(report["eval.std"]) == direct.std
    assert report["eval.n_trajectories"] == "6"


def test_eval_without_model_is_config_error(tmp_path, capsys):
    code = cli.main(["eval", "--out", str(tmp_path / "nothing")])
    assert code == cli.EXIT_CONFIG
    assert "run the loop first" in capsys.readouterr().err


def test_eval_rejects_wrong_system(loop_dir, capsys):
    code = cli.main(["eval", "--out", str(loop_dir), "--set", "run.system=lorenz"])
    assert code == cli.EXIT_CONFIG
    assert "pendulum" in capsys.readouterr().err


def test_field_row_count_is_candidate_count(loop_dir):
    assert cli.main(["field", "--out", str(loop_dir),
                     "--set", "field.side=6", "--set", "field.steps=3"]) == 0
    rows = np.loadtxt(str(loop_dir / "field.csv"), delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape[0] == 36


def test_bounds_command_writes_reports(loop_dir):
    assert cli.main(["bounds", "--out", str(loop_dir), "--seed", "3",
                     "--set", "bounds.window=3", "--set", "bounds.n_grid=400",
                     "--set", "bounds.n_lipschitz=100", "--set", "bounds.n_starts=30"]) == 0
    report = load_report(str(loop_dir / "bounds_report.txt"))
    for label in ("forward", "backward", "reciprocal"):
        assert (loop_dir / f"bounds_{label}.csv").exists()
        assert int(report[f"{label}.eligible"]) >= 1
        assert report[f"{label}.all_satisfied"] in ("true", "false")
    assert float(report["params.lipschitz"]) > 0


# ---------------------------------------------------------------------------
# experiment


def test_experiment_typo_lists_valid_names(tmp_path, capsys):
    code = cli.main(["experiment", "--out", str(tmp_path / "x"),
                     "--set", "experiment.name=tabel2-pendulum"])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "table2-pendulum" in err and "bound-study" in err


def test_experiment_requires_name(tmp_path, capsys):
    code = cli.main(["experiment", "--out", str(tmp_path / "x")])
    assert code == cli.EXIT_CONFIG
    assert "experiment.name" in capsys.readouterr().err


def test_experiment_rejects_unknown_override(tmp_path, capsys):
    code = cli.main(["experiment", "--out", str(tmp_path / "x"),
                     "--set", "experiment.name=table2-pendulum",
                     "--set", "experiment.bogus=1"])
    assert code == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_experiment_matches_direct_run(tmp_path, capsys):
    out = tmp_path / "cli_exp"
    overrides = ["--set", "experiment.name=table2-pendulum",
                 "--set", "experiment.n_trajectories=6",
                 "--set", "experiment.horizon=1.0"]
    for key, value in TINY_KW.items():
        overrides += ["--set", f"experiment.{key}={value}"]
    assert cli.main(["experiment", "--out", str(out), "--seed", "3"] + overrides) == 0
    capsys.readouterr()
    cli_report = load_report(str(out / "report.txt"))
    direct = run_experiment(
        "table2-pendulum",
        dict(TINY_KW, n_trajectories=6, horizon=1.0, seed=3),
        out_dir=str(tmp_path / "direct_exp"),
    )
    direct_report = load_report(str(tmp_path / "direct_exp" / "report.txt"))
    strip = lambda rep: {k: v for k, v in rep.items() if not k.startswith("timing.")}
    assert strip(cli_report) == strip(direct_report)


# ---------------------------------------------------------------------------
# threads and output-root fallback


def test_threads_flag_sets_worker_pool(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "g"), "--threads", "3",
                     "--set", "sampler.J0=5"]) == 0
    assert get_threads() == 3
    stored = dict(cli.load_config(str(tmp_path / "g" / "config.txt")))
    assert stored["run.threads"] == "3"
    cli.main(["generate", "--out", str(tmp_path / "g2"), "--set", "sampler.J0=5"])
    assert get_threads() == 1


def test_output_root_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["generate", "--set", "sampler.J0=5"]) == 0
    assert (tmp_path / "root" / "generate" / "samples.csv").exists()


def test_missing_output_root_is_config_error(monkeypatch, capsys):
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)
    code = cli.main(["generate", "--set", "sampler.J0=5"])
    assert code == cli.EXIT_CONFIG
    assert cli.OUTPUT_ROOT_ENV in capsys.readouterr().err


def test_usage_errors_exit_config(capsys):
    assert cli.main([]) == cli.EXIT_CONFIG
    assert cli.main(["no-such-command"]) == cli.EXIT_CONFIG
    capsys.readouterr()
