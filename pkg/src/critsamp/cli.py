"""Command-line front end: configuration, orchestration, persistence, export.

One run owns one output directory: the resolved configuration is written
beside every artifact, the collection loop checkpoints each pass (sample
set, history, the pass's models, and the pass index that pins the derived
random streams), and every file is a columnar text format another tool can
parse back.  Configuration values resolve in a fixed order: schema defaults,
then the ``--config`` file, then ``--set`` pairs, then the ``--out``,
``--seed``, and ``--threads`` shorthands.

Exit codes: 0 success, 2 configuration problems (including usage errors),
3 training divergence, 4 resume/checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

from ._util import STREAM_BOUNDS, fmt, rng_for, set_threads
from .bounds import (
    calibrate_bounds,
    check_backward_bounds,
    check_forward_bounds,
    check_reciprocal_bounds,
    save_bound_report,
)
from .dynsys import SampleSet, generate_initial_set, get_system
from .evonet import load_evolution, save_evolution
from .sampler import (
    LoopDiverged,
    LoopState,
    critical_sampling_loop,
    error_field,
    load_history,
    save_field,
    save_history,
)
from .spatial import save_spatial
from .tensornet import TrainingDiverged
from .evalbench import (
    PRESETS,
    EvalProtocol,
    experiment_defaults,
    experiment_names,
    lattice,
    load_report,
    loop_config_for,
    pde_l2_error,
    protocol_for,
    relative_l2,
    run_experiment,
    save_report,
    trajectory_mse,
)

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "EXIT_MISMATCH",
    "OUTPUT_ROOT_ENV",
    "ConfigError",
    "RunConfig",
    "resolve_config",
    "save_config",
    "load_config",
    "checkpoint_writer",
    "cmd_generate",
    "cmd_loop",
    "cmd_eval",
    "cmd_field",
    "cmd_bounds",
    "cmd_experiment",
    "main",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4

OUTPUT_ROOT_ENV = "CRITSAMP_OUT"

COMMANDS = ("generate", "loop", "eval", "field", "bounds", "experiment", "resume")


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int(raw: str) -> int:
    return int(raw.strip())


def _parse_float(raw: str) -> float:
    return float(raw.strip())


def _parse_str(raw: str) -> str:
    return raw.strip()


def _optional(parser):
    def parse(raw: str):
        if raw.strip().lower() in ("", "none"):
            return None
        return parser(raw)

    return parse


# collection-loop fields that are not plain integers
_SAMPLER_FLOAT = (
    "suppression_fraction", "standoff_fraction", "threshold", "lr_initial",
    "lr_final", "consistency_weight", "sdn_lr_initial",
)
_SAMPLER_STR = ("stop_mode",)
_SAMPLER_BOOL = ("warm_start",)
_SAMPLER_FIELDS = (
    "J0", "batch_per_iter", "recip_steps", "suppression_fraction",
    "standoff_fraction", "stop_mode",
    "budget", "threshold", "max_iterations", "seed", "warm_start", "epochs",
    "batch_size", "lr_initial", "lr_final", "consistency_weight",
    "consistency_points", "blocks", "width", "neighbors", "poly_order",
    "sdn_epochs", "sdn_lr_initial", "augment_factor",
)


def _schema() -> dict:
    schema = {
        "run.system": (_parse_str, "pendulum"),
        "run.out": (_optional(_parse_str), None),
        "run.seed": (_parse_int, 0),
        "run.threads": (_parse_int, 1),
        "eval.horizon": (_optional(_parse_float), None),
        "eval.n_trajectories": (_parse_int, 50),
        "eval.metric": (_optional(_parse_str), None),
        "eval.confined": (_optional(_parse_bool), None),
        "eval.seed": (_optional(_parse_int), None),
        "eval.n_states": (_parse_int, 100),
        "eval.per_second_steps": (_parse_int, 20),
        "field.side": (_parse_int, 20),
        "field.steps": (_parse_int, 5),
        "field.with_truth": (_parse_bool, False),
        "bounds.window": (_parse_int, 5),
        "bounds.n_grid": (_parse_int, 10_000),
        "bounds.n_lipschitz": (_parse_int, 1000),
        "bounds.n_starts": (_parse_int, 100),
        "experiment.name": (_optional(_parse_str), None),
    }
    for name in _SAMPLER_FIELDS:
        if name in _SAMPLER_FLOAT:
            parser = _parse_float
        elif name in _SAMPLER_STR:
            parser = _parse_str
        elif name in _SAMPLER_BOOL:
            parser = _parse_bool
        else:
            parser = _parse_int
        # None means "use the system preset / loop default"
        schema[f"sampler.{name}"] = (_optional(parser), None)
    return schema


CONFIG_SCHEMA = _schema()


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run setup: every schema key present and typed.

    Experiment overrides (``experiment.*`` beyond ``experiment.name``) ride
    along as raw strings and are coerced against the chosen study's
    registered defaults when the experiment runs.
    """

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def extras(self) -> dict:
        """The free-form experiment override entries, still as strings."""
        return {
            k: v
            for k, v in self.values.items()
            if k.startswith("experiment.") and k != "experiment.name"
        }

    def with_value(self, key: str, value) -> "RunConfig":
        updated = dict(self.values)
        updated[key] = value
        return RunConfig(updated)


def resolve_config(config_file=None, sets=(), out=None, seed=None, threads=None) -> RunConfig:
    """Layer the configuration sources into one typed mapping.

    Order: schema defaults, then the file, then ``--set`` pairs in the order
    given, then the shorthand flags.  Unknown keys are rejected (the free
    ``experiment.*`` namespace excepted, validated later against the study).
    """
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}

    def apply(key: str, raw: str, origin: str) -> None:
        key = key.strip()
        if key in CONFIG_SCHEMA:
            parser = CONFIG_SCHEMA[key][0]
            try:
                values[key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key} ({origin}): {exc}") from None
        elif key.startswith("experiment."):
            values[key] = raw.strip()
        else:
            raise ConfigError(f"unknown configuration key {key!r} ({origin})")

    if config_file is not None:
        try:
            pairs = load_config(config_file)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        for key, raw in pairs:
            apply(key, raw, f"file {config_file}")
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        apply(key, raw, "--set")
    if out is not None:
        values["run.out"] = out
    if seed is not None:
        values["run.seed"] = int(seed)
    if threads is not None:
        values["run.threads"] = int(threads)
    return RunConfig(values)


def _format_config_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt(v)
    return str(v)


def save_config(path, config: RunConfig) -> None:
    """Resolved configuration as sorted key = value lines."""
    with open(path, "w") as fh:
        for key in sorted(config.values):
            fh.write(f"{key} = {_format_config_value(config.values[key])}\n")


def load_config(path) -> list:
    """Key/value pairs from a config file, values still unparsed."""
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ValueError(f"malformed config line {line!r}")
            pairs.append((key.strip(), raw.strip()))
    return pairs


# ---------------------------------------------------------------------------
# resolution helpers

def _system(config: RunConfig):
    try:
        return get_system(config["run.system"])
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None


def _loop_settings(config: RunConfig) -> dict:
    settings = {}
    for name in _SAMPLER_FIELDS:
        value = config[f"sampler.{name}"]
        if value is not None:
            settings[name] = value
    settings.setdefault("seed", config["run.seed"])
    return settings


def _loop_config(config: RunConfig):
    try:
        return loop_config_for(config["run.system"], **_loop_settings(config))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _protocol(config: RunConfig) -> EvalProtocol:
    name = config["run.system"]
    overrides = {"n_trajectories": config["eval.n_trajectories"]}
    if config["eval.horizon"] is not None:
        overrides["horizon"] = config["eval.horizon"]
    if config["eval.metric"] is not None:
        overrides["metric"] = config["eval.metric"]
    if config["eval.confined"] is not None:
        overrides["confined"] = config["eval.confined"]
    seed = config["eval.seed"]
    overrides["seed"] = config["run.seed"] if seed is None else seed
    try:
        return protocol_for(name, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _output_dir(config: RunConfig, command: str) -> str:
    """Explicit --out/run.out, else a per-command directory under the
    environment root.  Analysis commands default to the loop directory,
    since that is where the checkpoints they read live."""
    out = config["run.out"]
    if out:
        return out
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        slot = command if command in ("generate", "loop", "experiment") else "loop"
        return os.path.join(root, slot)
    raise ConfigError(
        f"no output directory: pass --out or set {OUTPUT_ROOT_ENV}"
    )


def _ensure_out(config: RunConfig, command: str):
    """Create the run directory and persist the resolved config inside it."""
    out = _output_dir(config, command)
    os.makedirs(out, exist_ok=True)
    stamped = config.with_value("run.out", out)
    save_config(os.path.join(out, "config.txt"), stamped)
    return out, stamped


def _load_model(out: str, name: str):
    path = os.path.join(out, f"{name}.csv")
    if not os.path.exists(path):
        raise ConfigError(f"missing checkpoint file {path}; run the loop first")
    return load_evolution(path)


# ---------------------------------------------------------------------------
# loop persistence

def checkpoint_writer(out_dir: str):
    """Per-pass persistence: sample set, history, models, and the pass index.

    The pass index pins the derived random streams, so together with the
    stored configuration the files on disk are a complete resume point.
    """

    def write(state: LoopState) -> None:
        state.samples.save(os.path.join(out_dir, "samples.csv"))
        save_history(os.path.join(out_dir, "history.csv"), state.history)
        if state.forward is not None:
            save_evolution(os.path.join(out_dir, "forward.csv"), state.forward)
            save_evolution(os.path.join(out_dir, "backward.csv"), state.backward)
            save_spatial(os.path.join(out_dir, "spatial.csv"), state.spatial)
        save_report(os.path.join(out_dir, "state.txt"), {
            "iteration": state.iteration,
            "finished": False,
            "stop_reason": "-",
        })

    return write


def _finish_loop(out: str, result) -> None:
    result.samples.save(os.path.join(out, "samples.csv"))
    save_history(os.path.join(out, "history.csv"), result.history)
    save_evolution(os.path.join(out, "forward.csv"), result.forward)
    save_evolution(os.path.join(out, "backward.csv"), result.backward)
    save_spatial(os.path.join(out, "spatial.csv"), result.spatial)
    save_field(os.path.join(out, "field.csv"), result.field)
    save_report(os.path.join(out, "state.txt"), {
        "iteration": len(result.history),
        "finished": True,
        "stop_reason": result.stop_reason,
    })


def _run_loop_to_disk(system, loop_cfg, out: str, resume_state=None) -> int:
    try:
        result = critical_sampling_loop(
            system, loop_cfg,
            checkpoint_cb=checkpoint_writer(out),
            resume_state=resume_state,
        )
    except LoopDiverged as exc:
        state = exc.state
        state.samples.save(os.path.join(out, "samples.csv"))
        save_history(os.path.join(out, "history.csv"), state.history)
        save_report(os.path.join(out, "state.txt"), {
            "iteration": state.iteration,
            "finished": False,
            "stop_reason": "diverged",
        })
        print(f"error: {exc}", file=sys.stderr)
        print(f"checkpoint kept in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    _finish_loop(out, result)
    print(
        f"loop done: {result.samples.oracle_count} samples over "
        f"{len(result.history)} passes ({result.stop_reason}); artifacts in {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands

def cmd_generate(config: RunConfig) -> int:
    system = _system(config)
    j0 = config["sampler.J0"]
    if j0 is None:
        j0 = PRESETS[system.name]["J0"]
    seed = config["sampler.seed"]
    if seed is None:
        seed = config["run.seed"]
    samples = generate_initial_set(system, int(j0), int(seed))
    out, _ = _ensure_out(config, "generate")
    samples.save(os.path.join(out, "samples.csv"))
    print(f"wrote {len(samples)} pairs to {os.path.join(out, 'samples.csv')}")
    return EXIT_OK


def cmd_loop(config: RunConfig) -> int:
    system = _system(config)
    loop_cfg = _loop_config(config)
    out, _ = _ensure_out(config, "loop")
    return _run_loop_to_disk(system, loop_cfg, out)


def cmd_resume(ns) -> int:
    """Continue an interrupted loop run from its on-disk checkpoint."""
    probe = resolve_config(ns.config, ns.sets, out=ns.out, seed=ns.seed, threads=ns.threads)
    out = _output_dir(probe, "loop")
    config_path = os.path.join(out, "config.txt")
    state_path = os.path.join(out, "state.txt")
    for path in (config_path, state_path):
        if not os.path.exists(path):
            raise ConfigError(f"missing checkpoint file {path}")
    stored = resolve_config(config_path)
    if ns.config or ns.sets or ns.seed is not None:
        given = dict(probe.values)
        kept = dict(stored.values)
        # the target directory and worker count may differ without touching
        # what the run computes
        for skip in ("run.out", "run.threads"):
            given.pop(skip), kept.pop(skip)
        if given != kept:
            diff = sorted(k for k in set(given) | set(kept) if given.get(k) != kept.get(k))
            print(
                f"error: resume configuration differs from the checkpoint on {diff}",
                file=sys.stderr,
            )
            return EXIT_MISMATCH
    if ns.threads is not None:
        set_threads(ns.threads)
    else:
        set_threads(stored["run.threads"])
    state = load_report(state_path)
    if state.get("finished") == "true":
        print(f"run in {out} already finished ({state.get('stop_reason')})")
        return EXIT_OK
    loaded = SampleSet.load(os.path.join(out, "samples.csv"))
    # the sample file does not carry the pass counter; at a checkpoint it
    # always equals the stored next-pass index
    samples = SampleSet(loaded.system, loaded.delta, loaded.u0, loaded.u1,
                        loaded.provenance, iteration=int(state["iteration"]))
    history = load_history(os.path.join(out, "history.csv"))
    models = {}
    # checkpointed models feed the warm-start chain; absent after divergence
    if os.path.exists(os.path.join(out, "forward.csv")):
        models = {
            "forward": load_evolution(os.path.join(out, "forward.csv")),
            "backward": load_evolution(os.path.join(out, "backward.csv")),
        }
    resume_state = LoopState(samples, history, int(state["iteration"]), **models)
    system = _system(stored)
    loop_cfg = _loop_config(stored)
    return _run_loop_to_disk(system, loop_cfg, out, resume_state=resume_state)


def cmd_eval(config: RunConfig) -> int:
    system = _system(config)
    out = _output_dir(config, "eval")
    model = _load_model(out, "forward")
    if model.system != system.name:
        raise ConfigError(
            f"checkpoint holds a {model.system!r} model, config says {system.name!r}"
        )
    samples_path = os.path.join(out, "samples.csv")
    exclude = SampleSet.load(samples_path).u0 if os.path.exists(samples_path) else None
    metric = config["eval.metric"] or PRESETS[system.name]["metric"]
    report = {"eval.metric": metric, "eval.system": system.name}
    if metric in ("relative-l2-step", "relative-l2-second"):
        seed = config["eval.seed"]
        rel = relative_l2(
            model,
            system,
            per_second_steps=config["eval.per_second_steps"],
            n_states=config["eval.n_states"],
            seed=config["run.seed"] if seed is None else seed,
            exclude=exclude,
        )
        report.update({
            "relative.per_step": rel.per_step,
            "relative.per_second": rel.per_second,
            "relative.n_states": rel.n_states,
            "relative.diverged": rel.diverged,
        })
        headline = rel.per_step if metric == "relative-l2-step" else rel.per_second
    else:
        protocol = _protocol(config)
        if metric == "modal-l2":
            res = pde_l2_error(model, protocol, exclude=exclude)
        else:
            res = trajectory_mse(model, system, protocol, exclude=exclude)
        report.update({
            "eval.mean": res.mean,
            "eval.std": res.std,
            "eval.pooled_mean": res.pooled_mean,
            "eval.pooled_std": res.pooled_std,
            "eval.diverged": res.diverged,
            "eval.n_trajectories": protocol.n_trajectories,
            "eval.horizon": protocol.horizon,
            "eval.seed": protocol.seed,
        })
        headline = res.mean
    save_report(os.path.join(out, "eval_report.txt"), report)
    print(f"{metric} = {fmt(headline)} ({os.path.join(out, 'eval_report.txt')})")
    return EXIT_OK


def cmd_field(config: RunConfig) -> int:
    system = _system(config)
    out = _output_dir(config, "field")
    fwd = _load_model(out, "forward")
    bwd = _load_model(out, "backward")
    grid = lattice(system.domain, config["field.side"])
    with_truth = config["field.with_truth"]
    field = error_field(
        fwd, bwd, grid,
        steps=config["field.steps"],
        with_truth=with_truth,
        system=system if with_truth else None,
    )
    save_field(os.path.join(out, "field.csv"), field)
    print(
        f"scored {len(field)} candidates ({int(field.divergent.sum())} divergent) "
        f"to {os.path.join(out, 'field.csv')}"
    )
    return EXIT_OK


def cmd_bounds(config: RunConfig) -> int:
    system = _system(config)
    out = _output_dir(config, "bounds")
    fwd = _load_model(out, "forward")
    bwd = _load_model(out, "backward")
    seed = config["run.seed"]
    window = config["bounds.window"]
    params, _ = calibrate_bounds(
        fwd, bwd, system,
        window=window,
        n_grid=config["bounds.n_grid"],
        n_lipschitz=config["bounds.n_lipschitz"],
        seed=seed,
    )
    starts = system.domain.sample(rng_for(seed, STREAM_BOUNDS, 3), config["bounds.n_starts"])
    report = {
        "bounds.window": window,
        "params.lipschitz": params.lipschitz,
        "params.eps_forward": params.eps_forward,
        "params.eps_backward": params.eps_backward,
    }
    checkers = {
        "forward": lambda: check_forward_bounds(fwd, system, params, starts),
        "backward": lambda: check_backward_bounds(bwd, system, params, starts),
        "reciprocal": lambda: check_reciprocal_bounds(fwd, bwd, system, params, starts),
    }
    for label, run in checkers.items():
        try:
            checks, eligible = run()
        except ValueError as exc:
            raise ConfigError(f"{label} check failed: {exc}") from None
        save_bound_report(os.path.join(out, f"bounds_{label}.csv"), checks)
        report[f"{label}.eligible"] = int(eligible.sum())
        report[f"{label}.all_satisfied"] = all(c.satisfied for c in checks)
    save_report(os.path.join(out, "bounds_report.txt"), report)
    print(
        "bound checks: "
        + ", ".join(
            f"{label} {'ok' if report[f'{label}.all_satisfied'] else 'VIOLATED'}"
            for label in checkers
        )
        + f" ({os.path.join(out, 'bounds_report.txt')})"
    )
    return EXIT_OK


def _coerce_override(raw: str, default):
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        parts = [p for p in raw.split(",") if p.strip() != ""]
        return tuple(elem(p) for p in parts)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _experiment_overrides(config: RunConfig, name: str) -> dict:
    defaults = experiment_defaults(name)
    overrides = {}
    for key, raw in config.extras().items():
        short = key[len("experiment."):]
        if short not in defaults:
            raise ConfigError(
                f"unknown experiment override {short!r}; valid keys are {sorted(defaults)}"
            )
        try:
            overrides[short] = _coerce_override(raw, defaults[short])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if "seed" in defaults and "seed" not in overrides:
        overrides["seed"] = config["run.seed"]
    return overrides


def cmd_experiment(config: RunConfig) -> int:
    name = config["experiment.name"]
    if name is None:
        raise ConfigError(
            "no experiment selected; set experiment.name to one of "
            + ", ".join(experiment_names())
        )
    if name not in experiment_names():
        raise ConfigError(
            f"unknown experiment {name!r}; valid names are {', '.join(experiment_names())}"
        )
    overrides = _experiment_overrides(config, name)
    out, _ = _ensure_out(config, "experiment")
    report = run_experiment(name, overrides, out_dir=out)
    shown = [k for k in sorted(report) if k.startswith(("error.", "corr.min", "sweep.", "relative.per"))]
    print(f"experiment {name} done; report in {os.path.join(out, 'report.txt')}")
    for key in shown[:8]:
        print(f"  {key} = {_format_config_value(report[key])}")
    return EXIT_OK


_DISPATCH = {
    "generate": cmd_generate,
    "loop": cmd_loop,
    "eval": cmd_eval,
    "field": cmd_field,
    "bounds": cmd_bounds,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="critsamp",
        description="Critical sampling for learning evolution operators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    help_lines = {
        "generate": "write an initial uniform sample set",
        "loop": "run the adaptive collection loop with per-pass checkpoints",
        "eval": "score a trained model on held-out trajectories",
        "field": "export the proxy error field on a lattice",
        "bounds": "calibrate and check the error growth bounds",
        "experiment": "run a registered study end to end",
        "resume": "continue an interrupted loop from its checkpoint",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=help_lines[name])
        p.add_argument("--config", metavar="PATH", help="configuration file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N", help="master seed")
        p.add_argument("--threads", type=int, metavar="N", help="worker pool size")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            dest="sets", help="override one configuration key (repeatable)",
        )
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if ns.command == "resume":
            return cmd_resume(ns)
        config = resolve_config(ns.config, ns.sets, out=ns.out, seed=ns.seed, threads=ns.threads)
        set_threads(config["run.threads"])
        return _DISPATCH[ns.command](config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoopDiverged, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
