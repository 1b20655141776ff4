"""Forward and backward one-lag steppers learned from transition pairs.

A stepper predicts u(t + delta) from u(t); the backward stepper is trained
on time-reversed pairs and predicts u(t - delta).  States are normalized to
the domain box and the network learns the increment in normalized
coordinates, so a zero-parameter model is the exact identity map.  The
forward stepper can additionally be pulled toward the local-polynomial
neighbor model on uniform query points (consistency term), which regularizes
it where collected pairs are sparse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import STREAM_CONS, fmt_row, parse_floats, rng_for
from .dynsys import Hypercube, SampleSet
from .spatial import SpatialModel, sdn_predict_batch
from .tensornet import (
    NetArchitecture,
    NetParams,
    TrainConfig,
    load_checkpoint,
    net_forward,
    net_gradient,
    save_checkpoint,
    train,
)

DIRECTIONS = ("forward", "backward")
CONSISTENCY_POINTS = 500


class RolloutDiverged(RuntimeError):
    """A composed prediction left the finite range at the given step."""

    def __init__(self, message: str, step: int, direction: str):
        super().__init__(message)
        self.step = int(step)
        self.direction = direction


@dataclass
class EvolutionModel:
    """One trained stepper plus the coordinate transform it was fit under."""

    direction: str
    arch: NetArchitecture
    params: NetParams
    center: np.ndarray
    scale: np.ndarray
    delta: float
    system: str = ""
    trained_on_iteration: int = 0
    seed: int = 0
    epochs_done: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.arch.input_dim != self.arch.output_dim:
            raise ValueError("steppers require input_dim = output_dim")
        self.center = np.asarray(self.center, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)

    @property
    def dim(self) -> int:
        return self.arch.input_dim

    def predict(self, u) -> np.ndarray:
        """One lag step.  The network's normalized increment is added onto u,
        so zero parameters give back u bitwise."""
        u = np.asarray(u, dtype=float)
        z = (u - self.center) / self.scale
        out = net_forward(self.arch, self.params, z)
        return u + self.scale * (out - z)


def transform_for(domain: Hypercube):
    """Normalization used by all steppers: map the domain box onto [-1, 1]^n."""
    return domain.center, domain.halfwidth


def reverse_pairs(samples: SampleSet) -> SampleSet:
    """Swap every pair's endpoints; set metadata is preserved."""
    return SampleSet(
        samples.system,
        samples.delta,
        samples.u1,
        samples.u0,
        samples.provenance,
        iteration=samples.iteration,
    )


def _consistency_aux(
    arch: NetArchitecture,
    domain: Hypercube,
    center: np.ndarray,
    scale: np.ndarray,
    spatial: SpatialModel,
    samples: SampleSet,
    config: TrainConfig,
    count: int,
):
    """Per-batch stochastic estimate of the neighbor-model consistency loss.

    Each epoch redraws `count` uniform query points and their neighbor-model
    images; each batch step consumes batch_size of them in a seeded order.
    """
    state: dict = {"epoch": -1}

    def aux(params: NetParams, epoch: int, batch_index: int):
        if state["epoch"] != epoch:
            rng = rng_for(config.seed, STREAM_CONS, epoch)
            q = domain.sample(rng, count)
            target = sdn_predict_batch(spatial, samples, q)
            state["epoch"] = epoch
            state["zq"] = (q - center) / scale
            state["zt"] = (target - center) / scale
            state["perm"] = rng.permutation(count)
        start = (batch_index * config.batch_size) % count
        rows = state["perm"][np.arange(start, start + config.batch_size) % count]
        return net_gradient(arch, params, state["zq"][rows], state["zt"][rows])

    return aux


def train_evolution(
    samples: SampleSet,
    direction: str,
    config: TrainConfig,
    domain: Hypercube,
    arch: NetArchitecture | None = None,
    spatial: SpatialModel | None = None,
    consistency_points: int = CONSISTENCY_POINTS,
    init_params: NetParams | None = None,
) -> EvolutionModel:
    """Fit one stepper on the pair set (reversed first for direction=backward).

    The consistency term applies only to the forward stepper and only when a
    neighbor model is supplied with a positive config.consistency_weight.
    ``init_params`` warm-starts from an earlier fit (copied, never mutated);
    the default is a fresh seeded initialization.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if len(samples) == 0:
        raise ValueError("requires a non-empty sample set")
    data = reverse_pairs(samples) if direction == "backward" else samples
    n = data.dim
    if arch is None:
        arch = NetArchitecture(n, n, blocks=1, width=20)
    center, scale = transform_for(domain)
    z0 = (data.u0 - center) / scale
    z1 = (data.u1 - center) / scale
    aux = None
    if direction == "forward" and spatial is not None and config.consistency_weight > 0:
        aux = _consistency_aux(
            arch, domain, center, scale, spatial, samples, config, consistency_points
        )
    start = None if init_params is None else init_params.copy()
    params, history = train(arch, z0, z1, config, aux_loss=aux, params=start)
    return EvolutionModel(
        direction=direction,
        arch=arch,
        params=params,
        center=center,
        scale=scale,
        delta=samples.delta,
        system=samples.system,
        trained_on_iteration=samples.iteration,
        seed=config.seed,
        epochs_done=config.epochs,
        history=history,
    )


def rollout(model: EvolutionModel, u0, steps: int) -> np.ndarray:
    """Compose the stepper: path[0] = u0, path[k+1] = model(path[k])."""
    if steps < 0:
        raise ValueError("requires steps >= 0")
    u0 = np.asarray(u0, dtype=float)
    path = np.empty((steps + 1, model.dim), dtype=float)
    path[0] = u0
    for k in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = model.predict(path[k])
        if not np.all(np.isfinite(nxt)):
            raise RolloutDiverged(
                f"{model.direction} rollout left the finite range at step {k + 1}",
                k + 1,
                model.direction,
            )
        path[k + 1] = nxt
    return path


def rollout_batch(model: EvolutionModel, u0s, steps: int) -> np.ndarray:
    """Paths (B, steps+1, n) for many start points; divergence is not raised.

    Non-finite values propagate down their own path (the lag-step form keeps
    them absorbing), so callers can mask dead rows afterwards.
    """
    u0s = np.atleast_2d(np.asarray(u0s, dtype=float))
    paths = np.empty((u0s.shape[0], steps + 1, model.dim), dtype=float)
    paths[:, 0] = u0s
    with np.errstate(all="ignore"):
        for k in range(steps):
            paths[:, k + 1] = model.predict(paths[:, k])
    return paths


@dataclass(frozen=True)
class ReciprocalTrace:
    """Forward path and backward re-prediction over one lag window.

    The backward path starts from the forward endpoint (exact handoff) and
    is rolled all the way back to index 0 by the backward stepper.
    """

    forward_path: np.ndarray
    backward_path: np.ndarray
    steps: int

    def deviations(self) -> np.ndarray:
        """Squared path gap at each index 0..K; index K is zero by handoff."""
        d = self.forward_path - self.backward_path
        return np.sum(d * d, axis=-1)


def reciprocal_trace(
    fwd: EvolutionModel, bwd: EvolutionModel, u0, steps: int
) -> ReciprocalTrace:
    """Forward rollout, then the backward stepper re-predicts every earlier state."""
    if fwd.dim != bwd.dim:
        raise ValueError("steppers act on different state dimensions")
    forward = rollout(fwd, u0, steps)
    backward = np.empty_like(forward)
    backward[steps] = forward[steps]
    for k in range(steps - 1, -1, -1):
        with np.errstate(over="ignore", invalid="ignore"):
            prev = bwd.predict(backward[k + 1])
        if not np.all(np.isfinite(prev)):
            raise RolloutDiverged(
                f"backward rollout left the finite range at index {k}", k, "backward"
            )
        backward[k] = prev
    return ReciprocalTrace(forward, backward, steps)


def save_trace(path, trace: ReciprocalTrace) -> None:
    n = trace.forward_path.shape[1]
    cols = (
        ["k"]
        + [f"uhat_{j + 1}" for j in range(n)]
        + [f"ubar_{j + 1}" for j in range(n)]
    )
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(trace.steps + 1):
            fh.write(
                f"{k},{fmt_row(trace.forward_path[k])},{fmt_row(trace.backward_path[k])}\n"
            )


def load_trace(path) -> ReciprocalTrace:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n = (len(header) - 1) // 2
        fwd, bwd = [], []
        for line in fh:
            vals = parse_floats(line)
            fwd.append(vals[1 : 1 + n])
            bwd.append(vals[1 + n :])
    return ReciprocalTrace(np.array(fwd), np.array(bwd), len(fwd) - 1)


def save_evolution(path, model: EvolutionModel) -> None:
    meta = {
        "kind": "evolution",
        "direction": model.direction,
        "center": model.center,
        "scale": model.scale,
        "delta": model.delta,
        "system": model.system,
        "iteration": model.trained_on_iteration,
        "seed": model.seed,
        "epochs_done": model.epochs_done,
    }
    save_checkpoint(path, model.arch, model.params, None, meta=meta)


def load_evolution(path) -> EvolutionModel:
    arch, params, _, meta = load_checkpoint(path)
    if meta.get("kind") != "evolution":
        raise ValueError("checkpoint does not hold an evolution model")
    return EvolutionModel(
        direction=meta["direction"],
        arch=arch,
        params=params,
        center=parse_floats(meta["center"]),
        scale=parse_floats(meta["scale"]),
        delta=float(meta["delta"]),
        system=meta.get("system", ""),
        trained_on_iteration=int(meta.get("iteration", 0)),
        seed=int(meta.get("seed", 0)),
        epochs_done=int(meta.get("epochs_done", 0)),
    )
