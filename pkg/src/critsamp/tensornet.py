"""Small dense/residual network engine on flat float64 parameter buffers.

A network is a sequence of blocks; each block pushes its input through three
equal-width hidden layers plus a linear projection and, whenever the block
preserves dimension, adds the result back onto its input.  Parameters live
in one flat array with per-layer views, so the optimizer works on whole
vectors; reverse-mode gradients are exact.  All randomness (weight init,
epoch shuffles) is derived statelessly from (seed, stream, epoch), which
lets training resume at any epoch boundary bitwise-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import STREAM_NET, STREAM_SHUFFLE, fmt, fmt_row, parse_floats, rng_for

CHECKPOINT_FORMAT = "critsamp-checkpoint-v1"

# activation -> (function, derivative expressed through the activation OUTPUT)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


class TrainingDiverged(RuntimeError):
    """Raised when a training loss stops being finite; carries the epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = int(epoch)


@dataclass(frozen=True)
class NetArchitecture:
    """Residual-block topology: three hidden layers per block, then a projection."""

    input_dim: int
    output_dim: int
    blocks: int
    width: int
    activation: str = "tanh"
    layers_per_block: int = 3

    def __post_init__(self):
        if self.blocks < 1 or self.width < 1:
            raise ValueError("requires blocks >= 1 and width >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("requires positive input and output dims")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layers_per_block != 3:
            raise ValueError("blocks are fixed at 3 hidden layers")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every weight matrix, block by block."""
        shapes = []
        for b in range(self.blocks):
            out = self.output_dim if b == self.blocks - 1 else self.input_dim
            dims = [self.input_dim, self.width, self.width, self.width, out]
            shapes.extend(zip(dims[:-1], dims[1:]))
        return shapes

    def block_is_residual(self, b: int) -> bool:
        out = self.output_dim if b == self.blocks - 1 else self.input_dim
        return out == self.input_dim

    @property
    def param_count(self) -> int:
        return sum(nin * nout + nout for nin, nout in self.layer_shapes())


class NetParams:
    """All weights and biases in one flat buffer plus per-layer views."""

    def __init__(self, arch: NetArchitecture, flat: np.ndarray | None = None):
        self.arch = arch
        n = arch.param_count
        if flat is None:
            flat = np.zeros(n, dtype=float)
        else:
            flat = np.asarray(flat, dtype=float)
            if flat.shape != (n,):
                raise ValueError(f"expected a flat buffer of length {n}")
        self.flat = flat
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for nin, nout in arch.layer_shapes():
            self.weights.append(flat[off : off + nin * nout].reshape(nin, nout))
            off += nin * nout
            self.biases.append(flat[off : off + nout])
            off += nout

    @classmethod
    def zeros(cls, arch: NetArchitecture) -> "NetParams":
        return cls(arch)

    @classmethod
    def init(cls, arch: NetArchitecture, rng: np.random.Generator) -> "NetParams":
        """Uniform fan-in-scaled weights, zero biases."""
        p = cls(arch)
        for w in p.weights:
            bound = 1.0 / np.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return p

    def copy(self) -> "NetParams":
        return NetParams(self.arch, self.flat.copy())


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} components per row")
    return x, single


def net_forward(arch: NetArchitecture, params: NetParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x, single = _as_batch(x, arch.input_dim, "input")
    act, _ = ACTIVATIONS[arch.activation]
    h = x
    layer = 0
    for b in range(arch.blocks):
        z = h
        for _ in range(3):
            z = act(z @ params.weights[layer] + params.biases[layer])
            layer += 1
        z = z @ params.weights[layer] + params.biases[layer]
        layer += 1
        h = h + z if arch.block_is_residual(b) else z
    return h[0] if single else h


def net_forward_cache(arch: NetArchitecture, params: NetParams, x: np.ndarray):
    """Forward pass keeping the per-layer activations needed for backprop."""
    x, _ = _as_batch(x, arch.input_dim, "input")
    act, _ = ACTIVATIONS[arch.activation]
    h = x
    cache = []
    layer = 0
    for b in range(arch.blocks):
        block_in = h
        acts = []
        z = h
        for _ in range(3):
            z = act(z @ params.weights[layer] + params.biases[layer])
            acts.append(z)
            layer += 1
        z = z @ params.weights[layer] + params.biases[layer]
        layer += 1
        cache.append((block_in, acts))
        h = block_in + z if arch.block_is_residual(b) else z
    return h, cache


def net_backward(arch: NetArchitecture, params: NetParams, cache, gout: np.ndarray) -> np.ndarray:
    """Exact vector-Jacobian product: d(loss)/d(params) given d(loss)/d(output).

    ``cache`` comes from net_forward_cache on the same inputs.  Returns a
    flat gradient aligned with params.flat.
    """
    _, dact = ACTIVATIONS[arch.activation]
    grads = NetParams.zeros(arch)
    g = np.asarray(gout, dtype=float)
    layer = 4 * arch.blocks
    for b in range(arch.blocks - 1, -1, -1):
        block_in, acts = cache[b]
        # gradient entering the block's projection output
        gz = g
        layer -= 1
        inputs = [block_in, acts[0], acts[1], acts[2]]
        grads.weights[layer][...] = inputs[3].T @ gz
        grads.biases[layer][...] = gz.sum(axis=0)
        gz = gz @ params.weights[layer].T
        for k in (2, 1, 0):
            layer -= 1
            gz = gz * dact(acts[k])
            grads.weights[layer][...] = inputs[k].T @ gz
            grads.biases[layer][...] = gz.sum(axis=0)
            gz = gz @ params.weights[layer].T
        g = g + gz if arch.block_is_residual(b) else gz
    return grads.flat


def mse_loss(arch: NetArchitecture, params: NetParams, x, y) -> float:
    """Mean over the batch of the squared error norm ||f(x) - y||^2."""
    x, _ = _as_batch(x, arch.input_dim, "input")
    y, _ = _as_batch(y, arch.output_dim, "target")
    r = net_forward(arch, params, x) - y
    return float(np.mean(np.sum(r * r, axis=1)))


def net_gradient(arch: NetArchitecture, params: NetParams, x, y):
    """Loss and exact gradient of the batch-mean squared error norm."""
    x, _ = _as_batch(x, arch.input_dim, "input")
    y, _ = _as_batch(y, arch.output_dim, "target")
    if x.shape[0] == 0:
        raise ValueError("requires a non-empty batch")
    out, cache = net_forward_cache(arch, params, x)
    r = out - y
    loss = float(np.mean(np.sum(r * r, axis=1)))
    gout = (2.0 / x.shape[0]) * r
    return loss, net_backward(arch, params, cache, gout)


class AdamState:
    """First/second moment buffers and step counter for Adam."""

    def __init__(self, size: int, m=None, v=None, t: int = 0):
        self.m = np.zeros(size, dtype=float) if m is None else np.asarray(m, dtype=float)
        self.v = np.zeros(size, dtype=float) if v is None else np.asarray(v, dtype=float)
        if self.m.shape != (size,) or self.v.shape != (size,):
            raise ValueError("moment buffers must match the parameter count")
        self.t = int(t)


def adam_step(
    params: NetParams,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on params.flat."""
    g = np.asarray(grad, dtype=float)
    if g.shape != params.flat.shape:
        raise ValueError("gradient does not align with parameters")
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * (g * g)
    mhat = state.m / (1.0 - beta1**state.t)
    vhat = state.v / (1.0 - beta2**state.t)
    params.flat -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch schedule: geometric learning-rate decay across epochs."""

    epochs: int
    batch_size: int = 10
    lr_initial: float = 1e-3
    lr_final: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    consistency_weight: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("requires epochs >= 1 and batch_size >= 1")
        if self.lr_final > self.lr_initial:
            raise ValueError("requires lr_final <= lr_initial")
        if self.consistency_weight < 0:
            raise ValueError("requires consistency_weight >= 0")

    def learning_rate(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lr_initial
        ratio = (self.lr_final / self.lr_initial) ** (1.0 / (self.epochs - 1))
        return self.lr_initial * ratio**epoch


def train(
    arch: NetArchitecture,
    x,
    y,
    config: TrainConfig,
    aux_loss=None,
    params: NetParams | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    stop_epoch: int | None = None,
):
    """Mini-batch MSE training with seeded shuffling and Adam.

    ``aux_loss(params, epoch, batch_index) -> (value, flat_gradient)`` is an
    optional extra term added with weight config.consistency_weight; it is
    skipped entirely at weight zero.  Passing params/adam/start_epoch resumes
    a run at an epoch boundary with results identical to an uninterrupted
    run; stop_epoch pauses after that epoch while keeping the learning-rate
    schedule pinned to config.epochs.  Returns (params, per-epoch mean loss
    list for the epochs run).
    """
    x, _ = _as_batch(x, arch.input_dim, "input")
    y, _ = _as_batch(y, arch.output_dim, "target")
    n = x.shape[0]
    if n == 0:
        raise ValueError("requires a non-empty dataset")
    if params is None:
        params = NetParams.init(arch, rng_for(config.seed, STREAM_NET))
    if adam is None:
        adam = AdamState(params.flat.size)
    lam = config.consistency_weight
    use_aux = aux_loss is not None and lam > 0.0
    last = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    history = []
    for epoch in range(start_epoch, last):
        order = rng_for(config.seed, STREAM_SHUFFLE, epoch).permutation(n)
        lr = config.learning_rate(epoch)
        total = 0.0
        batches = 0
        for bi, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            loss, grad = net_gradient(arch, params, x[idx], y[idx])
            if use_aux:
                aval, agrad = aux_loss(params, epoch, bi)
                loss = loss + lam * aval
                grad = grad + lam * agrad
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch)
            adam_step(
                params,
                grad,
                adam,
                lr,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                eps=config.adam_eps,
            )
            total += loss
            batches += 1
        history.append(total / batches)
    if not np.all(np.isfinite(params.flat)):
        raise TrainingDiverged("non-finite parameters after training", config.epochs - 1)
    return params, history


# ---------------------------------------------------------------------------
# Checkpoint format: one self-describing text document


def save_checkpoint(
    path,
    arch: NetArchitecture,
    params: NetParams,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """Write architecture, parameters, optimizer state, and caller metadata.

    The generator state is the (seed, epochs_done) pair recorded by callers
    in ``meta``; all stream generators are re-derived from it on resume.
    """
    meta = dict(meta or {})
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_FORMAT + "\n")
        fh.write(f"input_dim={arch.input_dim}\n")
        fh.write(f"output_dim={arch.output_dim}\n")
        fh.write(f"blocks={arch.blocks}\n")
        fh.write(f"width={arch.width}\n")
        fh.write(f"activation={arch.activation}\n")
        for key in sorted(meta):
            val = meta[key]
            if isinstance(val, float):
                val = fmt(val)
            elif isinstance(val, np.ndarray):
                val = fmt_row(val)
            fh.write(f"{key}={val}\n")
        fh.write(f"adam_t={0 if adam is None else adam.t}\n")
        fh.write(f"params={fmt_row(params.flat)}\n")
        m = np.zeros(params.flat.size) if adam is None else adam.m
        v = np.zeros(params.flat.size) if adam is None else adam.v
        fh.write(f"adam_m={fmt_row(m)}\n")
        fh.write(f"adam_v={fmt_row(v)}\n")


def load_checkpoint(path):
    """Read a checkpoint: returns (arch, params, adam, meta-string dict)."""
    with open(path) as fh:
        first = fh.readline().strip()
        if first != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {first!r}")
        kv = {}
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed checkpoint line {line!r}")
            key, val = line.split("=", 1)
            kv[key] = val
    arch = NetArchitecture(
        input_dim=int(kv.pop("input_dim")),
        output_dim=int(kv.pop("output_dim")),
        blocks=int(kv.pop("blocks")),
        width=int(kv.pop("width")),
        activation=kv.pop("activation"),
    )
    params = NetParams(arch, parse_floats(kv.pop("params")))
    adam = AdamState(
        params.flat.size,
        m=parse_floats(kv.pop("adam_m")),
        v=parse_floats(kv.pop("adam_v")),
        t=int(kv.pop("adam_t")),
    )
    return arch, params, adam, kv
