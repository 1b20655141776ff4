"""Local-polynomial neighbor model and training-set augmentation.

Around a query point, the model reads the nearest H collected transition
pairs and emits, through a small dense network, the coefficients of one
polynomial per state component; evaluating those polynomials at the query
predicts where the flow sends it.  Trained leave-one-out on the collected
pairs, the model becomes a cheap interpolant of the flow map, and drawing
many uniform points through it manufactures synthetic training pairs that
densify the sample set at zero oracle cost.

All coordinates are scaled by the domain halfwidth (no centering), so a
zero-parameter network predicts the zero vector and translation moves only
the absolute-query channels of the encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import (
    CHUNK,
    STREAM_AUG,
    STREAM_SDN_NET,
    STREAM_SDN_SHUFFLE,
    parse_floats,
    rng_for,
)
from .dynsys import PROV_AUGMENTED, SamplePair, SampleSet
from .tensornet import (
    AdamState,
    NetArchitecture,
    NetParams,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    load_checkpoint,
    net_backward,
    net_forward,
    net_forward_cache,
    save_checkpoint,
)

DEFAULT_NEIGHBORS = 10
SDN_WIDTH = 40
# synthetic pairs per collected pair, and the overall cap
AUGMENT_FACTOR = 20
AUGMENT_CAP = 20_000

# The neighbor model regresses coefficients whose self-terms sit near 1, so
# it needs a hotter schedule than the evolution steppers to cover the
# distance from a small random init within a few hundred epochs.
SDN_EPOCHS = 300
SDN_LR_INITIAL = 1e-2


def default_sdn_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=SDN_EPOCHS, lr_initial=SDN_LR_INITIAL, seed=seed)


def monomial_exponents(n: int, p: int) -> np.ndarray:
    """Exponent rows of all n-variate monomials of total degree <= p.

    Graded order: degree 0, 1, ..., p; within a degree, lexicographically
    descending exponent tuples, so the affine case lists 1, u1, ..., un.
    """
    if n < 1 or p < 0:
        raise ValueError("requires n >= 1 and p >= 0")

    def tuples(total, parts):
        if parts == 1:
            yield (total,)
            return
        for first in range(total, -1, -1):
            for rest in tuples(total - first, parts - 1):
                yield (first,) + rest

    rows = []
    for degree in range(p + 1):
        rows.extend(tuples(degree, n))
    return np.array(rows, dtype=int)


def monomial_count(n: int, p: int) -> int:
    """C(n+p, p), the number of monomials of degree <= p in n variables."""
    from math import comb

    return comb(n + p, p)


def monomial_basis(u: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """Evaluate every monomial at u; maps (..., n) to (..., P)."""
    u = np.asarray(u, dtype=float)
    return np.prod(u[..., None, :] ** exponents, axis=-1)


def poly_eval(coeffs, u, order: int) -> np.ndarray:
    """Value of the coefficient vector's polynomial at u.

    coeffs has length C(n+p, p) in the graded monomial order; a leading batch
    axis on both arguments evaluates one polynomial per row.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    exps = monomial_exponents(n, order)
    if coeffs.shape[-1] != exps.shape[0]:
        raise ValueError(
            f"expected {exps.shape[0]} coefficients for degree {order} in {n} variables"
        )
    return np.sum(coeffs * monomial_basis(u, exps), axis=-1)


@dataclass(frozen=True)
class Neighborhood:
    """The H nearest collected pairs around a query, closest first."""

    query: np.ndarray
    neighbors: list[SamplePair]
    indices: np.ndarray
    distances: np.ndarray


def _knn_indices(base_u0: np.ndarray, queries: np.ndarray, h: int, exclude_self: bool = False):
    """Exact nearest neighbors by full stable argsort over distances.

    Ties resolve to the lower sample index.  With exclude_self, query i is
    barred from picking base point i (leave-one-out training layout).
    """
    n_base = base_u0.shape[0]
    need = h + (1 if exclude_self else 0)
    if n_base < need:
        raise ValueError(f"requires at least {need} collected pairs, have {n_base}")
    idx_chunks = []
    dist_chunks = []
    for lo in range(0, queries.shape[0], CHUNK):
        q = queries[lo : lo + CHUNK]
        d = np.linalg.norm(q[:, None, :] - base_u0[None, :, :], axis=2)
        if exclude_self:
            rows = np.arange(lo, min(lo + CHUNK, queries.shape[0]))
            d[np.arange(q.shape[0]), rows] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :h]
        idx_chunks.append(order)
        dist_chunks.append(np.take_along_axis(d, order, axis=1))
    return np.concatenate(idx_chunks, axis=0), np.concatenate(dist_chunks, axis=0)


def knn(samples: SampleSet, query, h: int) -> Neighborhood:
    """Nearest collected pairs around one query point (augmented rows ignored)."""
    base = samples.without_augmented()
    query = np.asarray(query, dtype=float)
    idx, dist = _knn_indices(base.u0, query[None, :], h)
    pairs = [SamplePair(base.u0[i], base.u1[i], base.provenance[i]) for i in idx[0]]
    return Neighborhood(query, pairs, idx[0], dist[0])


def encode_neighborhoods(
    queries: np.ndarray, nb_u0: np.ndarray, nb_u1: np.ndarray, scale: np.ndarray
) -> np.ndarray:
    """Fixed-length network input for each query row.

    Layout: scaled absolute query (n), then per neighbor in distance order
    the scaled offset z(0) - query (n) and the scaled displacement
    z(delta) - z(0) (n).  Differences are taken before scaling, so a common
    translation of query and neighbors touches only the leading channels.
    """
    q, h = nb_u0.shape[0], nb_u0.shape[1]
    off = (nb_u0 - queries[:, None, :]) / scale
    disp = (nb_u1 - nb_u0) / scale
    return np.concatenate(
        [queries / scale, off.reshape(q, -1), disp.reshape(q, -1)], axis=1
    )


@dataclass
class SpatialModel:
    """Trained neighbor-to-coefficients network with its evaluation layout."""

    h_nn: int
    order: int
    arch: NetArchitecture
    params: NetParams
    scale: np.ndarray
    exponents: np.ndarray
    seed: int = 0
    epochs_done: int = 0
    history: list = field(default_factory=list)

    @property
    def coeff_count(self) -> int:
        return self.exponents.shape[0]

    @property
    def state_dim(self) -> int:
        return self.exponents.shape[1]


def spatial_arch(n: int, h_nn: int, p: int) -> NetArchitecture:
    enc = n + 2 * h_nn * n
    return NetArchitecture(enc, n * monomial_count(n, p), blocks=1, width=SDN_WIDTH)


def _coefficients(model: SpatialModel, enc: np.ndarray) -> np.ndarray:
    out = net_forward(model.arch, model.params, enc)
    return np.atleast_2d(out).reshape(enc.shape[0], model.state_dim, model.coeff_count)


def sdn_predict_batch(model: SpatialModel, samples: SampleSet, queries) -> np.ndarray:
    """Predicted images of many query points, one row each."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    base = samples.without_augmented()
    idx, _ = _knn_indices(base.u0, queries, model.h_nn)
    enc = encode_neighborhoods(queries, base.u0[idx], base.u1[idx], model.scale)
    coeffs = _coefficients(model, enc)
    phi = monomial_basis(queries / model.scale, model.exponents)
    return np.einsum("qjp,qp->qj", coeffs, phi) * model.scale


def sdn_predict(model: SpatialModel, samples: SampleSet, query) -> np.ndarray:
    """Predicted image of one query point under the sampled flow."""
    return sdn_predict_batch(model, samples, np.asarray(query, dtype=float)[None, :])[0]


def train_sdn(
    samples: SampleSet,
    h_nn: int = DEFAULT_NEIGHBORS,
    order: int = 2,
    config: TrainConfig | None = None,
    scale: np.ndarray | None = None,
) -> SpatialModel:
    """Fit the neighbor model leave-one-out on the collected pairs.

    Each collected pair serves as a query whose own row is excluded from its
    neighborhood; the loss is the scaled squared error between the polynomial
    prediction at the query and the pair's observed image.
    """
    if config is None:
        config = default_sdn_config()
    base = samples.without_augmented()
    n = base.dim
    if len(base) < h_nn + 1:
        raise ValueError(f"requires at least {h_nn + 1} collected pairs")
    if scale is None:
        scale = np.max(np.abs(base.u0), axis=0)
        scale[scale == 0] = 1.0
    scale = np.asarray(scale, dtype=float)

    exps = monomial_exponents(n, order)
    arch = spatial_arch(n, h_nn, order)
    idx, _ = _knn_indices(base.u0, base.u0, h_nn, exclude_self=True)
    enc = encode_neighborhoods(base.u0, base.u0[idx], base.u1[idx], scale)
    phi = monomial_basis(base.u0 / scale, exps)
    targets = base.u1 / scale

    params = NetParams.init(arch, rng_for(config.seed, STREAM_SDN_NET))
    adam = AdamState(params.flat.size)
    history = []
    count = len(base)
    for epoch in range(config.epochs):
        order_ix = rng_for(config.seed, STREAM_SDN_SHUFFLE, epoch).permutation(count)
        lr = config.learning_rate(epoch)
        total = 0.0
        batches = 0
        for lo in range(0, count, config.batch_size):
            rows = order_ix[lo : lo + config.batch_size]
            b = rows.size
            out, cache = net_forward_cache(arch, params, enc[rows])
            coeffs = out.reshape(b, n, exps.shape[0])
            pred = np.einsum("bjp,bp->bj", coeffs, phi[rows])
            r = pred - targets[rows]
            loss = float(np.mean(np.sum(r * r, axis=1)))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite neighbor-model loss at epoch {epoch}", epoch)
            gout = ((2.0 / b) * np.einsum("bj,bp->bjp", r, phi[rows])).reshape(b, -1)
            grad = net_backward(arch, params, cache, gout)
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
    return SpatialModel(
        h_nn=h_nn,
        order=order,
        arch=arch,
        params=params,
        scale=scale,
        exponents=exps,
        seed=config.seed,
        epochs_done=config.epochs,
        history=history,
    )


def loo_errors(model: SpatialModel, samples: SampleSet) -> np.ndarray:
    """Physical-space leave-one-out prediction error of each collected pair."""
    base = samples.without_augmented()
    idx, _ = _knn_indices(base.u0, base.u0, model.h_nn, exclude_self=True)
    enc = encode_neighborhoods(base.u0, base.u0[idx], base.u1[idx], model.scale)
    coeffs = _coefficients(model, enc)
    phi = monomial_basis(base.u0 / model.scale, model.exponents)
    pred = np.einsum("qjp,qp->qj", coeffs, phi) * model.scale
    return np.linalg.norm(pred - base.u1, axis=1)


def augment(
    samples: SampleSet,
    model: SpatialModel,
    count: int,
    domain,
    seed: int,
) -> SampleSet:
    """Append synthetic pairs at uniform points, targets from the neighbor model."""
    if count < 0:
        raise ValueError("requires count >= 0")
    if count == 0:
        return samples
    rng = rng_for(seed, STREAM_AUG)
    v0 = domain.sample(rng, count)
    v1 = sdn_predict_batch(model, samples, v0)
    return samples.extended(v0, v1, PROV_AUGMENTED)


def augment_count(oracle_count: int) -> int:
    return min(AUGMENT_FACTOR * int(oracle_count), AUGMENT_CAP)


def save_spatial(path, model: SpatialModel) -> None:
    meta = {
        "kind": "spatial",
        "h_nn": model.h_nn,
        "order": model.order,
        "scale": model.scale,
        "seed": model.seed,
        "epochs_done": model.epochs_done,
    }
    save_checkpoint(path, model.arch, model.params, None, meta=meta)


def load_spatial(path) -> SpatialModel:
    arch, params, _, meta = load_checkpoint(path)
    if meta.get("kind") != "spatial":
        raise ValueError("checkpoint does not hold a spatial model")
    h_nn = int(meta["h_nn"])
    order = int(meta["order"])
    scale = parse_floats(meta["scale"])
    n = scale.size
    return SpatialModel(
        h_nn=h_nn,
        order=order,
        arch=arch,
        params=params,
        scale=scale,
        exponents=monomial_exponents(n, order),
        seed=int(meta.get("seed", 0)),
        epochs_done=int(meta.get("epochs_done", 0)),
    )
