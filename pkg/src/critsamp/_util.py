"""Shared helpers: 17-digit text serialization, seeded RNG streams, threading."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

# Work-unit size for threaded batch evaluation.  The chunk size is a constant
# independent of the thread count, so every input row is processed inside an
# identically shaped slice and the concatenated result is bitwise the same
# for any number of worker threads.
CHUNK = 256

# Stream identifiers for deriving independent generators from one user seed.
# Each consumer builds np.random.SeedSequence((seed, stream, *context)), so a
# generator can be reconstructed from scratch at any loop iteration or epoch
# without carrying bit-generator state across checkpoints.
STREAM_INIT = 1    # initial uniform sample draws
STREAM_NET = 2     # network weight initialization
STREAM_SHUFFLE = 3 # per-epoch mini-batch shuffling
STREAM_AUG = 4     # augmentation point draws
STREAM_CONS = 5    # consistency-pool draws
STREAM_EVAL = 6    # evaluation initial states
STREAM_FIELD = 7   # candidate grids for error fields
STREAM_SDN_NET = 8     # spatial-model weight initialization
STREAM_SDN_SHUFFLE = 9 # spatial-model epoch shuffling
STREAM_LOOP = 10   # per-pass training-job sub-seeds in the collection loop
STREAM_BOUNDS = 11 # grids and sample draws for bound estimation


def subseed(seed: int, *context: int) -> int:
    """Independent integer seed derived from a parent seed and a context path."""
    return int(rng_for(seed, STREAM_LOOP, *context).integers(0, 2**63))

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def get_threads() -> int:
    return _threads


def rng_for(seed: int, stream: int, *context: int) -> np.random.Generator:
    """Generator for a (seed, stream, context...) tuple, reproducible statelessly."""
    entropy = (int(seed), int(stream)) + tuple(int(c) for c in context)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def fmt(x) -> str:
    """Decimal form of a scalar with 17 significant digits (float64 round-trip)."""
    return "%.17g" % float(x)


def fmt_row(values) -> str:
    return ",".join(fmt(v) for v in np.asarray(values, dtype=float).ravel())


def parse_floats(text: str) -> np.ndarray:
    toks = [t for t in text.strip().split(",") if t != ""]
    return np.array([float(t) for t in toks], dtype=float)


def batch_map(fn, x: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Apply ``fn`` chunkwise along the leading axis and concatenate in order.

    ``fn`` must map an (m, ...) array to an (m, ...) array and be pure.  The
    fixed chunk size keeps results independent of the thread count.
    """
    if threads is None:
        threads = _threads
    n = x.shape[0]
    if n <= CHUNK:
        return fn(x)
    chunks = [x[i : i + CHUNK] for i in range(0, n, CHUNK)]
    if threads <= 1:
        outs = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(fn, chunks))
    return np.concatenate(outs, axis=0)
