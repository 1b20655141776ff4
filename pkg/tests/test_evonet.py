"""Stepper checks: reversal, training, rollouts, reciprocal traces, storage."""

import numpy as np
import pytest
from _helpers import diagonal_stepper, shift_stepper

from critsamp._util import rng_for
from critsamp.dynsys import PROV_INITIAL, Hypercube, SampleSet, generate_initial_set, nonlinear
from critsamp.evonet import (
    EvolutionModel,
    RolloutDiverged,
    load_evolution,
    load_trace,
    reciprocal_trace,
    reverse_pairs,
    rollout,
    rollout_batch,
    save_evolution,
    save_trace,
    train_evolution,
)
from critsamp.spatial import train_sdn
from critsamp.tensornet import NetArchitecture, NetParams, TrainConfig

UNIT_2D = Hypercube([-1.0, -1.0], [1.0, 1.0])

EPS = 2.0**-10  # exactly representable; keeps toy-trace arithmetic exact


def identity_samples(n=400, seed=0):
    u0 = rng_for(seed, 60).uniform(-1, 1, (n, 2))
    return SampleSet("ident", 0.1, u0, u0, [PROV_INITIAL] * n)


def test_reverse_pairs_involution():
    s = identity_samples(20)
    s = s.extended(np.array([[0.9, 0.9]]), np.array([[0.8, 0.7]]), "oracle-critical")
    r = reverse_pairs(s)
    assert np.array_equal(r.u0, s.u1)
    assert np.array_equal(r.u1, s.u0)
    assert r.provenance == s.provenance
    rr = reverse_pairs(r)
    assert np.array_equal(rr.u0, s.u0)
    assert np.array_equal(rr.u1, s.u1)


def test_reverse_pairs_empty_and_fixed_point():
    empty = SampleSet("x", 0.1, np.zeros((0, 2)), np.zeros((0, 2)), [])
    assert len(reverse_pairs(empty)) == 0
    fp = SampleSet("pendulum", 0.1, [[0.0, 0.0]], [[0.0, 0.0]], [PROV_INITIAL])
    r = reverse_pairs(fp)
    assert np.array_equal(r.u0, fp.u0)


def test_train_identity_flow_small_rollout_drift():
    s = identity_samples()
    model = train_evolution(
        s, "forward", TrainConfig(epochs=300, seed=1, lr_initial=3e-3), UNIT_2D
    )
    drift = max(
        float(np.max(np.linalg.norm(rollout(model, q, 10) - q, axis=1)))
        for q in s.u0[:20]
    )
    assert drift <= 1e-3


def test_backward_training_equals_forward_on_reversed_set():
    rng = rng_for(3, 61)
    u0 = rng.uniform(-1, 1, (50, 2))
    u1 = u0 * 0.9 + 0.05
    s = SampleSet("aff", 0.1, u0, u1, [PROV_INITIAL] * 50)
    cfg = TrainConfig(epochs=5, seed=7)
    bwd = train_evolution(s, "backward", cfg, UNIT_2D)
    fwd_on_reversed = train_evolution(reverse_pairs(s), "forward", cfg, UNIT_2D)
    assert np.array_equal(bwd.params.flat, fwd_on_reversed.params.flat)
    assert bwd.direction == "backward"


def test_consistency_weight_zero_is_bitwise_inert():
    s = identity_samples(80)
    sdn = train_sdn(s, h_nn=5, order=1, config=TrainConfig(epochs=10, seed=2))
    cfg = TrainConfig(epochs=10, seed=4, consistency_weight=0.0)
    plain = train_evolution(s, "forward", cfg, UNIT_2D)
    with_sdn = train_evolution(s, "forward", cfg, UNIT_2D, spatial=sdn)
    assert np.array_equal(plain.params.flat, with_sdn.params.flat)


def test_consistency_term_changes_training():
    s = identity_samples(80)
    sdn = train_sdn(s, h_nn=5, order=1, config=TrainConfig(epochs=10, seed=2))
    base = train_evolution(s, "forward", TrainConfig(epochs=10, seed=4), UNIT_2D)
    cons = train_evolution(
        s,
        "forward",
        TrainConfig(epochs=10, seed=4, consistency_weight=0.1),
        UNIT_2D,
        spatial=sdn,
        consistency_points=100,
    )
    assert not np.array_equal(base.params.flat, cons.params.flat)


def test_consistency_applies_to_forward_only():
    s = identity_samples(80)
    sdn = train_sdn(s, h_nn=5, order=1, config=TrainConfig(epochs=10, seed=2))
    cfg = TrainConfig(epochs=10, seed=4, consistency_weight=0.1)
    plain_bwd = train_evolution(s, "backward", cfg, UNIT_2D)
    sdn_bwd = train_evolution(s, "backward", cfg, UNIT_2D, spatial=sdn)
    assert np.array_equal(plain_bwd.params.flat, sdn_bwd.params.flat)


def test_rollout_trivials_and_composability():
    model = shift_stepper(0.25)
    path0 = rollout(model, np.array([0.5]), 0)
    assert path0.shape == (1, 1)
    assert path0[0, 0] == 0.5

    frozen = EvolutionModel(
        direction="forward",
        arch=model.arch,
        params=NetParams.zeros(model.arch),
        center=np.zeros(1),
        scale=np.ones(1),
        delta=0.1,
    )
    const = rollout(frozen, np.array([0.375]), 7)
    assert np.all(const == 0.375)

    path = rollout(model, np.array([0.0]), 6)
    assert np.array_equal(path.ravel(), 0.25 * np.arange(7))
    # composability: the long path is the two shorter paths glued exactly
    first = rollout(model, np.array([0.0]), 4)
    second = rollout(model, first[-1], 2)
    assert np.array_equal(path[:5], first)
    assert np.array_equal(path[4:], second)


def test_rollout_divergence_step_index():
    model = shift_stepper(1e308)
    with pytest.raises(RolloutDiverged) as exc:
        rollout(model, np.array([1e308]), 5)
    assert exc.value.step == 1
    assert exc.value.direction == "forward"


def test_rollout_batch_matches_single_and_propagates_nonfinite():
    model = diagonal_stepper([2.0])
    starts = np.array([[0.5], [-0.25], [1e308]])
    paths = rollout_batch(model, starts, 4)
    assert np.array_equal(paths[0], rollout(model, starts[0], 4))
    assert np.array_equal(paths[1], rollout(model, starts[1], 4))
    assert not np.all(np.isfinite(paths[2]))
    # a dead row never becomes finite again
    finite_by_step = np.all(np.isfinite(paths[2]), axis=-1)
    assert not np.any(finite_by_step[np.argmin(finite_by_step) :])


def test_reciprocal_trace_exact_inverse_linear_maps():
    fwd = diagonal_stepper([2.0, 0.5])
    bwd = diagonal_stepper([0.5, 2.0], direction="backward")
    u0 = np.array([0.375, -1.25])
    trace = reciprocal_trace(fwd, bwd, u0, 5)
    assert np.array_equal(trace.forward_path, trace.backward_path)
    assert np.all(trace.deviations() == 0.0)
    assert np.array_equal(trace.forward_path[0], u0)


def test_reciprocal_trace_zero_steps():
    fwd = shift_stepper(0.25)
    bwd = shift_stepper(-0.25, direction="backward")
    trace = reciprocal_trace(fwd, bwd, np.array([0.5]), 0)
    assert trace.steps == 0
    assert np.array_equal(trace.forward_path, trace.backward_path)
    assert trace.deviations().tolist() == [0.0]


def test_reciprocal_trace_rolls_backward_from_handoff():
    # forward map x+1, backward map x-1+eps: the backward path re-predicts
    # from the forward endpoint, so the small inversion defect compounds
    fwd = shift_stepper(1.0)
    bwd = shift_stepper(-1.0 + EPS, direction="backward")
    trace = reciprocal_trace(fwd, bwd, np.array([0.0]), 2)
    assert np.array_equal(trace.forward_path.ravel(), [0.0, 1.0, 2.0])
    assert np.array_equal(trace.backward_path.ravel(), [2.0 * EPS, 1.0 + EPS, 2.0])
    assert trace.backward_path[2, 0] == trace.forward_path[2, 0]
    assert np.array_equal(trace.deviations(), [4.0 * EPS**2, EPS**2, 0.0])


def test_trace_round_trip(tmp_path):
    fwd = shift_stepper(1.0)
    bwd = shift_stepper(-1.0 + EPS, direction="backward")
    trace = reciprocal_trace(fwd, bwd, np.array([0.0]), 3)
    path = tmp_path / "trace.csv"
    save_trace(path, trace)
    text = path.read_text().splitlines()
    assert text[0] == "k,uhat_1,ubar_1"
    loaded = load_trace(path)
    assert loaded.steps == 3
    assert np.array_equal(loaded.forward_path, trace.forward_path)
    assert np.array_equal(loaded.backward_path, trace.backward_path)


def test_evolution_checkpoint_round_trip(tmp_path):
    s = generate_initial_set(nonlinear(), 40, seed=5)
    model = train_evolution(
        s, "forward", TrainConfig(epochs=5, seed=6), nonlinear().domain
    )
    path = tmp_path / "fwd.ckpt"
    save_evolution(path, model)
    loaded = load_evolution(path)
    assert loaded.direction == "forward"
    assert loaded.system == "nonlinear"
    assert loaded.delta == model.delta
    assert np.array_equal(loaded.params.flat, model.params.flat)
    assert np.array_equal(loaded.center, model.center)
    assert np.array_equal(loaded.scale, model.scale)
    probe = rng_for(8, 62).uniform(-1, 1, (6, 2))
    assert np.array_equal(loaded.predict(probe), model.predict(probe))


def test_evolution_checkpoint_kind_guard(tmp_path):
    s = identity_samples(40)
    sdn = train_sdn(s, h_nn=5, order=1, config=TrainConfig(epochs=2, seed=2))
    from critsamp.spatial import save_spatial

    path = tmp_path / "sdn.ckpt"
    save_spatial(path, sdn)
    with pytest.raises(ValueError):
        load_evolution(path)


def test_train_evolution_validation():
    s = identity_samples(10)
    with pytest.raises(ValueError):
        train_evolution(s, "sideways", TrainConfig(epochs=1), UNIT_2D)
    empty = SampleSet("x", 0.1, np.zeros((0, 2)), np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        train_evolution(empty, "forward", TrainConfig(epochs=1), UNIT_2D)
