"""Error-growth bounds in practice: calibrate, then verify dominance.

Trains a small stepper pair, estimates the constants the growth bounds
need (a Lipschitz rate for the flow and per-step deviation ceilings), and
checks that predicted ceilings really sit above the observed errors for
every window length on eligible starts.
"""

import numpy as np

from critsamp.bounds import (
    calibrate_bounds,
    check_backward_bounds,
    check_forward_bounds,
    check_reciprocal_bounds,
)
from critsamp.dynsys import generate_initial_set, get_system
from critsamp.evonet import train_evolution
from critsamp.tensornet import TrainConfig
from critsamp._util import rng_for

system = get_system("pendulum")
samples = generate_initial_set(system, 200, seed=0)

train = TrainConfig(epochs=300, seed=1)
fwd = train_evolution(samples, "forward", train, system.domain)
bwd = train_evolution(samples, "backward", train, system.domain)

# constants feeding the bounds: flow Lipschitz rate from sampled rhs
# differences, per-step deviation ceilings from a probe grid
params, eps = calibrate_bounds(fwd, bwd, system, window=5, seed=3)
print(f"lipschitz rate:      {params.lipschitz:.4f}")
print(f"forward step error:  {params.eps_forward:.4e}")
print(f"backward step error: {params.eps_backward:.4e}")

starts = system.domain.sample(rng_for(4, 96), 100)
for label, checker in (
    ("forward", lambda: check_forward_bounds(fwd, system, params, starts)),
    ("backward", lambda: check_backward_bounds(bwd, system, params, starts)),
    ("reciprocal", lambda: check_reciprocal_bounds(fwd, bwd, system, params, starts)),
):
    checks, eligible = checker()
    n = int(np.sum(eligible))
    print(f"\n{label}: {n} of {starts.shape[0]} starts eligible")
    print(f"{'k':>3} {'empirical':>12} {'bound':>12} {'holds':>6}")
    for c in checks:
        print(f"{c.k:>3} {c.empirical:>12.4e} {c.bound:>12.4e} {str(c.satisfied):>6}")
