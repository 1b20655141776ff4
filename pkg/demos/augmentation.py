"""Stretching scarce data: the neighbor model fabricates training pairs.

Fits the spatial dynamics network on a small collected set, asks it for
flow predictions at fresh query points, and scores those synthetic labels
against the oracle.  The synthetic pairs are far cheaper than oracle calls
and land close enough to supervise a stepper.
"""

import numpy as np

from critsamp.dynsys import generate_initial_set, get_system, integrate
from critsamp.spatial import augment, augment_count, sdn_predict_batch, train_sdn
from critsamp.tensornet import TrainConfig
from critsamp._util import rng_for

system = get_system("pendulum")
samples = generate_initial_set(system, 200, seed=0)

model = train_sdn(samples, config=TrainConfig(epochs=1500, lr_initial=1e-2, seed=1))

# fresh uniform queries, scored against one oracle lag each
queries = system.domain.sample(rng_for(42, 96), 300)
predicted = sdn_predict_batch(model, samples, queries)
actual = integrate(system, queries, system.delta)
gap = np.mean(np.sum((predicted - actual) ** 2, axis=1))
print(f"collected pairs:               {len(samples)}")
print(f"fresh queries:                 {queries.shape[0]}")
print(f"synthetic-label MSE vs oracle: {gap:.4e}")

# the loop's augmentation step: 20 synthetic rows per collected one
grown = augment(samples, model, augment_count(len(samples)), system.domain, seed=2)
n_real = len(grown.without_augmented())
print(f"\nafter augmentation: {len(grown)} rows ({n_real} collected, "
      f"{len(grown) - n_real} synthetic)")

# synthetic labels should track the oracle much better than "no dynamics";
# compare against predicting no motion at all
frozen = np.mean(np.sum((queries - actual) ** 2, axis=1))
print(f"for scale, 'state stays put' MSE: {frozen:.4e}")
print(f"improvement factor:               {frozen / gap:.1f}x")
