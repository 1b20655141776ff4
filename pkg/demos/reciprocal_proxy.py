"""The ground-truth-free error proxy versus the real modeling error.

Trains forward and backward steppers once on a uniform sample set, then
compares the multi-step reciprocal gap (computable without new oracle data)
against the true one-step modeling error (needs the oracle) on a grid.
The two fields agree where it matters: their peaks and ranks line up.
"""

import numpy as np

from critsamp.dynsys import generate_initial_set, get_system
from critsamp.evalbench import lattice
from critsamp.evonet import train_evolution
from critsamp.sampler import correlation, error_field
from critsamp.tensornet import TrainConfig

system = get_system("pendulum")
samples = generate_initial_set(system, 200, seed=0)

train = TrainConfig(epochs=300, seed=1)
fwd = train_evolution(samples, "forward", train, system.domain)
bwd = train_evolution(samples, "backward", train, system.domain)

# score both fields over a 20 x 20 lattice; with_truth spends one oracle
# call per grid point, the price of the comparison
grid = lattice(system.domain, 20)
field = error_field(fwd, bwd, grid, steps=5, with_truth=True, system=system)

pear, spear = correlation(field)
print(f"grid points:            {len(field)}")
print(f"pearson  (proxy, true): {pear:.3f}")
print(f"spearman (proxy, true): {spear:.3f}")

# the proxy's top peaks should sit inside the true field's worst decile
order_proxy = np.argsort(field.reciprocal)[::-1]
order_true = np.argsort(field.truth)[::-1]
worst_decile = set(order_true[: len(field) // 10].tolist())
hits = sum(1 for i in order_proxy[:10] if int(i) in worst_decile)
print(f"proxy top-10 peaks inside the true worst decile: {hits}/10")

print("\nlargest proxy scores (theta, omega, proxy, true):")
for i in order_proxy[:5]:
    th, om = grid[i]
    print(f"  {th:+.3f} {om:+.3f}   {field.reciprocal[i]:.4e}   {field.truth[i]:.4e}")
