"""critsamp: critical sampling for learning evolution operators.

Learn forward and backward flow-map steppers for an unknown dynamical system
from observed state transitions, estimate where the learned operators are
wrong without querying ground truth (multi-step reciprocal prediction error),
and concentrate new oracle samples at those points.  Subpackages:

- dynsys: benchmark systems, reference integrator, sample sets
- tensornet: dense/residual network engine with Adam training
- spatial: local-polynomial neighbor model and sample augmentation
- evonet: forward/backward evolution steppers and reciprocal traces
- sampler: error fields, peak selection, the adaptive sampling loop
- bounds: one-sided error-bound estimates and their verification
- evalbench: trajectory benchmarks and named desk-scale experiments
- cli: command-line front end over the above
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
