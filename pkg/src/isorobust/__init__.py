"""Intrinsic-robustness bounds for data drawn from conditional generative models.

Submodules: ``gaussian`` (normal CDF/quantile, isoperimetric map, seeded
streams), ``genmodel`` (generators and synthetic families), ``lipschitz``
(local Lipschitz estimation), ``bounds`` (closed-form bounds), ``classify``
(classifiers and training), ``attacks`` (PGD and on-manifold search),
``risk`` (Monte Carlo estimators) and ``cli``.
"""

__version__ = "0.1.0"
