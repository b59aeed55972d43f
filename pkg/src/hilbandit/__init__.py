"""Human-in-the-loop contextual bandits with workload-aware deferral.

Subpackages:
    numerics: dense solvers (Cholesky, ridge, NNLS, BVLS)
    study: querying-workload study schemas and the synthetic generator
    workload: predictive workload model zoo, CV, and selection
    bandit: linear-UCB estimators and the deferral policies
    simenv: simulated bite-acquisition episodes
    metrics: episode metrics and rank-based significance tests
    runner: config-driven experiment harness
    service: live expert-in-the-loop session server
"""

__version__ = "0.1.0"
