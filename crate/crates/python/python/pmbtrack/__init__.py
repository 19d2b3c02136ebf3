from ._pmbtrack import (
    Marginals,
    UniformTracker,
    __version__,
    bernoulli_poisson_kl,
    exact_marginals,
    lbp_marginals,
    ospa,
    preset_toml,
    presets,
    run_experiment,
)

__all__ = [
    "Marginals",
    "UniformTracker",
    "__version__",
    "bernoulli_poisson_kl",
    "exact_marginals",
    "lbp_marginals",
    "ospa",
    "preset_toml",
    "presets",
    "run_experiment",
]
