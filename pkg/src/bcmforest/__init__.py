"""Bayesian causal mediation forests.

Varying-coefficient tree ensembles for heterogeneous natural direct and
indirect effects, with posterior summarization and a simulation harness.
"""

__version__ = "0.1.0"

from . import _kernels  # noqa: F401  (backend selection happens at import)
from .effects import (  # noqa: F401
    bayesian_bootstrap_averages,
    conditional_effects,
    subgroup_averages,
)
from .model import (  # noqa: F401
    BCMFConfig,
    ForestConfig,
    MediationData,
    MediationFit,
    fit_bcmf,
    predict_functions,
)
from .trees import (  # noqa: F401
    Forest,
    ForestSampler,
    NoisePrior,
    ScaledResponse,
    Tree,
    TreePrior,
)
