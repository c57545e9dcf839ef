"""Small-area estimation toolkit for multidimensional poverty mapping.

Pipeline pieces: design-based direct estimation (`povmap.survey`),
hierarchical Bayes model families (`povmap.models`), a self-contained
NUTS sampler (`povmap.hmc`), convergence diagnostics
(`povmap.diagnostics`), PSIS-LOO model comparison (`povmap.loo`),
posterior reporting (`povmap.reports`), a synthetic survey generator
(`povmap.simulate`), and a CLI (`povmap.cli`).
"""

__version__ = "0.1.0"

from .records import AreaDesignSummary, AreaRecord, DesignEffects, PersonRecord

__all__ = [
    "AreaDesignSummary",
    "AreaRecord",
    "DesignEffects",
    "PersonRecord",
    "__version__",
]
