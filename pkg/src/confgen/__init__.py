"""Two-stage generative modeling of molecular conformations.

A conditional continuous flow over inter-atomic distances proposes
geometry; coordinates are assembled by ascending a quadratic edge-residual
objective; an invariant energy model, trained contrastively against the
flow's own samples, refines conformations by Langevin dynamics. The
metrics subpackage evaluates ensembles by coverage, matching, junk
fraction, diversity, and kernel discrepancies of distance marginals.
"""

__version__ = "0.1.0"
