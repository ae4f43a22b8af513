"""saelab: a desk-scale small-area-estimation simulation laboratory.

Synthesizes gridded populations, draws stratified two-stage cluster
surveys, fits design-based and latent-Gaussian model-based estimators
under penalized-complexity priors, aggregates predictions to the county
level, and scores replicated experiments.
"""

__version__ = "0.1.0"
