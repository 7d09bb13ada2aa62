"""Bayesian phylogeographic and ecological clustering.

Haplotype networks under relaxed parsimony, temporal-ordering root
posteriors, and tree-constrained Gaussian clustering fitted by MCMC.
"""

__version__ = "0.1.0"
