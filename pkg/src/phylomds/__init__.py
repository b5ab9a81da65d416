"""Bayesian multidimensional scaling with a phylogenetic diffusion prior.

Modules
-------
special    stable log Phi and inverse Mills ratio
core       data types and the serial reference likelihood and gradient
engine     interchangeable serial, vectorised, threaded and tiled backends
tree       phylogenies and Newick input/output
prior      tree covariance and matrix-normal prior (dense and pruning)
sampler    random-scan HMC / Gibbs / Metropolis chain
selection  K-fold cross-validation by held-out log predictive density
effective  effective distances on travel networks
pipeline   simulate / fit / cross-validate workflows
benchmark  engine timing harness
io, cli    file formats, configuration and the ``phylomds`` command
"""

__version__ = "0.1.0"
