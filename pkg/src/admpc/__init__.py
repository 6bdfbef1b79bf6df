"""Distributed MPC with online-adaptive, decoupled ellipsoidal terminal sets.

Modules
-------
model          plants, partitions, neighbor views, discretization, model files
conic          thin layer over cvxpy: PSD/SOC/linear blocks and solve contract
lmi            terminal-cost synthesis and the adaptive terminal-set conditions
terminal_sets  ellipsoids, polytopes, O_inf computation and sampled validation
mpc            the five formulations and the receding-horizon engine
benchmarks     the two-state example, spring-mass-damper chains, campaigns
admm           consensus ADMM solver for the adaptive formulation
cli            command-line front end
"""

__version__ = "0.1.0"
