"""lqembed: bounded linear-quadratic ODE embeddings of partially observed systems.

Submodules
----------
lqm        model class, energy-preserving residual, trapping diagnostics
ode        fixed-step RK4 flows, rollouts, tangent propagation
grad       hand-derived reverse-mode gradients through the RK4 flow
train      joint optimization of model parameters and latent states
systems    ground-truth simulators (Lorenz-63/96, shallow water) and EOFs
embedtools delay-embedding parameter selection, Hankel matrices, delay EDMD
metrics    forecast RMSE, Lyapunov estimators, spectra, boundedness probes
cli        command-line entry points and experiment configs
"""

__version__ = "0.1.0"
