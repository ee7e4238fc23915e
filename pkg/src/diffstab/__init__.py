"""Diffusion behavior cloning with stabilizing primitive controllers.

Subpackages cover the dynamics testbeds, Riccati gain synthesis,
incremental-stability verification, trajectory chunking and distances,
observation smoothing and deconvolution kernels, a from-scratch conditional
diffusion model, the end-to-end imitation pipeline, and evaluation tools.
"""

__version__ = "0.1.0"
