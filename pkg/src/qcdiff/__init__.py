"""Quality-conditioned toy diffusion framework.

A desk-scale pipeline: procedural scenes with parametric degradations, a
trained no-reference quality regressor, a small DDPM with content
cross-attention, a quality-conditioning attention adapter with negative
guidance, a gradient-guidance baseline, and an evaluation harness.
"""

__version__ = "0.1.0"
