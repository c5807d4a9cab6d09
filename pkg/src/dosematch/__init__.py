"""Matched observational studies with continuous instruments.

Near/far matching designs, randomization inference for effect ratios,
design efficiency theory, and model-assisted sensitivity analysis.
"""

__version__ = "0.1.0"
