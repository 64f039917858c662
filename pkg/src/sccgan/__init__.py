"""Structure-constrained CycleGAN toolkit for unpaired MR-to-CT synthesis."""

__version__ = "0.1.0"
