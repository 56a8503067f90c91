"""Desk-scale coded-aperture snapshot spectral imaging.

Subpackages and modules:
  autodiff  -- tape-based reverse-mode differentiation, closed op catalog
  cassi     -- the dispersive imaging operator and its file formats
  unfolding -- iterative reconstruction with a closed-form data step
  denoiser  -- windowed/shuffled half-attention image prior
  training  -- toy-scale optimizer loop, synthetic scenes, augmentation
  metrics   -- reconstruction quality scores
  verify    -- self-check property suites behind the `verify` subcommand
  cli       -- command-line entry point
"""

__version__ = "0.1.0"
