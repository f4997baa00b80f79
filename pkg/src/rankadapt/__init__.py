"""Ranking-aware adapter over frozen image/text embeddings.

Subpackages:
  autodiff   - dense tensors, reverse-mode gradients, finite-difference oracle
  model      - adapter configuration, parameters, encoding and heads
  losses     - pair construction, regression and ranking losses
  metrics    - MAE/accuracy and rank correlations, evaluation reports
  datastore  - embedding file format, splits, synthetic generators
  checkpoint - versioned parameter container with config echo
  optim      - AdamW with decoupled weight decay
  train      - training/evaluation/ablation drivers
  cli        - command-line entry point
"""

__version__ = "0.1.0"
