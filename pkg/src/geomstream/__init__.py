"""Two-stream invariant/equivariant transformer with machine-checked symmetry
contracts, plus a charged N-body forecasting task to train it on."""

__version__ = "0.1.0"
