"""Train feedforward networks with standard optimizers, then continue with partitioned Koopman operators."""

__version__ = "0.1.0"
