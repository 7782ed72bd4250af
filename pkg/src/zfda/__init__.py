"""Zero-forget domain adaptation of autoencoders via sparse additive modifications."""

__version__ = "0.1.0"
