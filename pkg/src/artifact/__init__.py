"""Single-pass, budget-controlled image protection with a frequency-aware generator."""

__version__ = "0.1.0"
