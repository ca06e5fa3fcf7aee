"""Safe adaptive control: robust adaptive barrier functions, contraction-metric
tracking and set-membership parameter identification."""

__version__ = "0.1.0"
