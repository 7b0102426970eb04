"""THz-driven rotational dynamics of asymmetric tops with random-phase wave functions."""

__version__ = "0.1.0"
