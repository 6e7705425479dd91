"""Building-energy competition harness: data, cleaning, features, trees, blending, scoring."""

__version__ = "0.1.0"
