"""Privacy leakage of deep transfer learning: paradigms, leakage traces, attacks, defenses."""

__version__ = "0.1.0"
