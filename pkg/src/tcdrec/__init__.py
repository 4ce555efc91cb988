"""Time-aware cross-domain sequential recommender.

Continuous-time behavioral preference evolution over irregular intervals,
counterfactual-enhanced temporal semantic preferences from prompt encodings,
and time-preference guided domain transfer, with a reproducible experiment
harness.
"""

__version__ = "0.1.0"
