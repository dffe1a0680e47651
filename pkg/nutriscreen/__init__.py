"""
nutriscreen: child malnutrition screening from household survey data.

Labels children from anthropometric z-scores, encodes survey answers,
selects features with an ensemble of rankers and benchmarks a roster of
deep, boosted and traditional classifiers.
"""
__version__ = "0.1.0"
