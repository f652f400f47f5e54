"""Heat semigroups on model manifolds from time-sliced geodesic polygons."""

__version__ = "0.1.0"
