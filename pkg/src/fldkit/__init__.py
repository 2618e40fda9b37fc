"""fldkit: facial landmark detection toolkit.

Multi-order spatial/channel feature correlations, covariance pooling via
coupled matrix iteration, boundary-adaptive probabilistic heatmap
regression with a windowed landmark search, plus a desk-scale trainer
and evaluation metrics.
"""

__version__ = "0.1.0"
