"""Seasonal temperature forecasting: station data pipeline, symbolic
regression by genetic programming, a back-propagation perceptron and the
metrics used to compare them."""

__version__ = "0.1.0"
