"""Trajectory prediction with grid LSTM encoders, head-pose cues and learned
adaptive neighborhoods."""

__version__ = "0.1.0"
