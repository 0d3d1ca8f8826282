"""Quality calibration, reward scoring, and dataset assembly for
instruction distillation pipelines."""

__version__ = "0.1.0"
