"""zoosched: training-efficient architecture search, zoo analytics, and an
online fine-tuning schedule generator."""

__version__ = "0.1.0"
