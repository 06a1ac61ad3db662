"""Federated learning simulator for diabetic retinopathy grading."""
__version__ = "0.1.0"
