"""Post-hoc pseudo-OOD regularization for attention-based text classifiers."""
__version__ = "0.1.0"
