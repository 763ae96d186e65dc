"""Domain-generalization training and evaluation for vision-language classifiers."""

__version__ = "0.1.0"
