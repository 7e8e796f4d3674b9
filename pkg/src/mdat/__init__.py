"""Episodic adversarial training for few-shot classifiers with a task-conditioned
distribution regularizer, on a small numpy autodiff engine."""

__version__ = "0.1.0"
