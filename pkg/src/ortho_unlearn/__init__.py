"""Orthogonal-subspace continual unlearning with LoRA adapters on a frozen head."""

__version__ = "0.1.0"
