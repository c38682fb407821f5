"""Fast knowledge distillation for lightweight task-oriented semantic communication."""

__version__ = "0.1.0"
