"""Mixed-play MARL lab: bidirectional policy distillation over fictitious populations."""

__version__ = "0.1.0"
