"""gaitlab: desk-scale clinical gait analysis pipeline and review tooling."""

__version__ = "0.1.0"
