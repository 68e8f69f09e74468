"""ELLMA: a phase-structured conversation engine for situated language tutoring."""

__version__ = "0.1.0"
