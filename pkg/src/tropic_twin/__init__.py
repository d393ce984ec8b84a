"""Physics-informed digital twin and cooling optimizer for a tropical data hall."""

__version__ = "0.1.0"
