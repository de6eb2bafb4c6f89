"""Long-horizon manipulation with learned motion primitives and task conditions."""

__version__ = "0.1.0"
