"""Shadow-stack instrumentation lab over a miniature low-level IR."""

__version__ = "0.1.0"
