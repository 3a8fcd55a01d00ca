"""Progressive local scene graphs for dynamic-scene view synthesis."""

__version__ = "0.1.0"
